use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

use super::vocab::TOKENS;

/// Architecture sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyper {
    /// Vision channels `C`.
    pub channels: usize,
    /// Semantic width `d`.
    pub width: usize,
    pub heads: usize,
    /// Vocabulary size `V`.
    pub vocab: usize,
    /// Maximum semantic sequence length `L_max`.
    pub max_len: usize,
    /// Spatial downsampling of the vision encoder (fixed by its strides).
    pub downsample: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Self { channels: 32, width: 32, heads: 2, vocab: 24, max_len: 16, downsample: 4 }
    }
}

/// Number of pooled image tokens fed to the semantic pathway (2×2 grid).
pub const IMAGE_TOKENS: usize = 4;

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.width == 0 || self.heads == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.vocab < TOKENS.len() {
            return Err(Error::Config(format!("vocab {} smaller than the {} fixed tokens", self.vocab, TOKENS.len())));
        }
        if self.downsample != 4 {
            return Err(Error::Config("the vision encoder downsamples by exactly 4".into()));
        }
        if self.max_len < IMAGE_TOKENS + 5 {
            return Err(Error::Config(format!("max_len {} cannot hold the prompt", self.max_len)));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    /// Parameter names, shapes and fan-ins.
    pub fn layout(&self) -> Vec<ParamSpec> {
        let (c, d, v, l) = (self.channels, self.width, self.vocab, self.max_len);
        let dh = self.head_width();
        let mut s = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, fan_in: usize| s.push(ParamSpec { name, shape, fan_in });
        for (i, c_in) in [(1, 1), (2, c), (3, c)] {
            add(format!("vision.conv{i}.weight"), vec![c, c_in, 3, 3], 9 * c_in);
            add(format!("vision.conv{i}.bias"), vec![c], 9 * c_in);
        }
        add("prompt.polarity".into(), vec![2, c], c);
        add("prompt.corner".into(), vec![2, c], c);
        add("prompt.coord".into(), vec![2, c], 2);
        add("semantic.img_proj.weight".into(), vec![c, d], c);
        add("semantic.img_proj.bias".into(), vec![1, d], c);
        add("semantic.tok_embed".into(), vec![v, d], d);
        add("semantic.pos_embed".into(), vec![l, d], d);
        for h in 0..self.heads {
            for m in ["wq", "wk", "wv"] {
                add(format!("semantic.attn.h{h}.{m}"), vec![d, dh], d);
            }
        }
        add("semantic.attn.wo".into(), vec![d, d], d);
        add("semantic.mlp.w1".into(), vec![d, 2 * d], d);
        add("semantic.mlp.b1".into(), vec![1, 2 * d], d);
        add("semantic.mlp.w2".into(), vec![2 * d, d], 2 * d);
        add("semantic.mlp.b2".into(), vec![1, d], 2 * d);
        add("semantic.lm_head.weight".into(), vec![d, v], d);
        add("semantic.lm_head.bias".into(), vec![1, v], d);
        add("pool.query".into(), vec![1, d], d);
        for h in 0..self.heads {
            for m in ["wq", "wk", "wv"] {
                add(format!("pool.h{h}.{m}"), vec![d, dh], d);
            }
        }
        add("pool.wo".into(), vec![d, d], d);
        add("proj.weight".into(), vec![c, d], d);
        add("proj.bias".into(), vec![c], d);
        add("decoder.wq".into(), vec![c, c], c);
        add("decoder.wk".into(), vec![c + 3, c], c + 3);
        add("decoder.wv".into(), vec![c + 3, c], c + 3);
        add("decoder.wm".into(), vec![c, c], c);
        add("decoder.gate".into(), vec![c, 1], c);
        add("decoder.head.weight".into(), vec![1, c + 2], c + 2);
        add("decoder.head.bias".into(), vec![1], c + 2);
        s
    }

    /// Recovers the sizes from a parameter map (used when loading
    /// checkpoints, which store only tensors).
    pub fn infer<T>(tensors: &BTreeMap<String, ParamTensor<T>>) -> Result<Self> {
        let shape = |n: &str| {
            tensors
                .get(n)
                .map(|t| t.shape.clone())
                .ok_or_else(|| Error::CheckpointFormat(format!("missing parameter `{n}`")))
        };
        let conv = shape("vision.conv1.weight")?;
        let tok = shape("semantic.tok_embed")?;
        let pos = shape("semantic.pos_embed")?;
        let heads = tensors.keys().filter(|k| k.starts_with("semantic.attn.h") && k.ends_with(".wq")).count();
        let hyper = Hyper { channels: conv[0], width: tok[1], heads, vocab: tok[0], max_len: pos[0], downsample: 4 };
        hyper.validate()?;
        Ok(hyper)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Named parameter store of the whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub hyper: Hyper,
    pub tensors: BTreeMap<String, ParamTensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Uniform `[-1/√fan_in, 1/√fan_in]` initialization from a seed.
    pub fn init(hyper: Hyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = hyper
            .layout()
            .into_iter()
            .map(|spec| {
                let bound = 1.0 / (spec.fan_in as f64).sqrt();
                let n: usize = spec.shape.iter().product();
                let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
                (spec.name, ParamTensor { shape: spec.shape, data })
            })
            .collect();
        Ok(Self { hyper, tensors })
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Graph leaves for every parameter.
    pub fn bind(&self, requires_grad: bool) -> BTreeMap<String, Tensor<T>> {
        self.tensors
            .iter()
            .map(|(n, p)| (n.clone(), Tensor::leaf(p.data.clone(), p.shape.clone(), requires_grad)))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            hyper: self.hyper,
            tensors: self
                .tensors
                .iter()
                .map(|(n, p)| {
                    let data = p.data.iter().map(|&v| U::lit(v.to_f64_lossy())).collect();
                    (n.clone(), ParamTensor { shape: p.shape.clone(), data })
                })
                .collect(),
        }
    }

    /// CRC32 over names, shapes and `f32` values; stable identity of a
    /// frozen parameter set.
    pub fn fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (n, p) in &self.tensors {
            h.update(n.as_bytes());
            for &d in &p.shape {
                h.update(&(d as u32).to_le_bytes());
            }
            for &v in &p.data {
                h.update(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
        }
        h.finalize()
    }
}
