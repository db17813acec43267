//! The dual-pathway segmentation model.
//!
//! Vision path: three 3×3 conv blocks (strides 1, 2, 2) to `z_img`.
//! Semantic path: a causal self-attention block over pooled image tokens and
//! the text template, attention-pooled and projected to `z̄_vlm`. The decoder
//! lets the prompt rows plus `z̄_vlm` cross-attend over `z_img`.

mod checkpoint;
mod decoder;
mod params;
mod prompt;
mod semantic;
pub mod vocab;

use std::collections::BTreeMap;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC, VERSION};
pub use decoder::coordinate_channels;
pub use params::{Hyper, ModelParams, ParamSpec, ParamTensor, IMAGE_TOKENS};
pub use prompt::{BoxPrompt, Polarity, Prompt, PromptPoint};
pub use semantic::{attention_pool, causal_mask, project_semantic, AttentionWeights};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;
use crate::Scalar;

/// Everything one forward pass produces. Intermediate tensors keep their
/// graph so losses built on them backpropagate into the parameters.
#[derive(Clone)]
pub struct ForwardOutput<T: Scalar> {
    /// `H×W`
    pub logits: Tensor<T>,
    /// `H×W`, `sigmoid(logits)`
    pub p: Tensor<T>,
    /// `C×h×w`
    pub z_img: Tensor<T>,
    /// `L×d`
    pub z_vlm: Tensor<T>,
    /// length `C`
    pub z_bar: Tensor<T>,
    /// `L×V`
    pub next_token_logits: Tensor<T>,
    /// Text tokens fed after the image tokens.
    pub text_tokens: Vec<usize>,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn image_size(&self) -> (usize, usize) {
        (self.p.shape()[0], self.p.shape()[1])
    }
}

/// Parameters bound as graph leaves.
pub struct SegModel<T: Scalar> {
    pub hyper: Hyper,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> SegModel<T> {
    /// Binds `params`; with `requires_grad` every parameter collects
    /// gradients on `backward`.
    pub fn new(params: &ModelParams<T>, requires_grad: bool) -> Self {
        Self { hyper: params.hyper, params: params.bind(requires_grad) }
    }

    /// Wraps already-bound tensors (names and shapes as in `hyper.layout()`).
    pub fn from_tensors(hyper: Hyper, params: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        for spec in hyper.layout() {
            match params.get(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => {}
                _ => return shape_err(format!("parameter `{}` missing or not shaped {:?}", spec.name, spec.shape)),
            }
        }
        Ok(Self { hyper, params })
    }

    pub(crate) fn p(&self, name: &str) -> &Tensor<T> {
        self.params.get(name).unwrap_or_else(|| panic!("parameter `{name}` missing from layout"))
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    /// Accumulated gradient per parameter (zeros where none flowed).
    pub fn grads(&self) -> BTreeMap<String, Vec<T>> {
        self.params
            .iter()
            .map(|(n, t)| (n.clone(), t.grad().unwrap_or_else(|| vec![T::zero(); t.numel()])))
            .collect()
    }

    pub fn zero_grad(&self) {
        self.params.values().for_each(Tensor::zero_grad);
    }

    /// `H×W` image to `C×(H/4)×(W/4)` features.
    pub fn encode_image(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let ds = self.hyper.downsample;
        if image.rank() != 2 || !image.shape()[0].is_multiple_of(ds) || !image.shape()[1].is_multiple_of(ds) || image.shape()[0] < ds {
            return shape_err(format!("image {:?} not divisible by downsample factor {ds}", image.shape()));
        }
        let mut x = image.reshape(&[1, image.shape()[0], image.shape()[1]])?;
        for (i, stride) in [(1, 1), (2, 2), (3, 2)] {
            x = x
                .conv2d(self.p(&format!("vision.conv{i}.weight")), stride)?
                .add_channel_bias(self.p(&format!("vision.conv{i}.bias")))?
                .relu();
        }
        Ok(x)
    }

    /// The full pipeline for one image, prompt and text template.
    pub fn forward(&self, image: &Tensor<T>, prompt: &Prompt, concept_id: usize, modality_id: usize) -> Result<ForwardOutput<T>> {
        let tokens = vocab::prompt_tokens(concept_id, modality_id)?;
        self.forward_tokens(image, prompt, tokens)
    }

    pub fn forward_tokens(&self, image: &Tensor<T>, prompt: &Prompt, text_tokens: Vec<usize>) -> Result<ForwardOutput<T>> {
        let z_img = self.encode_image(image)?;
        let size = (image.shape()[0], image.shape()[1]);
        let (z_vlm, next_token_logits) = self.semantic_forward(&z_img, &text_tokens)?;
        let z_bar = self.project(&self.pool(&z_vlm)?)?;
        let z_vp = self.encode_prompt(prompt, size)?;
        let (logits, p) = self.decode_mask(&z_img, &z_vp, &z_bar, size)?;
        Ok(ForwardOutput { logits, p, z_img, z_vlm, z_bar, next_token_logits, text_tokens })
    }

    /// Re-decodes with a new prompt, reusing the image features and semantic
    /// vector of `out`. Returns `(logits, P)`.
    pub fn refine(&self, out: &ForwardOutput<T>, prompt: &Prompt) -> Result<(Tensor<T>, Tensor<T>)> {
        let size = out.image_size();
        let z_vp = self.encode_prompt(prompt, size)?;
        self.decode_mask(&out.z_img, &z_vp, &out.z_bar, size)
    }
}
