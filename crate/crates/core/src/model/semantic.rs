//! Semantic pathway: causal self-attention over image + text tokens,
//! query-based attention pooling and the projection into vision channels.

use super::params::IMAGE_TOKENS;
use super::SegModel;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use crate::Scalar;

/// Per-head query/key/value maps (`d×d_h` each) and the output map (`d×d`).
pub struct AttentionWeights<T: Scalar> {
    pub wq: Vec<Tensor<T>>,
    pub wk: Vec<Tensor<T>>,
    pub wv: Vec<Tensor<T>>,
    pub wo: Tensor<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    pub fn heads(&self) -> usize {
        self.wq.len()
    }
}

/// Multi-head attention from `queries` (`q×d`) onto `keys_values` (`L×d`),
/// optionally with an additive `L_q×L` score mask.
fn multi_head<T: Scalar>(
    queries: &Tensor<T>,
    keys_values: &Tensor<T>,
    w: &AttentionWeights<T>,
    mask: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let d = queries.shape()[1];
    if w.heads() == 0 || !d.is_multiple_of(w.heads()) {
        return Err(Error::Config(format!("width {d} not divisible by {} heads", w.heads())));
    }
    let scale = T::one() / T::count(d / w.heads()).sqrt();
    let mut outs = Vec::with_capacity(w.heads());
    for h in 0..w.heads() {
        let q = queries.matmul(&w.wq[h])?;
        let k = keys_values.matmul(&w.wk[h])?;
        let v = keys_values.matmul(&w.wv[h])?;
        let mut scores = q.matmul(&k.t()?)?.scale(scale);
        if let Some(m) = mask {
            scores = scores.add(m)?;
        }
        outs.push(scores.softmax(1)?.matmul(&v)?);
    }
    Tensor::concat(&outs, 1)?.matmul(&w.wo)
}

/// Pools `hidden` (`L×d`) into one `1×d` vector with the learnable query
/// `query` (`1×d`) as the attention query.
pub fn attention_pool<T: Scalar>(query: &Tensor<T>, hidden: &Tensor<T>, w: &AttentionWeights<T>) -> Result<Tensor<T>> {
    if query.rank() != 2 || query.shape()[0] != 1 || hidden.rank() != 2 || query.shape()[1] != hidden.shape()[1] {
        return shape_err(format!("pool query {:?} vs hidden {:?}", query.shape(), hidden.shape()));
    }
    multi_head(query, hidden, w, None)
}

/// `W_p · ẑ + b_p` with `W_p` of shape `C×d`, `ẑ` of length `d`; returns a
/// length-`C` vector.
pub fn project_semantic<T: Scalar>(pooled: &Tensor<T>, w_p: &Tensor<T>, b_p: &Tensor<T>) -> Result<Tensor<T>> {
    let d = pooled.numel();
    if w_p.rank() != 2 || w_p.shape()[1] != d || b_p.numel() != w_p.shape()[0] {
        return shape_err(format!("projection {:?}/{:?} vs input of length {d}", w_p.shape(), b_p.shape()));
    }
    let c = w_p.shape()[0];
    let col = pooled.reshape(&[d, 1])?;
    w_p.matmul(&col)?.reshape(&[c])?.add(&b_p.reshape(&[c])?)
}

/// `0` on and below the diagonal, `-∞` above.
pub fn causal_mask<T: Scalar>(len: usize) -> Tensor<T> {
    let data = (0..len * len)
        .map(|i| if i % len > i / len { T::neg_infinity() } else { T::zero() })
        .collect();
    Tensor::leaf(data, vec![len, len], false)
}

impl<T: Scalar> SegModel<T> {
    pub(crate) fn attention(&self, prefix: &str) -> AttentionWeights<T> {
        let per_head = |m: &str| (0..self.hyper.heads).map(|h| self.p(&format!("{prefix}.h{h}.{m}")).clone()).collect();
        AttentionWeights {
            wq: per_head("wq"),
            wk: per_head("wk"),
            wv: per_head("wv"),
            wo: self.p(&format!("{prefix}.wo")).clone(),
        }
    }

    /// `x · W + b` for row-major `x` (`n×in`), `W` (`in×out`), `b` (`1×out`).
    pub(crate) fn linear(&self, x: &Tensor<T>, w: &str, b: &str) -> Result<Tensor<T>> {
        let y = x.matmul(self.p(w))?;
        y.add(&self.p(b).repeat_rows(y.shape()[0])?)
    }

    /// Image tokens: 2×2 average pooling of `z_img`, projected to width `d`.
    pub fn image_tokens(&self, z_img: &Tensor<T>) -> Result<Tensor<T>> {
        let c = z_img.shape()[0];
        let pooled = z_img.avg_pool((2, 2))?.reshape(&[c, IMAGE_TOKENS])?.t()?;
        self.linear(&pooled, "semantic.img_proj.weight", "semantic.img_proj.bias")
    }

    /// Runs the causal encoder over `l1` image tokens followed by the text
    /// tokens. Returns `(z_vlm, next_token_logits)`, shapes `L×d` and `L×V`.
    pub fn semantic_forward(&self, z_img: &Tensor<T>, tokens: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let len = IMAGE_TOKENS + tokens.len();
        if len > self.hyper.max_len {
            return Err(Error::Config(format!("sequence of {len} exceeds max_len {}", self.hyper.max_len)));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.hyper.vocab) {
            return Err(Error::Vocabulary(format!("token id {bad}")));
        }
        let img = self.image_tokens(z_img)?;
        let text = self.p("semantic.tok_embed").gather_rows(tokens)?;
        let positions: Vec<usize> = (0..len).collect();
        let x = Tensor::concat(&[img, text], 0)?.add(&self.p("semantic.pos_embed").gather_rows(&positions)?)?;

        let attn = multi_head(&x, &x, &self.attention("semantic.attn"), Some(&causal_mask(len)))?;
        let x = x.add(&attn)?;
        let hidden = self.linear(&x, "semantic.mlp.w1", "semantic.mlp.b1")?.relu();
        let z_vlm = x.add(&self.linear(&hidden, "semantic.mlp.w2", "semantic.mlp.b2")?)?;
        let logits = self.linear(&z_vlm, "semantic.lm_head.weight", "semantic.lm_head.bias")?;
        Ok((z_vlm, logits))
    }

    /// Pooled semantic embedding `ẑ_vlm` (`1×d`).
    pub fn pool(&self, z_vlm: &Tensor<T>) -> Result<Tensor<T>> {
        attention_pool(self.p("pool.query"), z_vlm, &self.attention("pool"))
    }

    /// Projected semantic vector `z̄_vlm` (length `C`).
    pub fn project(&self, pooled: &Tensor<T>) -> Result<Tensor<T>> {
        project_semantic(pooled, self.p("proj.weight"), self.p("proj.bias"))
    }
}
