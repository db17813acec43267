//! Hard-sample selection, XOR error regions and simulated corrective clicks.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{shape_err, Error, Result};
use crate::model::{ForwardOutput, Prompt, PromptPoint, SegModel};
use crate::tensor::Tensor;
use crate::uncertainty::soft_dice_loss;
use crate::Scalar;

/// Threshold turning a confidence map into the binary prediction `M`.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardSet {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub r: f64,
}

/// `max(1, ⌊r·B⌋)`
pub fn hard_set_size(batch: usize, r: f64) -> usize {
    ((r * batch as f64).floor() as usize).clamp(1, batch.max(1))
}

/// The `max(1, ⌊r·B⌋)` most uncertain batch positions, highest first; ties
/// go to the lower index.
pub fn select_hard(u: &[f64], r: f64) -> Result<HardSet> {
    if u.is_empty() {
        return Err(Error::Contract("hard-set selection on an empty batch".into()));
    }
    if let Some(bad) = u.iter().find(|v| !v.is_finite()) {
        return Err(Error::Contract(format!("non-finite uncertainty {bad}")));
    }
    let mut order: Vec<usize> = (0..u.len()).collect();
    order.sort_by(|&a, &b| u[b].total_cmp(&u[a]).then(a.cmp(&b)));
    order.truncate(hard_set_size(u.len(), r));
    let scores = order.iter().map(|&i| u[i]).collect();
    Ok(HardSet { indices: order, scores, r })
}

/// `E = M ⊕ Y` split into false negatives (`Y=1, M=0`) and false positives
/// (`Y=0, M=1`). Pixel lists are `(x, y)` in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorRegion {
    pub e: Mask,
    pub false_negatives: Vec<(usize, usize)>,
    pub false_positives: Vec<(usize, usize)>,
}

impl ErrorRegion {
    pub fn is_empty(&self) -> bool {
        self.false_negatives.is_empty() && self.false_positives.is_empty()
    }
}

pub fn error_region(m: &Mask, y: &Mask) -> Result<ErrorRegion> {
    if !m.same_shape(y) {
        return shape_err(format!("prediction {}×{} vs truth {}×{}", m.height, m.width, y.height, y.width));
    }
    let mut e = Mask::zeros(m.height, m.width);
    let (mut false_negatives, mut false_positives) = (Vec::new(), Vec::new());
    for (i, (&a, &b)) in m.bits.iter().zip(&y.bits).enumerate() {
        let xy = (i % m.width, i / m.width);
        match (a, b) {
            (0, 1) => false_negatives.push(xy),
            (1, 0) => false_positives.push(xy),
            _ => continue,
        }
        e.bits[i] = 1;
    }
    Ok(ErrorRegion { e, false_negatives, false_positives })
}

/// Up to `n` distinct pixels drawn uniformly from `E`; false negatives
/// become positive clicks, false positives negative ones.
pub fn sample_corrective_points<R: Rng + ?Sized>(region: &ErrorRegion, n: usize, rng: &mut R) -> Vec<PromptPoint> {
    let fn_count = region.false_negatives.len();
    let total = fn_count + region.false_positives.len();
    if total == 0 || n == 0 {
        return Vec::new();
    }
    sample(rng, total, n.min(total))
        .into_iter()
        .map(|i| {
            if i < fn_count {
                let (x, y) = region.false_negatives[i];
                PromptPoint::positive(x, y)
            } else {
                let (x, y) = region.false_positives[i - fn_count];
                PromptPoint::negative(x, y)
            }
        })
        .collect()
}

/// Binary prediction `P ≥ 0.5`.
pub fn binarize<T: Scalar>(p: &Tensor<T>) -> Result<Mask> {
    match p.shape() {
        [h, w] => Mask::from_scores(*h, *w, p.data(), T::lit(MASK_THRESHOLD)),
        s => shape_err(format!("confidence map must be H×W, got {s:?}")),
    }
}

/// Second decoder pass with `original` plus `corrective` points. Returns the
/// refined confidence map and, given `truth`, the refined soft Dice loss.
pub fn refine_pass<T: Scalar>(
    model: &SegModel<T>,
    first: &ForwardOutput<T>,
    original: &Prompt,
    corrective: &[PromptPoint],
    truth: Option<&Tensor<T>>,
    eps_dice: f64,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let (_, p) = model.refine(first, &original.extended(corrective))?;
    let loss = truth.map(|y| soft_dice_loss(&p, y, eps_dice)).transpose()?;
    Ok((p, loss))
}
