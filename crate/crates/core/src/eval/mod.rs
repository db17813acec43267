//! Segmentation metrics, linear probing, bias-stratified reports and the
//! ablation harness.

mod ablation;
mod probe;
mod report;

pub use ablation::{ablation_run, AblationRow, AblationTable, Variant};
pub use probe::{global_features, linear_probe, ProbeOptions, ProbeReport};
pub use report::{stratified_report, Cell, Gaps, StratifiedReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Mask, SampleRecord};
use crate::error::{shape_err, Error, Result};
use crate::hitl::{binarize, error_region, sample_corrective_points};
use crate::model::{ModelParams, Prompt, SegModel};
use crate::train::random_foreground_point;
use crate::uncertainty::inference_uncertainty;
use crate::Scalar;

/// `(dice, iou)`; two empty masks score `(1, 1)`.
pub fn dice_iou(m: &Mask, y: &Mask) -> Result<(f64, f64)> {
    if !m.same_shape(y) {
        return shape_err(format!("masks {}×{} and {}×{}", m.height, m.width, y.height, y.width));
    }
    let (mut inter, mut sm, mut sy) = (0usize, 0usize, 0usize);
    for (&a, &b) in m.bits.iter().zip(&y.bits) {
        inter += (a & b) as usize;
        sm += a as usize;
        sy += b as usize;
    }
    if sm + sy == 0 {
        return Ok((1.0, 1.0));
    }
    let union = sm + sy - inter;
    Ok((2.0 * inter as f64 / (sm + sy) as f64, inter as f64 / union as f64))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedMetric("AUC needs both positive and negative labels".into()));
    }
    let mut twice = 0u64;
    for &p in &pos {
        for &n in &neg {
            twice += if p > n { 2 } else if p == n { 1 } else { 0 };
        }
    }
    Ok(twice as f64 / (2 * pos.len() * neg.len()) as f64)
}

/// One test-time prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    #[serde(skip)]
    pub mask: Option<Mask>,
    pub dice: f64,
    pub iou: f64,
    pub u_vl: f64,
    pub clicks: usize,
}

fn eval_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0xD134_2543_DE82_EF95));
    rng.set_stream(21);
    rng
}

/// Predicts one sample from a random foreground click (drawn from `rng`),
/// then applies `clicks` oracle corrective points in a single refinement.
pub fn predict_sample<T: Scalar>(
    model: &SegModel<T>,
    sample: &SampleRecord,
    clicks: usize,
    eps1: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Prediction> {
    let prompt = Prompt::points(vec![random_foreground_point(&sample.mask, rng)]);
    let out = model.forward(&sample.image.to_tensor(), &prompt, sample.concept_id, sample.modality_id)?;
    let mut p = out.p.clone();
    let mut used = 0;
    if clicks > 0 {
        let region = error_region(&binarize(&out.p)?, &sample.mask)?;
        let pts = sample_corrective_points(&region, clicks, rng);
        used = pts.len();
        if used > 0 {
            p = model.refine(&out, &prompt.extended(&pts))?.1;
        }
    }
    let mask = binarize(&p)?;
    let (dice, iou) = dice_iou(&mask, &sample.mask)?;
    let (_, u_vl) = inference_uncertainty(&out.z_img, &p, &out.z_bar, eps1)?;
    Ok(Prediction { id: sample.id.clone(), mask: Some(mask), dice, iou, u_vl, clicks: used })
}

/// Predictions for every sample of `data`; the initial click of sample `i`
/// depends only on `(seed, i)`, so runs with and without corrective clicks
/// share their starting prompts.
pub fn predict_dataset<T: Scalar>(params: &ModelParams<T>, data: &Dataset, clicks: usize, seed: u64) -> Result<Vec<Prediction>> {
    let model = SegModel::new(params, false);
    data.samples
        .iter()
        .enumerate()
        .map(|(i, s)| predict_sample(&model, s, clicks, 1e-6, &mut eval_rng(seed, i)))
        .collect()
}

pub fn mean_dice(preds: &[Prediction]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().map(|p| p.dice).sum::<f64>() / preds.len() as f64
}
