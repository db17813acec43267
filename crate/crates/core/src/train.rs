//! Loss assembly, AdamW and the uncertainty-weighted, click-augmented
//! training loop.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Mask, SampleRecord};
use crate::error::{Error, Result};
use crate::hitl::{binarize, error_region, refine_pass, sample_corrective_points, select_hard, HardSet};
use crate::model::vocab::{next_token_targets, PAD};
use crate::model::{save_checkpoint, ForwardOutput, Hyper, ModelParams, Prompt, PromptPoint, SegModel, IMAGE_TOKENS};
use crate::tensor::Tensor;
use crate::uncertainty::{soft_dice_loss, uncertainty_record, UncertaintyHyper, UncertaintyRecord};
use crate::Scalar;

/// Which parts of the method are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub uncertainty_weighting: bool,
    pub hitl: bool,
    pub vlm_loss: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { uncertainty_weighting: true, hitl: true, vlm_loss: true }
    }
}

/// Multipliers of the three loss terms in the total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub aur: f64,
    pub hitl: f64,
    pub vlm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { aur: 1.0, hitl: 1.0, vlm: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Learning rate of the semantic pathway (`semantic.*`, `pool.*`, `proj.*`).
    pub lr_vlm: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Hard-set ratio.
    pub r: f64,
    pub corrective_points: usize,
    /// Probability that a training sample contributes only its text loss
    /// (`v_i = 0`).
    pub text_only_ratio: f64,
    pub uncertainty: UncertaintyHyper,
    pub flags: AblationFlags,
    pub loss_weights: LossWeights,
    pub model: Hyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 4,
            epochs: 15,
            lr: 3e-4,
            lr_vlm: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            r: 0.3,
            corrective_points: 1,
            text_only_ratio: 0.0,
            uncertainty: UncertaintyHyper::default(),
            flags: AblationFlags::default(),
            loss_weights: LossWeights::default(),
            model: Hyper::default(),
        }
    }
}

impl TrainConfig {
    /// Learning rates of the large-model setting (base 1e-5, semantic
    /// pathway 5e-6); far too small for the toy model.
    pub fn large_scale_preset() -> Self {
        Self { lr: 1e-5, lr_vlm: 5e-6, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr_vlm >= 0.0 && self.weight_decay >= 0.0) {
            return bad(format!("invalid learning rates lr={} lr_vlm={} wd={}", self.lr, self.lr_vlm, self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("invalid Adam moments".into());
        }
        if !(self.r > 0.0 && self.r <= 1.0) {
            return bad(format!("r must lie in (0, 1], got {}", self.r));
        }
        if self.corrective_points == 0 {
            return bad("corrective_points must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.text_only_ratio) {
            return bad(format!("text_only_ratio must lie in [0, 1], got {}", self.text_only_ratio));
        }
        let w = self.loss_weights;
        if ![w.aur, w.hitl, w.vlm].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return bad("loss weights must be finite and non-negative".into());
        }
        self.uncertainty.validate()?;
        self.model.validate()
    }
}

/// `Σ v_i·w_i·l_i` (`w_i ≡ 1` when weighting is off).
pub fn loss_aur<T: Scalar>(l_dice: &[Tensor<T>], w: &[f64], v: &[bool], weighting: bool) -> Result<Tensor<T>> {
    if l_dice.len() != w.len() || l_dice.len() != v.len() {
        return Err(Error::Contract("loss_aur inputs differ in length".into()));
    }
    let mut acc = Tensor::scalar(T::zero());
    for ((l, &wi), &vi) in l_dice.iter().zip(w).zip(v) {
        if vi {
            acc = acc.add(&if weighting { l.mul_scalar(wi) } else { l.clone() })?;
        }
    }
    Ok(acc)
}

/// `Σ_{i∈ℋ} v_i·l_refine,i`
pub fn loss_hitl<T: Scalar>(l_refine: &[Tensor<T>], v: &[bool]) -> Result<Tensor<T>> {
    if l_refine.len() != v.len() {
        return Err(Error::Contract("loss_hitl inputs differ in length".into()));
    }
    let mut acc = Tensor::scalar(T::zero());
    for (l, &vi) in l_refine.iter().zip(v) {
        if vi {
            acc = acc.add(l)?;
        }
    }
    Ok(acc)
}

/// Mean next-token negative log-likelihood over all non-pad targets of all
/// sequences; zero when every target is padding.
pub fn loss_vlm<T: Scalar>(seqs: &[(&Tensor<T>, &[usize])]) -> Result<Tensor<T>> {
    let mut total = Tensor::scalar(T::zero());
    let mut count = 0usize;
    for &(logits, targets) in seqs {
        let (l, v) = match logits.shape() {
            [l, v] => (*l, *v),
            s => return Err(Error::Contract(format!("next-token logits must be L×V, got {s:?}"))),
        };
        if targets.len() != l {
            return Err(Error::Contract(format!("{} targets for {l} positions", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Contract(format!("target token {t} outside vocabulary of {v}")));
        }
        let picks: Vec<usize> = targets.iter().enumerate().filter(|(_, &t)| t != PAD).map(|(k, &t)| k * v + t).collect();
        if picks.is_empty() {
            continue;
        }
        count += picks.len();
        let logp = logits.log_softmax(1)?.reshape(&[l * v, 1])?.gather_rows(&picks)?;
        total = total.sub(&logp.sum())?;
    }
    if count == 0 {
        return Ok(total);
    }
    Ok(total.scale(T::one() / T::count(count)))
}

pub fn total_loss<T: Scalar>(aur: &Tensor<T>, hitl: &Tensor<T>, vlm: &Tensor<T>, w: &LossWeights) -> Result<Tensor<T>> {
    aur.mul_scalar(w.aur).add(&hitl.mul_scalar(w.hitl))?.add(&vlm.mul_scalar(w.vlm))
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps, weight_decay, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update; `lr_for` gives the learning rate of each parameter name.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &BTreeMap<String, Vec<T>>, lr_for: impl Fn(&str) -> f64) {
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let (eps, wd) = (T::lit(self.eps), T::lit(self.weight_decay));
        for (name, p) in params.tensors.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let lr = T::lit(lr_for(name));
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                let decay = wd * p.data[i];
                p.data[i] -= lr * (update + decay);
            }
        }
    }
}

pub fn is_semantic_param(name: &str) -> bool {
    name.starts_with("semantic.") || name.starts_with("pool.") || name.starts_with("proj.")
}

/// A training sample converted once to tensors.
pub struct PreparedSample<T: Scalar> {
    pub image: Tensor<T>,
    pub truth: Tensor<T>,
    pub mask: Mask,
    pub concept_id: usize,
    pub modality_id: usize,
}

impl<T: Scalar> PreparedSample<T> {
    pub fn new(s: &SampleRecord) -> Self {
        Self {
            image: s.image.to_tensor(),
            truth: s.mask.to_tensor(),
            mask: s.mask.clone(),
            concept_id: s.concept_id,
            modality_id: s.modality_id,
        }
    }
}

/// One uniformly drawn foreground pixel as a positive click (image centre
/// when the mask is empty).
pub fn random_foreground_point<R: Rng + ?Sized>(mask: &Mask, rng: &mut R) -> PromptPoint {
    let n = mask.count();
    if n == 0 {
        return PromptPoint::positive(mask.width / 2, mask.height / 2);
    }
    let k = rng.random_range(0..n);
    let i = mask.bits.iter().enumerate().filter(|(_, &b)| b != 0).nth(k).map(|(i, _)| i).unwrap_or(0);
    PromptPoint::positive(i % mask.width, i / mask.width)
}

/// Every random or data-dependent choice of one step. Freezing it turns the
/// loss into a smooth function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    pub prompts: Vec<Prompt>,
    pub valid: Vec<bool>,
    pub records: Vec<UncertaintyRecord>,
    pub hard: Option<HardSet>,
    /// Corrective points per hard-set member, aligned with `hard.indices`.
    pub corrective: Vec<Vec<PromptPoint>>,
}

/// Loss components of one step; `total` carries the graph.
pub struct StepLosses<T: Scalar> {
    pub aur: Tensor<T>,
    pub hitl: Tensor<T>,
    pub vlm: Tensor<T>,
    pub total: Tensor<T>,
}

pub fn first_pass<T: Scalar>(model: &SegModel<T>, batch: &[&PreparedSample<T>], prompts: &[Prompt]) -> Result<Vec<ForwardOutput<T>>> {
    batch
        .iter()
        .zip(prompts)
        .map(|(s, p)| model.forward(&s.image, p, s.concept_id, s.modality_id))
        .collect()
}

/// Uncertainty records, hard set and oracle corrective clicks for a batch.
pub fn plan_step<T: Scalar, R: Rng + ?Sized>(
    cfg: &TrainConfig,
    batch: &[&PreparedSample<T>],
    outputs: &[ForwardOutput<T>],
    prompts: Vec<Prompt>,
    valid: Vec<bool>,
    click_rng: &mut R,
) -> Result<StepPlan> {
    let records = batch
        .iter()
        .zip(outputs)
        .map(|(s, o)| uncertainty_record(&o.z_img, &o.p, &o.z_bar, &s.truth, &cfg.uncertainty))
        .collect::<Result<Vec<_>>>()?;
    let (hard, corrective) = if cfg.flags.hitl {
        let u: Vec<f64> = records.iter().map(|r| r.u).collect();
        let hard = select_hard(&u, cfg.r)?;
        let corrective = hard
            .indices
            .iter()
            .map(|&i| {
                let region = error_region(&binarize(&outputs[i].p)?, &batch[i].mask)?;
                Ok(sample_corrective_points(&region, cfg.corrective_points, click_rng))
            })
            .collect::<Result<Vec<_>>>()?;
        (Some(hard), corrective)
    } else {
        (None, Vec::new())
    };
    Ok(StepPlan { prompts, valid, records, hard, corrective })
}

/// Eqs. of the objective under a fixed plan. Also returns the number of
/// refinement passes run.
pub fn assemble_losses<T: Scalar>(
    cfg: &TrainConfig,
    model: &SegModel<T>,
    batch: &[&PreparedSample<T>],
    outputs: &[ForwardOutput<T>],
    plan: &StepPlan,
) -> Result<(StepLosses<T>, usize)> {
    let eps_d = cfg.uncertainty.eps_dice;
    let dice = batch
        .iter()
        .zip(outputs)
        .map(|(s, o)| soft_dice_loss(&o.p, &s.truth, eps_d))
        .collect::<Result<Vec<_>>>()?;
    let w: Vec<f64> = plan.records.iter().map(|r| r.w).collect();
    let aur = loss_aur(&dice, &w, &plan.valid, cfg.flags.uncertainty_weighting)?;

    let mut refined = Vec::new();
    let mut refined_valid = Vec::new();
    if let Some(hard) = &plan.hard {
        for (&i, pts) in hard.indices.iter().zip(&plan.corrective) {
            let (_, l) = refine_pass(model, &outputs[i], &plan.prompts[i], pts, Some(&batch[i].truth), eps_d)?;
            refined.push(l.expect("truth supplied"));
            refined_valid.push(plan.valid[i]);
        }
    }
    let hitl = loss_hitl(&refined, &refined_valid)?;

    let vlm = if cfg.flags.vlm_loss {
        let targets: Vec<Vec<usize>> = outputs.iter().map(|o| next_token_targets(IMAGE_TOKENS, &o.text_tokens)).collect();
        let seqs: Vec<(&Tensor<T>, &[usize])> =
            outputs.iter().zip(&targets).map(|(o, t)| (&o.next_token_logits, t.as_slice())).collect();
        loss_vlm(&seqs)?
    } else {
        Tensor::scalar(T::zero())
    };
    let total = total_loss(&aur, &hitl, &vlm, &cfg.loss_weights)?;
    Ok((StepLosses { aur, hitl, vlm, total }, refined.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_aur: f64,
    pub l_hitl: f64,
    pub l_vlm: f64,
    pub loss: f64,
    pub mean_u: f64,
    pub mean_w: f64,
    /// Batch positions of the hard set.
    pub hard_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_l_aur: f64,
    pub mean_l_hitl: f64,
    pub mean_l_vlm: f64,
    pub refine_passes: usize,
    /// Mean Dice on the evaluation split, when one was supplied.
    pub eval_dice: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
    pub forward_passes: usize,
    pub refine_passes: usize,
}

pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub log: TrainLog,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Runs the whole schedule. With `out_dir`, writes `train_log.jsonl`, one
/// `summary.json` per epoch (overwritten, holding all epochs so far) and
/// `epoch_<n>.bcvl` checkpoints. `eval_fn` (if any) maps the current
/// parameters to an evaluation Dice after each epoch.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    data: &Dataset,
    out_dir: Option<&Path>,
    mut eval_fn: Option<&mut dyn FnMut(&ModelParams<T>) -> Result<f64>>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let samples: Vec<PreparedSample<T>> = data.samples.iter().map(PreparedSample::new).collect();
    let mut params = ModelParams::<T>::init(cfg.model, cfg.seed)?;
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let mut shuffle_rng = rng_stream(cfg.seed, 11);
    let mut prompt_rng = rng_stream(cfg.seed, 12);
    let mut click_rng = rng_stream(cfg.seed, 13);
    let lr_for = |name: &str| if is_semantic_param(name) { cfg.lr_vlm } else { cfg.lr };

    let mut writer = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join("train_log.jsonl"))?))
        }
        None => None,
    };
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let first_step = log.steps.len();
        let refine_before = log.refine_passes;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedSample<T>> = chunk.iter().map(|&i| &samples[i]).collect();
            let prompts: Vec<Prompt> = batch
                .iter()
                .map(|s| Prompt::points(vec![random_foreground_point(&s.mask, &mut prompt_rng)]))
                .collect();
            let valid: Vec<bool> = batch
                .iter()
                .map(|_| cfg.text_only_ratio == 0.0 || !prompt_rng.random_bool(cfg.text_only_ratio))
                .collect();

            let model = SegModel::new(&params, true);
            let outputs = first_pass(&model, &batch, &prompts)?;
            log.forward_passes += outputs.len();
            let finite = |t: &Tensor<T>| t.data().iter().all(|v| v.is_finite());
            if !outputs.iter().all(|o| finite(&o.p) && finite(&o.z_img) && finite(&o.z_bar)) {
                let step = log.steps.len() + 1;
                if let Some(w) = writer.as_mut() {
                    let nan = f64::NAN;
                    let record = StepRecord {
                        step,
                        epoch,
                        l_aur: nan,
                        l_hitl: nan,
                        l_vlm: nan,
                        loss: nan,
                        mean_u: nan,
                        mean_w: nan,
                        hard_indices: Vec::new(),
                    };
                    writeln!(w, "{}", serde_json::to_string(&record)?)?;
                    w.flush()?;
                }
                return Err(Error::Divergence { step });
            }
            let plan = plan_step(cfg, &batch, &outputs, prompts, valid, &mut click_rng)?;
            let (losses, refines) = assemble_losses(cfg, &model, &batch, &outputs, &plan)?;
            log.refine_passes += refines;

            let value = |t: &Tensor<T>| t.item().map(|v| v.to_f64_lossy());
            let n = plan.records.len() as f64;
            let record = StepRecord {
                step: log.steps.len() + 1,
                epoch,
                l_aur: value(&losses.aur)?,
                l_hitl: value(&losses.hitl)?,
                l_vlm: value(&losses.vlm)?,
                loss: value(&losses.total)?,
                mean_u: plan.records.iter().map(|r| r.u).sum::<f64>() / n,
                mean_w: plan.records.iter().map(|r| r.w).sum::<f64>() / n,
                hard_indices: plan.hard.as_ref().map(|h| h.indices.clone()).unwrap_or_default(),
            };
            if let Some(w) = writer.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&record)?)?;
            }
            if !record.loss.is_finite() {
                if let Some(w) = writer.as_mut() {
                    w.flush()?;
                }
                return Err(Error::Divergence { step: record.step });
            }
            log.steps.push(record);

            losses.total.backward()?;
            opt.step(&mut params, &model.grads(), lr_for);
        }

        let steps = &log.steps[first_step..];
        let mean = |f: fn(&StepRecord) -> f64| steps.iter().map(f).sum::<f64>() / steps.len() as f64;
        let eval_dice = match eval_fn.as_mut() {
            Some(f) => Some(f(&params)?),
            None => None,
        };
        log.epochs.push(EpochSummary {
            epoch,
            steps: steps.len(),
            mean_loss: mean(|s| s.loss),
            mean_l_aur: mean(|s| s.l_aur),
            mean_l_hitl: mean(|s| s.l_hitl),
            mean_l_vlm: mean(|s| s.l_vlm),
            refine_passes: log.refine_passes - refine_before,
            eval_dice,
        });
        if let Some(dir) = out_dir {
            save_checkpoint(&params, &dir.join(format!("epoch_{epoch}.bcvl")))?;
            std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&log.epochs)? + "\n")?;
        }
    }
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    Ok(TrainOutcome { params, log })
}
