use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{predict_dataset, stratified_report, StratifiedReport};
use crate::data::{Dataset, Group};
use crate::error::{Error, Result};
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Weighting,
    Hitl,
    Full,
    /// The full variant evaluated with one oracle corrective click.
    FullClick,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Baseline, Variant::Weighting, Variant::Hitl, Variant::Full, Variant::FullClick];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Weighting => "weighting",
            Variant::Hitl => "hitl",
            Variant::Full => "full",
            Variant::FullClick => "full+click",
        }
    }

    /// `(uncertainty_weighting, hitl)`
    fn flags(self) -> (bool, bool) {
        match self {
            Variant::Baseline => (false, false),
            Variant::Weighting => (true, false),
            Variant::Hitl => (false, true),
            Variant::Full | Variant::FullClick => (true, true),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    /// One report per seed.
    pub reports: Vec<StratifiedReport>,
    /// Loss of the first step and mean loss of the last epoch, per seed.
    pub first_loss: Vec<f64>,
    pub final_epoch_loss: Vec<f64>,
    pub overall_dice: f64,
    pub overall_iou: f64,
    /// Seed-averaged `(dice, iou)` per prevalence group.
    pub groups: BTreeMap<String, (f64, f64)>,
    /// Seed-averaged head Dice minus tail Dice.
    pub head_tail_gap: f64,
    pub modality_gap: f64,
    pub attribute_gap: f64,
    pub error: Option<String>,
}

impl AblationRow {
    pub fn group_dice(&self, g: Group) -> Option<f64> {
        self.groups.get(g.name()).map(|v| v.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "variant,overall_dice,overall_iou,head_dice,head_iou,medium_dice,medium_iou,tail_dice,tail_iou,head_tail_gap,modality_gap,attribute_gap,error\n",
        );
        for r in &self.rows {
            let g = |name: &str| r.groups.get(name).map(|v| (format!("{:.6}", v.0), format!("{:.6}", v.1))).unwrap_or_default();
            let (hd, hi) = g("head");
            let (md, mi) = g("medium");
            let (td, ti) = g("tail");
            out.push_str(&format!(
                "{},{:.6},{:.6},{hd},{hi},{md},{mi},{td},{ti},{:.6},{:.6},{:.6},{}\n",
                r.variant.name(),
                r.overall_dice,
                r.overall_iou,
                r.head_tail_gap,
                r.modality_gap,
                r.attribute_gap,
                r.error.as_deref().unwrap_or("").replace(',', ";"),
            ));
        }
        out
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn summarize(variant: Variant, seeds: &[u64], reports: Vec<StratifiedReport>, losses: Vec<(f64, f64)>) -> AblationRow {
    let mut groups = BTreeMap::new();
    for g in Group::ALL {
        let cells: Vec<_> = reports.iter().filter_map(|r| r.by_group.get(g.name())).collect();
        if !cells.is_empty() {
            groups.insert(g.name().to_string(), (mean(cells.iter().map(|c| c.dice)), mean(cells.iter().map(|c| c.iou))));
        }
    }
    let gd = |g: &str| groups.get(g).map(|v: &(f64, f64)| v.0);
    let head_tail_gap = match (gd("head"), gd("tail")) {
        (Some(h), Some(t)) => h - t,
        _ => 0.0,
    };
    AblationRow {
        variant,
        seeds: seeds.to_vec(),
        first_loss: losses.iter().map(|l| l.0).collect(),
        final_epoch_loss: losses.iter().map(|l| l.1).collect(),
        overall_dice: mean(reports.iter().map(|r| r.overall.dice)),
        overall_iou: mean(reports.iter().map(|r| r.overall.iou)),
        head_tail_gap,
        modality_gap: mean(reports.iter().map(|r| r.gaps.modality)),
        attribute_gap: mean(reports.iter().map(|r| r.gaps.attribute)),
        groups,
        reports,
        error: None,
    }
}

fn failed(variant: Variant, seeds: &[u64], e: &Error) -> AblationRow {
    AblationRow {
        variant,
        seeds: seeds.to_vec(),
        reports: Vec::new(),
        first_loss: Vec::new(),
        final_epoch_loss: Vec::new(),
        overall_dice: f64::NAN,
        overall_iou: f64::NAN,
        groups: BTreeMap::new(),
        head_tail_gap: f64::NAN,
        modality_gap: f64::NAN,
        attribute_gap: f64::NAN,
        error: Some(e.to_string()),
    }
}

/// Trains baseline, +weighting, +hitl and full for every seed (the `seed`
/// field of `base` is replaced) and evaluates each on `test`; the full
/// models are evaluated a second time with one oracle click. A failing
/// variant yields a row carrying its error.
pub fn ablation_run(
    base: &TrainConfig,
    train_set: &Dataset,
    test: &Dataset,
    groups: &BTreeMap<usize, Group>,
    seeds: &[u64],
    mut progress: impl FnMut(Variant, u64),
) -> Result<AblationTable> {
    if seeds.len() < 2 {
        return Err(Error::Config(format!("ablation needs at least 2 seeds, got {}", seeds.len())));
    }
    let mut rows = Vec::new();
    for variant in [Variant::Baseline, Variant::Weighting, Variant::Hitl, Variant::Full] {
        let (uw, hitl) = variant.flags();
        let mut run = || -> Result<(Vec<StratifiedReport>, Vec<StratifiedReport>, Vec<(f64, f64)>)> {
            let (mut plain, mut clicked, mut losses) = (Vec::new(), Vec::new(), Vec::new());
            for &seed in seeds {
                progress(variant, seed);
                let mut cfg = base.clone();
                cfg.seed = seed;
                cfg.flags.uncertainty_weighting = uw;
                cfg.flags.hitl = hitl;
                let out = train::<f32>(&cfg, train_set, None, None)?;
                let first = out.log.steps.first().map(|s| s.loss).unwrap_or(f64::NAN);
                let last = out.log.epochs.last().map(|e| e.mean_loss).unwrap_or(f64::NAN);
                losses.push((first, last));
                plain.push(stratified_report(&predict_dataset(&out.params, test, 0, seed)?, test, groups)?);
                if variant == Variant::Full {
                    clicked.push(stratified_report(&predict_dataset(&out.params, test, 1, seed)?, test, groups)?);
                }
            }
            Ok((plain, clicked, losses))
        };
        match run() {
            Ok((plain, clicked, losses)) => {
                rows.push(summarize(variant, seeds, plain, losses.clone()));
                if variant == Variant::Full {
                    rows.push(summarize(Variant::FullClick, seeds, clicked, losses));
                }
            }
            Err(e) => {
                rows.push(failed(variant, seeds, &e));
                if variant == Variant::Full {
                    rows.push(failed(Variant::FullClick, seeds, &e));
                }
            }
        }
    }
    Ok(AblationTable { rows })
}
