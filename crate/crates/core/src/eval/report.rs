use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Prediction;
use crate::data::{Dataset, Group, ATTRIBUTES, MODALITIES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub n: usize,
    pub dice: f64,
    pub iou: f64,
}

/// `max − min` of cell mean Dice within each stratification.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Gaps {
    pub group: f64,
    pub modality: f64,
    pub attribute: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StratifiedReport {
    pub overall: Cell,
    pub by_group: BTreeMap<String, Cell>,
    pub by_modality: BTreeMap<String, Cell>,
    pub by_attribute: BTreeMap<String, Cell>,
    pub gaps: Gaps,
}

#[derive(Default)]
struct Acc {
    n: usize,
    dice: f64,
    iou: f64,
}

impl Acc {
    fn add(&mut self, p: &Prediction) {
        self.n += 1;
        self.dice += p.dice;
        self.iou += p.iou;
    }

    fn cell(&self) -> Cell {
        let n = self.n.max(1) as f64;
        Cell { n: self.n, dice: self.dice / n, iou: self.iou / n }
    }
}

fn cells(acc: BTreeMap<String, Acc>) -> BTreeMap<String, Cell> {
    acc.into_iter().map(|(k, a)| (k, a.cell())).collect()
}

fn gap(cells: &BTreeMap<String, Cell>) -> f64 {
    let it = cells.values().map(|c| c.dice);
    let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
    let min = it.fold(f64::INFINITY, f64::min);
    if cells.is_empty() {
        0.0
    } else {
        max - min
    }
}

/// Aggregates per-sample predictions of `data` into overall, prevalence-group,
/// modality and attribute cells.
pub fn stratified_report(preds: &[Prediction], data: &Dataset, groups: &BTreeMap<usize, Group>) -> Result<StratifiedReport> {
    let by_id: BTreeMap<&str, &Prediction> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    let (mut overall, mut g, mut m, mut a) = (Acc::default(), BTreeMap::new(), BTreeMap::new(), BTreeMap::new());
    for s in &data.samples {
        let p = by_id
            .get(s.id.as_str())
            .ok_or_else(|| Error::Contract(format!("no prediction for sample `{}`", s.id)))?;
        let group = groups
            .get(&s.concept_id)
            .ok_or_else(|| Error::Contract(format!("concept #{} has no prevalence group", s.concept_id)))?;
        overall.add(p);
        g.entry(group.name().to_string()).or_insert_with(Acc::default).add(p);
        m.entry(MODALITIES[s.modality_id].to_string()).or_insert_with(Acc::default).add(p);
        a.entry(ATTRIBUTES[s.attribute_id].to_string()).or_insert_with(Acc::default).add(p);
    }
    let (by_group, by_modality, by_attribute) = (cells(g), cells(m), cells(a));
    let gaps = Gaps { group: gap(&by_group), modality: gap(&by_modality), attribute: gap(&by_attribute) };
    Ok(StratifiedReport { overall: overall.cell(), by_group, by_modality, by_attribute, gaps })
}

impl StratifiedReport {
    pub fn group_dice(&self, g: Group) -> Option<f64> {
        self.by_group.get(g.name()).map(|c| c.dice)
    }

    /// Rows `stratification,cell,n,dice,iou`, starting with the overall cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stratification,cell,n,dice,iou\n");
        let mut row = |s: &str, k: &str, c: &Cell| out.push_str(&format!("{s},{k},{},{:.6},{:.6}\n", c.n, c.dice, c.iou));
        row("overall", "all", &self.overall);
        for (name, map) in [("group", &self.by_group), ("modality", &self.by_modality), ("attribute", &self.by_attribute)] {
            for (k, c) in map {
                row(name, k, c);
            }
        }
        out
    }
}
