//! Seeded synthetic datasets with controlled concept, style and attribute
//! skew.

mod image;
mod manifest;
mod pgm;
mod render;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use self::image::{GrayImage, Mask};
pub use self::manifest::{
    generate_dataset, load_dataset, write_dataset, Dataset, DatasetManifest, ManifestEntry, Split,
    Vocabularies,
};
pub use self::pgm::{read_pgm, write_pgm};
pub use self::render::{rasterize, render_sample, render_with_geometry, ShapeGeometry};

pub const CONCEPTS: [&str; 5] = ["circle", "square", "triangle", "ring", "cross"];
pub const MODALITIES: [&str; 4] = ["plain", "noisy", "low-contrast", "textured"];
pub const ATTRIBUTES: [&str; 3] = ["dark", "mid", "bright"];

pub fn concept_id(name: &str) -> Option<usize> {
    CONCEPTS.iter().position(|&c| c == name)
}

pub fn modality_id(name: &str) -> Option<usize> {
    MODALITIES.iter().position(|&c| c == name)
}

pub fn attribute_id(name: &str) -> Option<usize> {
    ATTRIBUTES.iter().position(|&c| c == name)
}

/// Prevalence subgroup of a concept, by training sample count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Head,
    Medium,
    Tail,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Head, Group::Medium, Group::Tail];

    pub fn name(self) -> &'static str {
        match self {
            Group::Head => "head",
            Group::Medium => "medium",
            Group::Tail => "tail",
        }
    }
}

/// `count >= head` → head, `count < tail` → tail, otherwise medium.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupThresholds {
    pub head: usize,
    pub tail: usize,
}

impl Default for GroupThresholds {
    fn default() -> Self {
        Self { head: 200, tail: 60 }
    }
}

impl GroupThresholds {
    pub fn classify(&self, count: usize) -> Group {
        if count >= self.head {
            Group::Head
        } else if count < self.tail {
            Group::Tail
        } else {
            Group::Medium
        }
    }
}

/// Pure function of per-concept training counts and thresholds.
pub fn groups_from_counts(counts: &BTreeMap<usize, usize>, th: GroupThresholds) -> BTreeMap<usize, Group> {
    counts.iter().map(|(&c, &n)| (c, th.classify(n))).collect()
}

/// Groups concepts of a training manifest by their sample counts.
pub fn assign_prevalence_groups(train: &DatasetManifest, th: GroupThresholds) -> Result<BTreeMap<usize, Group>> {
    if train.split != Split::Train {
        return Err(Error::Contract("prevalence groups derive from the train split".into()));
    }
    if train.entries.is_empty() {
        return Err(Error::Contract("cannot group an empty manifest".into()));
    }
    let mut counts = BTreeMap::new();
    for e in &train.entries {
        *counts.entry(e.concept).or_insert(0) += 1;
    }
    Ok(groups_from_counts(&counts, th))
}

/// Skew of a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasProfile {
    /// Exact number of training samples per concept name.
    pub concept_quotas: BTreeMap<String, usize>,
    /// Sampling probability per modality name (missing names have weight 0).
    pub modality_weights: BTreeMap<String, f64>,
    /// Sampling probability per attribute name.
    pub attribute_weights: BTreeMap<String, f64>,
    /// `(H, W)`
    pub image_size: (usize, usize),
}

impl Default for BiasProfile {
    fn default() -> Self {
        let quotas = [("circle", 400), ("square", 150), ("ring", 50)];
        let modalities = [("plain", 0.5), ("noisy", 0.25), ("low-contrast", 0.15), ("textured", 0.1)];
        let attributes = [("dark", 0.6), ("mid", 0.3), ("bright", 0.1)];
        Self {
            concept_quotas: quotas.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            modality_weights: modalities.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            attribute_weights: attributes.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            image_size: (64, 64),
        }
    }
}

impl BiasProfile {
    pub fn validate(&self) -> Result<()> {
        if self.concept_quotas.is_empty() {
            return Err(Error::Config("profile has no concept quotas".into()));
        }
        for (name, &q) in &self.concept_quotas {
            if concept_id(name).is_none() {
                return Err(Error::Config(format!("unknown concept `{name}`")));
            }
            if q == 0 {
                return Err(Error::Config(format!("quota of concept `{name}` is 0")));
            }
        }
        check_weights("modality", &self.modality_weights, modality_id)?;
        check_weights("attribute", &self.attribute_weights, attribute_id)?;
        let (h, w) = self.image_size;
        if h < 16 || w < 16 {
            return Err(Error::Config(format!("image size {h}×{w} below 16×16")));
        }
        Ok(())
    }

    /// Quotas keyed by concept id, in vocabulary order.
    pub fn quotas_by_id(&self) -> BTreeMap<usize, usize> {
        self.concept_quotas
            .iter()
            .filter_map(|(n, &q)| concept_id(n).map(|id| (id, q)))
            .collect()
    }

    pub fn modality_weight_vec(&self) -> Vec<f64> {
        MODALITIES.iter().map(|m| self.modality_weights.get(*m).copied().unwrap_or(0.0)).collect()
    }

    pub fn attribute_weight_vec(&self) -> Vec<f64> {
        ATTRIBUTES.iter().map(|a| self.attribute_weights.get(*a).copied().unwrap_or(0.0)).collect()
    }
}

fn check_weights(kind: &str, w: &BTreeMap<String, f64>, lookup: fn(&str) -> Option<usize>) -> Result<()> {
    for (name, &v) in w {
        if lookup(name).is_none() {
            return Err(Error::Config(format!("unknown {kind} `{name}`")));
        }
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Config(format!("{kind} weight of `{name}` is {v}")));
        }
    }
    let total: f64 = w.values().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("{kind} weights sum to {total}, expected 1")));
    }
    Ok(())
}

/// One generated (or loaded) example.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub image: GrayImage,
    pub mask: Mask,
    pub concept_id: usize,
    pub modality_id: usize,
    pub attribute_id: usize,
    pub prevalence_group: Group,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_profile_is_valid_and_lands_one_concept_per_group() {
        let p = BiasProfile::default();
        p.validate().unwrap();
        let groups = groups_from_counts(&p.quotas_by_id(), GroupThresholds::default());
        let mut got: Vec<Group> = groups.values().copied().collect();
        got.sort();
        assert_eq!(got, vec![Group::Head, Group::Medium, Group::Tail]);
    }

    #[test]
    fn zero_quota_is_config_error() {
        let mut p = BiasProfile::default();
        p.concept_quotas.insert("circle".into(), 0);
        assert!(matches!(p.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn weights_must_sum_to_one() {
        let mut p = BiasProfile::default();
        p.modality_weights.insert("plain".into(), 0.6);
        assert!(matches!(p.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn thresholds_follow_counts() {
        let th = GroupThresholds::default();
        let counts: BTreeMap<usize, usize> = [(0, 400), (1, 150), (2, 50)].into_iter().collect();
        let g = groups_from_counts(&counts, th);
        assert_eq!(g[&0], Group::Head);
        assert_eq!(g[&1], Group::Medium);
        assert_eq!(g[&2], Group::Tail);

        let at_head: BTreeMap<usize, usize> = [(0, 200), (3, 200)].into_iter().collect();
        assert!(groups_from_counts(&at_head, th).values().all(|&g| g == Group::Head));

        assert_eq!(th.classify(60), Group::Medium);
        assert_eq!(th.classify(59), Group::Tail);
        let single: BTreeMap<usize, usize> = [(4, 1)].into_iter().collect();
        assert_eq!(groups_from_counts(&single, th).len(), 1);
    }
}
