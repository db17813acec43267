use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Mask;
use super::pgm::{decode_pgm, encode_pgm};
use super::render::render_sample;
use super::{groups_from_counts, BiasProfile, Group, GroupThresholds, SampleRecord, ATTRIBUTES, CONCEPTS, MODALITIES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub concepts: Vec<String>,
    pub modalities: Vec<String>,
    pub attributes: Vec<String>,
}

impl Default for Vocabularies {
    fn default() -> Self {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Self { concepts: own(&CONCEPTS), modalities: own(&MODALITIES), attributes: own(&ATTRIBUTES) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub concept: usize,
    pub modality: usize,
    pub attribute: usize,
    /// Path relative to the manifest's directory.
    pub image: String,
    pub mask: String,
    pub image_crc32: u32,
    pub mask_crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub seed: u64,
    pub profile: BiasProfile,
    pub vocabularies: Vocabularies,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn concept_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.concept).or_insert(0) += 1;
        }
        counts
    }
}

/// A manifest together with its decoded samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SampleRecord>,
}

impl Dataset {
    /// Concept → group map. Always derived from the training quotas recorded
    /// in the profile, so train and test splits agree.
    pub fn group_map(&self, th: GroupThresholds) -> BTreeMap<usize, Group> {
        groups_from_counts(&self.manifest.profile.quotas_by_id(), th)
    }

    pub fn regroup(&mut self, th: GroupThresholds) {
        let groups = self.group_map(th);
        for s in &mut self.samples {
            s.prevalence_group = groups[&s.concept_id];
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.samples.iter().find(|s| s.id == id)
    }
}

fn split_rng(seed: u64, split: Split) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match split {
        Split::Train => 1,
        Split::Test => 2,
    });
    rng
}

fn sample_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(match split {
        Split::Train => 3,
        Split::Test => 4,
    });
    rng
}

/// Builds the train/test pair in memory. Train counts equal the quotas
/// exactly (the concept list is shuffled, not sampled); modality and
/// attribute are drawn from the profile's weights. The test split holds
/// `n_test_per_concept` samples per concept with modality and attribute
/// cycled so every cell is evenly populated.
pub fn generate_dataset(profile: &BiasProfile, seed: u64, n_test_per_concept: usize) -> Result<(Dataset, Dataset)> {
    profile.validate()?;
    let size = profile.image_size;
    let quotas = profile.quotas_by_id();
    let groups = groups_from_counts(&quotas, GroupThresholds::default());

    let mut rng = split_rng(seed, Split::Train);
    let mut concepts: Vec<usize> = quotas.iter().flat_map(|(&c, &q)| std::iter::repeat_n(c, q)).collect();
    concepts.shuffle(&mut rng);
    let modality_dist = WeightedIndex::new(profile.modality_weight_vec())
        .map_err(|e| Error::Config(format!("modality weights: {e}")))?;
    let attribute_dist = WeightedIndex::new(profile.attribute_weight_vec())
        .map_err(|e| Error::Config(format!("attribute weights: {e}")))?;
    let train_tags: Vec<(usize, usize, usize)> = concepts
        .into_iter()
        .map(|c| (c, modality_dist.sample(&mut rng), attribute_dist.sample(&mut rng)))
        .collect();

    let mut test_tags = Vec::new();
    for &c in quotas.keys() {
        for j in 0..n_test_per_concept {
            test_tags.push((c, j % MODALITIES.len(), j % ATTRIBUTES.len()));
        }
    }

    let build = |split: Split, tags: Vec<(usize, usize, usize)>| -> Result<Dataset> {
        let mut entries = Vec::with_capacity(tags.len());
        let mut samples = Vec::with_capacity(tags.len());
        for (i, (c, m, a)) in tags.into_iter().enumerate() {
            let id = format!("{}_{i:05}", split.name());
            let (image, mask) = render_sample(c, m, a, &mut sample_rng(seed, split, i), size)?;
            let image_path = format!("images/{id}.pgm");
            let mask_path = format!("masks/{id}.pgm");
            entries.push(ManifestEntry {
                id: id.clone(),
                concept: c,
                modality: m,
                attribute: a,
                image_crc32: crc32fast::hash(&encode_pgm(&image)),
                mask_crc32: crc32fast::hash(&encode_pgm(&mask_to_image(&mask))),
                image: image_path,
                mask: mask_path,
            });
            samples.push(SampleRecord {
                id,
                image,
                mask,
                concept_id: c,
                modality_id: m,
                attribute_id: a,
                prevalence_group: groups[&c],
            });
        }
        let manifest = DatasetManifest {
            split,
            seed,
            profile: profile.clone(),
            vocabularies: Vocabularies::default(),
            entries,
        };
        Ok(Dataset { manifest, samples })
    };
    Ok((build(Split::Train, train_tags)?, build(Split::Test, test_tags)?))
}

fn mask_to_image(mask: &Mask) -> super::GrayImage {
    super::GrayImage {
        height: mask.height,
        width: mask.width,
        pixels: mask.bits.iter().map(|&b| if b != 0 { 255 } else { 0 }).collect(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| Error::DatasetWrite { path: parent.to_path_buf(), source })?;
    }
    std::fs::write(path, bytes).map_err(|source| Error::DatasetWrite { path: path.to_path_buf(), source })
}

/// Writes `<dir>/manifest.json` plus `images/` and `masks/`. Returns the
/// manifest path.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    for (entry, sample) in ds.manifest.entries.iter().zip(&ds.samples) {
        write_file(&dir.join(&entry.image), &encode_pgm(&sample.image))?;
        write_file(&dir.join(&entry.mask), &encode_pgm(&mask_to_image(&sample.mask)))?;
    }
    let path = dir.join("manifest.json");
    let mut json = serde_json::to_vec_pretty(&ds.manifest)?;
    json.push(b'\n');
    write_file(&path, &json)?;
    Ok(path)
}

fn read_checked(path: &Path, crc: u32) -> Result<super::GrayImage> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::DatasetRead { path: path.to_path_buf(), reason: e.to_string() })?;
    let actual = crc32fast::hash(&bytes);
    if actual != crc {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
            reason: format!("CRC32 {actual:08x} != manifest {crc:08x}"),
        });
    }
    decode_pgm(&bytes, path)
}

/// Loads a manifest and every referenced file, verifying checksums.
/// Prevalence groups come from the profile's training quotas with default
/// thresholds; use [`Dataset::regroup`] for others.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::DatasetRead { path: manifest_path.to_path_buf(), reason: e.to_string() })?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::DatasetRead {
        path: manifest_path.to_path_buf(),
        reason: format!("invalid manifest: {e}"),
    })?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let groups = groups_from_counts(&manifest.profile.quotas_by_id(), GroupThresholds::default());
    let mut samples = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let image = read_checked(&dir.join(&e.image), e.image_crc32)?;
        let mask_path = dir.join(&e.mask);
        let mask_img = read_checked(&mask_path, e.mask_crc32)?;
        if mask_img.pixels.iter().any(|&p| p != 0 && p != 255) {
            return Err(Error::Corruption { path: mask_path, reason: "mask is not binary".into() });
        }
        let mask = Mask::new(mask_img.height, mask_img.width, mask_img.pixels)?;
        let group = *groups.get(&e.concept).ok_or_else(|| Error::DatasetRead {
            path: manifest_path.to_path_buf(),
            reason: format!("entry {} has concept {} without a quota", e.id, e.concept),
        })?;
        samples.push(SampleRecord {
            id: e.id.clone(),
            image,
            mask,
            concept_id: e.concept,
            modality_id: e.modality,
            attribute_id: e.attribute,
            prevalence_group: group,
        });
    }
    Ok(Dataset { manifest, samples })
}
