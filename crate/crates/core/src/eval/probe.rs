use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Group};
use crate::error::{Error, Result};
use crate::model::{ModelParams, SegModel};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { iterations: 300, lr: 0.5, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub n: usize,
    /// Fraction of this group's test samples classified correctly.
    pub accuracy: f64,
    /// Mean of the per-class accuracies within the group.
    pub macro_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub overall_accuracy: f64,
    pub by_group: BTreeMap<String, GroupAccuracy>,
}

/// Global-average-pooled `z_img` (length `C`) per sample.
pub fn global_features<T: Scalar>(params: &ModelParams<T>, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let model = SegModel::new(params, false);
    data.samples
        .iter()
        .map(|s| {
            let z = model.encode_image(&s.image.to_tensor())?;
            let c = z.shape()[0];
            let plane = z.numel() / c;
            Ok(z.data()
                .chunks(plane)
                .map(|ch| ch.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / plane as f64)
                .collect())
        })
        .collect()
}

fn standardizer(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std = (0..d)
        .map(|j| {
            let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 1e-12 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

/// Multinomial logistic regression by full-batch gradient descent on
/// standardized frozen features. `class_groups` maps each class label to
/// its prevalence group.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    class_groups: &BTreeMap<usize, Group>,
    opts: ProbeOptions,
) -> Result<ProbeReport> {
    if train_x.len() != train_y.len() || test_x.len() != test_y.len() || train_x.is_empty() || test_x.is_empty() {
        return Err(Error::Contract("probe features and labels must be non-empty and aligned".into()));
    }
    let first = train_y[0];
    if train_y.iter().all(|&y| y == first) {
        return Err(Error::UndefinedMetric("linear probe needs at least two training classes".into()));
    }
    let d = train_x[0].len();
    if train_x.iter().chain(test_x).any(|r| r.len() != d) {
        return Err(Error::Contract("feature vectors differ in length".into()));
    }
    let k = train_y.iter().chain(test_y).max().copied().unwrap_or(0) + 1;
    let (mean, std) = standardizer(train_x);
    let norm = |r: &Vec<f64>| -> Vec<f64> { r.iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]).collect() };
    let xs: Vec<Vec<f64>> = train_x.iter().map(norm).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut w: Vec<f64> = (0..k * d).map(|_| rng.random_range(-0.01..0.01)).collect();
    let mut b = vec![0.0; k];
    let n = xs.len() as f64;
    let scores = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..k).map(|c| b[c] + (0..d).map(|j| w[c * d + j] * x[j]).sum::<f64>()).collect()
    };
    for _ in 0..opts.iterations {
        let mut gw = vec![0.0; k * d];
        let mut gb = vec![0.0; k];
        for (x, &y) in xs.iter().zip(train_y) {
            let s = scores(&w, &b, x);
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..k {
                let g = e[c] / z - (c == y) as u8 as f64;
                gb[c] += g;
                for j in 0..d {
                    gw[c * d + j] += g * x[j];
                }
            }
        }
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= opts.lr * g / n);
        b.iter_mut().zip(&gb).for_each(|(bi, g)| *bi -= opts.lr * g / n);
    }

    let mut correct_total = 0usize;
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (x, &y) in test_x.iter().zip(test_y) {
        let s = scores(&w, &b, &norm(x));
        let pred = (0..k).max_by(|&a, &c| s[a].total_cmp(&s[c]).then(c.cmp(&a))).unwrap_or(0);
        let e = per_class.entry(y).or_insert((0, 0));
        e.1 += 1;
        if pred == y {
            e.0 += 1;
            correct_total += 1;
        }
    }
    let mut by_group = BTreeMap::new();
    for g in Group::ALL {
        let classes: Vec<(usize, usize)> =
            per_class.iter().filter(|(c, _)| class_groups.get(c) == Some(&g)).map(|(_, &v)| v).collect();
        if classes.is_empty() {
            continue;
        }
        let n: usize = classes.iter().map(|c| c.1).sum();
        let correct: usize = classes.iter().map(|c| c.0).sum();
        let macro_accuracy = classes.iter().map(|&(ok, n)| ok as f64 / n as f64).sum::<f64>() / classes.len() as f64;
        by_group.insert(g.name().to_string(), GroupAccuracy { n, accuracy: correct as f64 / n as f64, macro_accuracy });
    }
    Ok(ProbeReport { overall_accuracy: correct_total as f64 / test_x.len() as f64, by_group })
}
