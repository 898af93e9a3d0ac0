//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use hsfm::{FeatureDataset, LinearHead};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// HSFM-FS bytes built field by field, straight from the layout: magic,
/// version, n, d, C, G as u32 LE, 8 zero bytes, then f32 features, u32
/// labels and u32 groups, all little-endian.
pub fn oracle_bytes(ds: &FeatureDataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"HSFM");
    for v in [1, ds.len(), ds.dim(), ds.class_count(), ds.group_count()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&[0u8; 8]);
    for i in 0..ds.len() {
        for x in ds.row(i) {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for &y in ds.labels() {
        out.extend_from_slice(&(y as u32).to_le_bytes());
    }
    for &g in ds.groups() {
        out.extend_from_slice(&(g as u32).to_le_bytes());
    }
    out
}

/// Random dataset; with `coarse` the features are drawn from {-1, 0, 1} so
/// many rows coincide exactly.
pub fn random_dataset(
    rng: &mut ChaCha8Rng,
    n: usize,
    d: usize,
    c: usize,
    g: usize,
    coarse: bool,
) -> FeatureDataset {
    let features: Vec<f32> = (0..n * d)
        .map(|_| {
            if coarse {
                rng.random_range(-1i32..=1) as f32
            } else {
                rng.sample::<f64, _>(StandardNormal) as f32
            }
        })
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
    let groups = (0..n).map(|_| rng.random_range(0..g)).collect();
    FeatureDataset::new(features, labels, groups, d, c, g).unwrap()
}

pub fn random_head(rng: &mut ChaCha8Rng, c: usize, d: usize, scale: f64) -> LinearHead {
    LinearHead::new(
        Array2::from_shape_simple_fn((c, d), || scale * rng.sample::<f64, _>(StandardNormal)),
        Array1::from_shape_simple_fn(c, || scale * rng.sample::<f64, _>(StandardNormal)),
    )
    .unwrap()
}

/// Cross-entropy computed the textbook way, without the max shift. Fine for
/// the moderate logits the tests use.
pub fn naive_loss(head: &LinearHead, h: &[f32], y: usize) -> f64 {
    let z: Vec<f64> = (0..head.class_count())
        .map(|c| {
            head.bias[c]
                + (0..head.dim())
                    .map(|j| head.weights[[c, j]] * h[j] as f64)
                    .sum::<f64>()
        })
        .collect();
    z.iter().map(|v| v.exp()).sum::<f64>().ln() - z[y]
}

/// Per-class top-k selection by repeatedly extracting the maximum (ties to
/// the lowest row), classes concatenated in ascending order.
pub fn oracle_hard_rows(head: &LinearHead, val: &FeatureDataset, k: usize) -> Vec<usize> {
    let losses: Vec<f64> = (0..val.len())
        .map(|i| naive_loss(head, val.row(i), val.labels()[i]))
        .collect();
    let mut out = Vec::new();
    for c in 0..val.class_count() {
        let mut taken = vec![false; val.len()];
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for i in 0..val.len() {
                if val.labels()[i] != c || taken[i] {
                    continue;
                }
                // Strict comparison keeps the earliest row on ties.
                if best.is_none_or(|b| losses[i] > losses[b]) {
                    best = Some(i);
                }
            }
            match best {
                Some(b) => {
                    taken[b] = true;
                    out.push(b);
                }
                None => break,
            }
        }
    }
    out
}

/// True when some class has two selected-or-candidate rows with bitwise-equal
/// loss, i.e. the instance actually exercises tie-breaking.
pub fn has_ties(head: &LinearHead, val: &FeatureDataset) -> bool {
    let mut seen = std::collections::HashSet::new();
    (0..val.len()).any(|i| {
        !seen.insert((
            val.labels()[i],
            naive_loss(head, val.row(i), val.labels()[i]).to_bits(),
        ))
    })
}
