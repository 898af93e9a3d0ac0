//! Hard set: the highest-loss validation examples of each class.

use std::cmp::Ordering;

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::featurestore::FeatureDataset;
use crate::linhead::{self, LinearHead};

#[derive(Debug, Clone, PartialEq)]
pub struct HardSet {
    /// Frozen validation embeddings, `m x d`.
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    /// Row indices into the validation dataset.
    pub source_rows: Vec<usize>,
    pub losses_at_selection: Vec<f64>,
}

/// JSON dump of a hard set for inspection.
#[derive(Debug, Serialize)]
pub struct HardSetSummary<'a> {
    pub source_rows: &'a [usize],
    pub labels: &'a [usize],
    pub losses: &'a [f64],
    pub groups: Vec<usize>,
}

impl HardSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn summary<'a>(&'a self, val: &FeatureDataset) -> HardSetSummary<'a> {
        HardSetSummary {
            source_rows: &self.source_rows,
            labels: &self.labels,
            losses: &self.losses_at_selection,
            groups: self.source_rows.iter().map(|&r| val.groups()[r]).collect(),
        }
    }
}

/// Order for hard-set selection: larger loss first, then lower row index.
fn hardness_order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Rank `losses` per class and keep the first `k_hard` of each class.
///
/// Returns selected rows, classes concatenated in ascending order.
pub fn select_hard_rows(
    losses: &[f64],
    labels: &[usize],
    classes: usize,
    k_hard: usize,
) -> Vec<usize> {
    let mut by_class: Vec<Vec<(usize, f64)>> = vec![Vec::new(); classes];
    for (row, (&y, &l)) in labels.iter().zip(losses).enumerate() {
        by_class[y].push((row, l));
    }
    let mut rows = Vec::new();
    for (c, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            log::warn!(
                "class {c} has no validation examples; it contributes nothing to the hard set"
            );
            continue;
        }
        members.sort_by(|a, b| hardness_order(*a, *b));
        rows.extend(members.into_iter().take(k_hard).map(|(r, _)| r));
    }
    rows
}

pub fn build_hard_set(head: &LinearHead, val: &FeatureDataset, k_hard: usize) -> Result<HardSet> {
    if k_hard == 0 {
        return Err(Error::Config("k_hard must be at least 1".into()));
    }
    if val.is_empty() {
        return Err(Error::validation("validation set is empty"));
    }
    let features = val.features_f64();
    let (_, losses) = linhead::probs_and_losses(head, features.view(), val.labels())?;
    Ok(hard_set_from_losses(
        &features,
        val.labels(),
        &losses,
        val.class_count(),
        k_hard,
    ))
}

pub(crate) fn hard_set_from_losses(
    features: &Array2<f64>,
    labels: &[usize],
    losses: &[f64],
    classes: usize,
    k_hard: usize,
) -> HardSet {
    let rows = select_hard_rows(losses, labels, classes, k_hard);
    let sel = features.select(ndarray::Axis(0), &rows);
    HardSet {
        features: sel,
        labels: rows.iter().map(|&r| labels[r]).collect(),
        losses_at_selection: rows.iter().map(|&r| losses[r]).collect(),
        source_rows: rows,
    }
}

/// Mean cross-entropy of `head` on the hard set.
pub fn hard_set_loss(head: &LinearHead, q: &HardSet) -> Result<f64> {
    if q.is_empty() {
        return Err(Error::validation("hard set is empty"));
    }
    let (_, losses) = linhead::probs_and_losses(head, q.features.view(), &q.labels)?;
    Ok(losses.iter().sum::<f64>() / q.len() as f64)
}
