//! Bilevel optimization of support embeddings.
//!
//! The inner loop runs `T` full-batch gradient steps of a linear softmax head
//! on the support embeddings `H`. The outer objective is the adapted head's
//! mean cross-entropy on the hard set. [`meta_gradient`] differentiates that
//! objective with respect to `H` by walking the recorded inner iterates
//! backwards, using closed-form Hessian-vector and mixed second-derivative
//! products of softmax cross-entropy.
//!
//! [`hsfm_train`] alternates three phases per epoch: refresh the hard set
//! under the persistent head, take `K_H` meta steps on `H` (each unrolling
//! a fresh inner loop from the persistent head and discarding the adapted
//! copy), then advance the persistent head by `T` plain steps on `H`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurestore::{write_features, DatasetSplit, FeatureDataset};
use crate::hardset::{build_hard_set, hard_set_loss, HardSet};
use crate::linhead::{
    self, batch_loss_and_grads, clip_scale, dot, evaluate, gd_train, softmax_into, GdOptions,
    LinearHead,
};

/// Learnable support embeddings with fixed labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    embeddings: Array2<f64>,
    initial_embeddings: Array2<f64>,
    labels: Vec<usize>,
    source_rows: Vec<usize>,
    source_groups: Vec<usize>,
    class_count: usize,
    group_count: usize,
}

impl SupportSet {
    /// Support set whose embeddings start at `features`.
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        source_rows: Vec<usize>,
        source_groups: Vec<usize>,
        class_count: usize,
        group_count: usize,
    ) -> Result<Self> {
        let s = features.nrows();
        if s == 0 {
            return Err(Error::validation("support set must not be empty"));
        }
        if labels.len() != s || source_rows.len() != s || source_groups.len() != s {
            return Err(Error::shape(
                "support labels/provenance length differs from rows",
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::LabelIndex {
                label: y,
                classes: class_count,
            });
        }
        if source_groups.iter().any(|&g| g >= group_count) {
            return Err(Error::validation("support group id out of range"));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("support embeddings must be finite"));
        }
        Ok(Self {
            initial_embeddings: features.clone(),
            embeddings: features,
            labels,
            source_rows,
            source_groups,
            class_count,
            group_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn initial_embeddings(&self) -> &Array2<f64> {
        &self.initial_embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn source_rows(&self) -> &[usize] {
        &self.source_rows
    }

    pub fn source_groups(&self) -> &[usize] {
        &self.source_groups
    }

    /// Replace the learnable embeddings. Labels and provenance are fixed.
    pub fn set_embeddings(&mut self, h: Array2<f64>) -> Result<()> {
        if h.dim() != self.embeddings.dim() {
            return Err(Error::shape(format!(
                "embeddings must be {:?}, got {:?}",
                self.embeddings.dim(),
                h.dim()
            )));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("support embeddings must be finite"));
        }
        self.embeddings = h;
        Ok(())
    }

    /// L2 distance of each embedding from its initial value.
    pub fn row_displacements(&self) -> Vec<f64> {
        (&self.embeddings - &self.initial_embeddings)
            .axis_iter(Axis(0))
            .map(|r| dot(r, r).sqrt())
            .collect()
    }

    fn to_dataset(&self, h: &Array2<f64>) -> Result<FeatureDataset> {
        FeatureDataset::new(
            h.iter().map(|&v| v as f32).collect(),
            self.labels.clone(),
            self.source_groups.clone(),
            self.dim(),
            self.class_count,
            self.group_count,
        )
    }
}

/// Sample `per_class` training rows per class and use their features as the
/// initial support embeddings.
///
/// Classes smaller than `per_class` are sampled with replacement.
pub fn init_support(train: &FeatureDataset, per_class: usize, seed: u64) -> Result<SupportSet> {
    if per_class == 0 {
        return Err(Error::Config("support_per_class must be at least 1".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); train.class_count()];
    for (row, &y) in train.labels().iter().enumerate() {
        by_class[y].push(row);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(per_class * train.class_count());
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::validation(format!(
                "class {c} has no training examples to seed the support set"
            )));
        }
        if members.len() >= per_class {
            rows.extend(
                index::sample(&mut rng, members.len(), per_class)
                    .into_iter()
                    .map(|k| members[k]),
            );
        } else {
            log::warn!(
                "class {c} has {} training rows, fewer than {per_class}; sampling with replacement",
                members.len()
            );
            rows.extend((0..per_class).map(|_| members[rng.random_range(0..members.len())]));
        }
    }
    let sub = train.select(&rows);
    SupportSet::new(
        sub.features_f64(),
        sub.labels().to_vec(),
        rows,
        sub.groups().to_vec(),
        train.class_count(),
        train.group_count(),
    )
}

/// Inner-loop settings: `steps` plain gradient steps at rate `alpha`,
/// optionally with global-norm gradient clipping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerLoop {
    pub steps: usize,
    pub alpha: f64,
    pub clip_norm: Option<f64>,
}

impl InnerLoop {
    pub fn new(steps: usize, alpha: f64) -> Self {
        Self {
            steps,
            alpha,
            clip_norm: None,
        }
    }
}

/// Record of one inner adaptation.
#[derive(Debug, Clone)]
pub struct InnerTape {
    /// `T + 1` heads; `iterates[0]` is the starting head, `iterates[T]` the adapted one.
    pub iterates: Vec<LinearHead>,
    pub alpha: f64,
    pub clip_norm: Option<f64>,
    /// Support embeddings the loop ran on.
    pub support_embeddings: Array2<f64>,
}

impl InnerTape {
    pub fn steps(&self) -> usize {
        self.iterates.len() - 1
    }

    pub fn adapted(&self) -> &LinearHead {
        self.iterates
            .last()
            .expect("tape always holds the starting head")
    }

    /// Re-run the recurrence from `iterates[0]` and check every stored iterate
    /// is reproduced exactly.
    pub fn replays_exactly(&self, labels: &[usize]) -> bool {
        let mut head = self.iterates[0].clone();
        for next in &self.iterates[1..] {
            if linhead::gd_step(
                &mut head,
                self.support_embeddings.view(),
                labels,
                self.alpha,
                self.clip_norm,
                0.0,
            )
            .is_err()
                || &head != next
            {
                return false;
            }
        }
        true
    }
}

fn check_support_head(head: &LinearHead, sup: &SupportSet) -> Result<()> {
    head.check_input(sup.dim())?;
    if head.class_count() != sup.class_count() {
        return Err(Error::shape(format!(
            "head has {} classes, support set has {}",
            head.class_count(),
            sup.class_count()
        )));
    }
    Ok(())
}

/// Adapt `head` on the support embeddings for `inner.steps` steps, recording
/// every iterate.
pub fn inner_adapt(
    head: &LinearHead,
    sup: &SupportSet,
    inner: &InnerLoop,
) -> Result<(LinearHead, InnerTape)> {
    check_support_head(head, sup)?;
    let mut iterates = Vec::with_capacity(inner.steps + 1);
    iterates.push(head.clone());
    let mut cur = head.clone();
    for step in 0..inner.steps {
        let loss = linhead::gd_step(
            &mut cur,
            sup.embeddings.view(),
            &sup.labels,
            inner.alpha,
            inner.clip_norm,
            0.0,
        )?;
        if !loss.is_finite() || !cur.is_finite() {
            return Err(Error::Divergence {
                phase: "inner adaptation".into(),
                step,
            });
        }
        iterates.push(cur.clone());
    }
    Ok((
        cur,
        InnerTape {
            iterates,
            alpha: inner.alpha,
            clip_norm: inner.clip_norm,
            support_embeddings: sup.embeddings.clone(),
        },
    ))
}

/// How second-order terms are handled during the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaGradMode {
    /// Exact unrolled differentiation.
    Exact,
    /// Drop both second-derivative products. The outer loss only reaches `H`
    /// through them, so this always returns zero; kept for diagnostics.
    FirstOrder,
    /// Exact pass with the Hessian-vector product's sign flipped. Wrong on
    /// purpose: the gradient checker uses it to prove it can fail.
    HvpSignFlip,
}

/// Exact `dL_out/dH` for the unroll recorded in `tape`.
pub fn meta_gradient(tape: &InnerTape, sup: &SupportSet, hard: &HardSet) -> Result<Array2<f64>> {
    meta_gradient_with(tape, sup, hard, MetaGradMode::Exact)
}

pub fn meta_gradient_with(
    tape: &InnerTape,
    sup: &SupportSet,
    hard: &HardSet,
    mode: MetaGradMode,
) -> Result<Array2<f64>> {
    if tape.support_embeddings.dim() != sup.embeddings.dim() {
        return Err(Error::shape(
            "tape was recorded on a support set of a different shape",
        ));
    }
    if hard.is_empty() {
        return Err(Error::validation("hard set is empty"));
    }
    check_support_head(&tape.iterates[0], sup)?;
    tape.iterates[0].check_input(hard.features.ncols())?;

    let (s, dim) = sup.embeddings.dim();
    let mut grad_h = Array2::<f64>::zeros((s, dim));
    if tape.steps() == 0 || mode == MetaGradMode::FirstOrder {
        return Ok(grad_h);
    }

    // Adjoint of the outer loss with respect to the current head iterate.
    let outer = batch_loss_and_grads(tape.adapted(), hard.features.view(), &hard.labels)?;
    let mut adj_w = outer.d_weights;
    let mut adj_b = outer.d_bias;

    let h = &tape.support_embeddings;
    let labels = &sup.labels;
    let alpha = tape.alpha;
    let classes = adj_b.len();
    let inv_s = 1.0 / s as f64;
    let hvp_sign = if mode == MetaGradMode::HvpSignFlip {
        -1.0
    } else {
        1.0
    };

    let mut probs = Array2::<f64>::zeros((s, classes));
    let mut dprobs = Array2::<f64>::zeros((s, classes));
    let mut p = vec![0.0; classes];
    for t in (0..tape.steps()).rev() {
        let head = &tape.iterates[t];
        let w = &head.weights;

        // Softmax at iterate t and the inner gradient norm (for clipping).
        let mut g_w = Array2::<f64>::zeros((classes, dim));
        let mut g_b = Array1::<f64>::zeros(classes);
        for i in 0..s {
            let hi = h.row(i);
            let z: Vec<f64> = (0..classes)
                .map(|c| dot(w.row(c), hi) + head.bias[c])
                .collect();
            softmax_into(&z, &mut p);
            for c in 0..classes {
                probs[[i, c]] = p[c];
                let r = p[c] - if c == labels[i] { 1.0 } else { 0.0 };
                g_b[c] += r * inv_s;
                for j in 0..dim {
                    g_w[[c, j]] += r * hi[j] * inv_s;
                }
            }
        }

        // Pull the adjoint back through the clipping map g -> scale(g) * g.
        let (lam_w, lam_b) = match tape.clip_norm {
            Some(c) => {
                let norm = (g_w.iter().chain(g_b.iter()).map(|v| v * v).sum::<f64>()).sqrt();
                if clip_scale(norm, Some(c)) < 1.0 {
                    let proj = (g_w
                        .iter()
                        .zip(adj_w.iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        + dot(g_b.view(), adj_b.view()))
                        / (norm * norm);
                    let k = c / norm;
                    ((&adj_w - &(&g_w * proj)) * k, (&adj_b - &(&g_b * proj)) * k)
                } else {
                    (adj_w.clone(), adj_b.clone())
                }
            }
            None => (adj_w.clone(), adj_b.clone()),
        };

        // dp_i = J_i (Lam_W h_i + lam_b), J_i = diag(p_i) - p_i p_i^T.
        for i in 0..s {
            let hi = h.row(i);
            let pi = probs.row(i);
            let dz: Vec<f64> = (0..classes)
                .map(|c| dot(lam_w.row(c), hi) + lam_b[c])
                .collect();
            let mean = dot(pi, ArrayView1::from(&dz));
            for c in 0..classes {
                dprobs[[i, c]] = pi[c] * (dz[c] - mean);
            }
        }

        // Mixed term: grad_H[i] -= alpha/s * (Lam_W^T r_i + W_t^T dp_i).
        let step = -alpha * inv_s;
        for i in 0..s {
            for c in 0..classes {
                let r = probs[[i, c]] - if c == labels[i] { 1.0 } else { 0.0 };
                let dp = dprobs[[i, c]];
                for j in 0..dim {
                    grad_h[[i, j]] += step * (lam_w[[c, j]] * r + w[[c, j]] * dp);
                }
            }
        }

        // Adjoint at iterate t: (I - alpha * Hess) applied through the clip map.
        let coef = -alpha * inv_s * hvp_sign;
        for i in 0..s {
            let hi = h.row(i);
            for c in 0..classes {
                let dp = dprobs[[i, c]];
                adj_b[c] += coef * dp;
                for j in 0..dim {
                    adj_w[[c, j]] += coef * dp * hi[j];
                }
            }
        }
    }
    Ok(grad_h)
}

/// Central finite differences of the outer loss with respect to every entry
/// of `H`, re-running the whole inner loop per perturbation.
pub fn finite_diff_meta_gradient(
    head: &LinearHead,
    sup: &SupportSet,
    hard: &HardSet,
    inner: &InnerLoop,
    eps: f64,
) -> Result<Array2<f64>> {
    let outer_loss = |h: &Array2<f64>| -> Result<f64> {
        let mut probe = sup.clone();
        probe.embeddings = h.clone();
        let (adapted, _) = inner_adapt(head, &probe, inner)?;
        hard_set_loss(&adapted, hard)
    };
    let base = sup.embeddings.clone();
    let mut grad = Array2::zeros(base.dim());
    let mut work = base.clone();
    for ((i, j), g) in grad.indexed_iter_mut() {
        work[[i, j]] = base[[i, j]] + eps;
        let plus = outer_loss(&work)?;
        work[[i, j]] = base[[i, j]] - eps;
        let minus = outer_loss(&work)?;
        work[[i, j]] = base[[i, j]];
        *g = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OuterOptimizer {
    #[default]
    PlainGd,
    /// Adam with beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HsfmConfig {
    pub support_per_class: usize,
    /// Inner adaptation steps, also the number of ERM steps per epoch.
    #[serde(alias = "T")]
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    /// Meta steps per epoch (`K_H`).
    #[serde(alias = "K_H")]
    pub meta_steps: usize,
    /// Hard examples per class (`K_hard`).
    #[serde(alias = "K_hard")]
    pub k_hard: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub outer_optimizer: OuterOptimizer,
    #[serde(default)]
    pub first_order: bool,
}

impl HsfmConfig {
    /// Settings tuned for the synthetic waterbirds benchmark.
    ///
    /// Plain descent on H stalls on this benchmark: once a few support rows
    /// saturate, the raw meta-gradient is dominated by them and the rest of
    /// the set barely moves. The per-coordinate normalisation of the adaptive
    /// optimizer keeps every row moving. The small inner rate keeps the head's
    /// per-epoch movement proportional to T.
    pub fn synth_default() -> Self {
        Self {
            support_per_class: 16,
            inner_steps: 10,
            inner_lr: 2e-2,
            outer_lr: 3e-2,
            meta_steps: 10,
            k_hard: 32,
            epochs: 10,
            seed: 0,
            clip_norm: None,
            outer_optimizer: OuterOptimizer::Adaptive,
            first_order: false,
        }
    }

    /// Plain-descent settings with T = 10, alpha = 1e-2, eta = 1e-1,
    /// K_H = 10, K_hard = 32 and 20 epochs. Kept for comparison; they do not
    /// repair the synthetic benchmark.
    pub fn synth_plain() -> Self {
        Self {
            inner_lr: 1e-2,
            outer_lr: 1e-1,
            epochs: 20,
            outer_optimizer: OuterOptimizer::PlainGd,
            ..Self::synth_default()
        }
    }

    pub fn inner_loop(&self) -> InnerLoop {
        InnerLoop {
            steps: self.inner_steps,
            alpha: self.inner_lr,
            clip_norm: self.clip_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("support_per_class", self.support_per_class),
            ("inner_steps", self.inner_steps),
            ("k_hard", self.k_hard),
            ("epochs", self.epochs),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [("inner_lr", self.inner_lr), ("outer_lr", self.outer_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!(
                    "clip_norm must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

struct Adam {
    m: Array2<f64>,
    v: Array2<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(shape: (usize, usize)) -> Self {
        Self {
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            t: 0,
        }
    }

    fn direction(&mut self, grad: &Array2<f64>) -> Array2<f64> {
        self.t += 1;
        self.m
            .zip_mut_with(grad, |m, g| *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g);
        self.v.zip_mut_with(grad, |v, g| {
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g
        });
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let mut out = self.m.clone();
        out.zip_mut_with(&self.v, |m, v| {
            *m = (*m / c1) / ((v / c2).sqrt() + Self::EPS)
        });
        out
    }
}

/// Per-epoch training metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Outer loss of the adapted head before the first and after the last meta step.
    pub hard_loss_before: f64,
    pub hard_loss_after: f64,
    /// Hard-set loss of the persistent head at the start and end of the epoch.
    pub head_hard_loss_before: f64,
    pub head_hard_loss_after: f64,
    pub hard_set_size: usize,
    pub hard_group_counts: Vec<usize>,
    pub val_worst_group_accuracy: f64,
    pub val_average_accuracy: f64,
    pub mean_delta_h: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

impl TrainTrace {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct HsfmOutcome {
    pub head: LinearHead,
    pub support: SupportSet,
    pub trace: TrainTrace,
}

/// Run the alternating hard-set / meta-step / head-step procedure from `head0`.
pub fn hsfm_train(
    head0: &LinearHead,
    split: &DatasetSplit,
    cfg: &HsfmConfig,
) -> Result<HsfmOutcome> {
    let support = init_support(&split.train, cfg.support_per_class, cfg.seed)?;
    hsfm_train_from(head0, support, &split.val, cfg)
}

/// As [`hsfm_train`] but with a caller-supplied support set.
pub fn hsfm_train_from(
    head0: &LinearHead,
    mut support: SupportSet,
    val: &FeatureDataset,
    cfg: &HsfmConfig,
) -> Result<HsfmOutcome> {
    cfg.validate()?;
    check_support_head(head0, &support)?;
    let inner = cfg.inner_loop();
    let mode = if cfg.first_order {
        MetaGradMode::FirstOrder
    } else {
        MetaGradMode::Exact
    };
    let erm = GdOptions {
        steps: cfg.inner_steps,
        lr: cfg.inner_lr,
        clip_norm: cfg.clip_norm,
        weight_decay: 0.0,
    };
    let mut adam = Adam::new(support.embeddings.dim());
    let mut head = head0.clone();
    let mut trace = TrainTrace::default();

    for epoch in 0..cfg.epochs {
        let hard = build_hard_set(&head, val, cfg.k_hard)?;
        if hard.is_empty() {
            return Err(Error::validation(format!(
                "epoch {epoch}: hard set is empty"
            )));
        }
        let head_hard_loss_before = hard_set_loss(&head, &hard)?;
        let mut hard_loss_before = None;
        let mut delta_total = 0.0;

        for k in 0..cfg.meta_steps {
            let (adapted, tape) =
                inner_adapt(&head, &support, &inner).map_err(|e| phase_err(e, epoch, "meta"))?;
            if k == 0 {
                hard_loss_before = Some(hard_set_loss(&adapted, &hard)?);
            }
            let grad = meta_gradient_with(&tape, &support, &hard, mode)?;
            let step = match cfg.outer_optimizer {
                OuterOptimizer::PlainGd => grad * cfg.outer_lr,
                OuterOptimizer::Adaptive => adam.direction(&grad) * cfg.outer_lr,
            };
            support.embeddings -= &step;
            if support.embeddings.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    phase: format!("epoch {epoch} meta update"),
                    step: k,
                });
            }
            delta_total += dot_all(&step).sqrt();
        }

        let (adapted, _) =
            inner_adapt(&head, &support, &inner).map_err(|e| phase_err(e, epoch, "meta"))?;
        let hard_loss_after = hard_set_loss(&adapted, &hard)?;

        head = gd_train(
            &head,
            support.embeddings.view(),
            &support.labels,
            &erm,
            &format!("epoch {epoch} head update"),
        )?;

        let report = evaluate(&head, val)?;
        let mut hard_group_counts = vec![0; val.group_count()];
        for &r in &hard.source_rows {
            hard_group_counts[val.groups()[r]] += 1;
        }
        let record = EpochRecord {
            epoch,
            hard_loss_before: hard_loss_before.unwrap_or(hard_loss_after),
            hard_loss_after,
            head_hard_loss_before,
            head_hard_loss_after: hard_set_loss(&head, &hard)?,
            hard_set_size: hard.len(),
            hard_group_counts,
            val_worst_group_accuracy: report.worst_group_accuracy,
            val_average_accuracy: report.average_accuracy,
            mean_delta_h: if cfg.meta_steps > 0 {
                delta_total / cfg.meta_steps as f64
            } else {
                0.0
            },
        };
        log::debug!(
            "epoch {epoch}: L_out {:.4} -> {:.4}, val WGA {:.3}, avg {:.3}",
            record.hard_loss_before,
            record.hard_loss_after,
            record.val_worst_group_accuracy,
            record.val_average_accuracy
        );
        trace.epochs.push(record);
    }
    Ok(HsfmOutcome {
        head,
        support,
        trace,
    })
}

fn dot_all(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

fn phase_err(e: Error, epoch: usize, phase: &str) -> Error {
    match e {
        Error::Divergence { phase: p, step } => Error::Divergence {
            phase: format!("epoch {epoch} {phase} ({p})"),
            step,
        },
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Balance {
    ByGroup,
    ByClass,
}

/// Rows of `val` subsampled to equal counts per group (or class), sorted.
pub fn balanced_subset(val: &FeatureDataset, balance: Balance, seed: u64) -> Result<Vec<usize>> {
    if val.is_empty() {
        return Err(Error::validation("validation set is empty"));
    }
    let (keys, buckets): (&[usize], usize) = match balance {
        Balance::ByGroup => {
            if val.group_count() < 2 {
                return Err(Error::validation(
                    "group-balanced retraining needs group annotations (G > 1)",
                ));
            }
            (val.groups(), val.group_count())
        }
        Balance::ByClass => (val.labels(), val.class_count()),
    };
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); buckets];
    for (row, &k) in keys.iter().enumerate() {
        members[k].push(row);
    }
    if let Some(empty) = members.iter().position(Vec::is_empty) {
        let what = if balance == Balance::ByGroup {
            "group"
        } else {
            "class"
        };
        return Err(Error::validation(format!(
            "{what} {empty} has no validation examples"
        )));
    }
    let target = members.iter().map(Vec::len).min().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(target * buckets);
    for m in &members {
        rows.extend(
            index::sample(&mut rng, m.len(), target)
                .into_iter()
                .map(|k| m[k]),
        );
    }
    rows.sort_unstable();
    Ok(rows)
}

/// Retrain a head on a balanced subsample of the validation set.
pub fn dfr_baseline(
    head0: &LinearHead,
    val: &FeatureDataset,
    opts: &GdOptions,
    balance: Balance,
    seed: u64,
) -> Result<LinearHead> {
    let rows = balanced_subset(val, balance, seed)?;
    linhead::erm_train(head0, &val.select(&rows), opts)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Paths `export_support` writes for a given prefix: `(<prefix>.init, <prefix>.opt)`.
pub fn support_export_paths(path: &Path) -> (PathBuf, PathBuf) {
    (with_suffix(path, ".init"), with_suffix(path, ".opt"))
}

/// Write initial and optimized embeddings as two HSFM-FS files.
pub fn export_support(sup: &SupportSet, path: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let (init_path, opt_path) = support_export_paths(path.as_ref());
    write_features(&init_path, &sup.to_dataset(&sup.initial_embeddings)?)?;
    write_features(&opt_path, &sup.to_dataset(&sup.embeddings)?)?;
    Ok((init_path, opt_path))
}

/// Mean embedding displacement per class.
pub fn class_displacements(sup: &SupportSet) -> Vec<f64> {
    let mut total = vec![0.0; sup.class_count];
    let mut count = vec![0usize; sup.class_count];
    for (d, &y) in sup.row_displacements().iter().zip(&sup.labels) {
        total[y] += d;
        count[y] += 1;
    }
    total
        .iter()
        .zip(&count)
        .map(|(t, &c)| if c > 0 { t / c as f64 } else { 0.0 })
        .collect()
}
