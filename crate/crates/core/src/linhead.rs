//! Linear softmax head over frozen features.
//!
//! All arithmetic runs in f64 with a fixed sequential reduction order, so
//! results are bit-identical from run to run regardless of thread count.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurestore::FeatureDataset;

pub const HEAD_MAGIC: [u8; 4] = *b"HSFH";
pub const HEAD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// `C x d` logit weights.
    pub weights: Array2<f64>,
    /// Length-`C` logit bias.
    pub bias: Array1<f64>,
}

impl LinearHead {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::shape(format!(
                "weights have {} rows but bias has {} entries",
                weights.nrows(),
                bias.len()
            )));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::validation("head parameters must be finite"));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(class_count: usize, dim: usize) -> Self {
        Self {
            weights: Array2::zeros((class_count, dim)),
            bias: Array1::zeros(class_count),
        }
    }

    pub fn class_count(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(self.bias.iter())
            .all(|v| v.is_finite())
    }

    pub(crate) fn check_input(&self, dim: usize) -> Result<()> {
        if dim != self.dim() {
            return Err(Error::shape(format!(
                "head expects dimension {}, input has {dim}",
                self.dim()
            )));
        }
        Ok(())
    }

    /// `W h + b`.
    pub fn logits(&self, h: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.check_input(h.len())?;
        Ok(Array1::from_shape_fn(self.class_count(), |c| {
            dot(self.weights.row(c), h) + self.bias[c]
        }))
    }

    /// Logits for every row of `features`, `n x C`.
    pub fn batch_logits(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(features.ncols())?;
        Ok(Array2::from_shape_fn(
            (features.nrows(), self.class_count()),
            |(i, c)| dot(self.weights.row(c), features.row(i)) + self.bias[c],
        ))
    }

    /// Serialize as an HSFH checkpoint: magic, version, C, d (u32 LE), then
    /// W row-major and b as f32 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (c, d) = self.weights.dim();
        let mut out = Vec::with_capacity(16 + 4 * (c * d + c));
        out.extend_from_slice(&HEAD_MAGIC);
        for v in [HEAD_VERSION, c as u32, d as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.weights.iter().chain(self.bias.iter()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || bytes[0..4] != HEAD_MAGIC {
            let mut found = [0u8; 4];
            let k = bytes.len().min(4);
            found[..k].copy_from_slice(&bytes[..k]);
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found,
            });
        }
        if bytes.len() < 16 {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected: 16,
                actual: bytes.len() as u64,
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if word(4) != HEAD_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: word(4),
                expected: HEAD_VERSION,
            });
        }
        let (c, d) = (word(8) as usize, word(12) as usize);
        let expected = 16 + 4 * (c as u64 * d as u64 + c as u64);
        if bytes.len() as u64 != expected {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected,
                actual: bytes.len() as u64,
            });
        }
        let vals: Vec<f64> = bytes[16..]
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
            .collect();
        let weights = Array2::from_shape_vec((c, d), vals[..c * d].to_vec())
            .map_err(|e| Error::shape(e.to_string()))?;
        let bias = Array1::from_vec(vals[c * d..].to_vec());
        Self::new(weights, bias)
    }

    /// Fails if a parameter would overflow the f32 checkpoint format.
    pub fn check_storable(&self) -> Result<()> {
        let limit = f32::MAX as f64;
        if self
            .weights
            .iter()
            .chain(self.bias.iter())
            .any(|v| v.abs() > limit)
        {
            return Err(Error::Divergence {
                phase: "conversion to the f32 checkpoint".into(),
                step: 0,
            });
        }
        Ok(())
    }
}

pub fn write_head(path: impl AsRef<Path>, head: &LinearHead) -> Result<()> {
    let path = path.as_ref();
    head.check_storable()?;
    fs::write(path, head.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_head(path: impl AsRef<Path>) -> Result<LinearHead> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    LinearHead::from_bytes(&bytes, path)
}

/// Sequential dot product. ndarray's `dot` may pick FMA kernels depending on
/// the CPU, which breaks cross-machine reproducibility.
pub(crate) fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |acc, (x, y)| acc + x * y)
}

fn check_label(y: usize, classes: usize) -> Result<()> {
    if y >= classes {
        return Err(Error::LabelIndex { label: y, classes });
    }
    Ok(())
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax into `out`, max-shifted.
pub(crate) fn softmax_into(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `-log softmax(z)_y`.
pub fn cross_entropy(z: ArrayView1<f64>, y: usize) -> Result<f64> {
    check_label(y, z.len())?;
    let z = z.to_vec();
    Ok((log_sum_exp(&z) - z[y]).max(0.0))
}

/// `softmax(z) - onehot(y)`, the gradient of [`cross_entropy`] in `z`.
pub fn loss_grad_logits(z: ArrayView1<f64>, y: usize) -> Result<Array1<f64>> {
    check_label(y, z.len())?;
    let mut p = vec![0.0; z.len()];
    softmax_into(&z.to_vec(), &mut p);
    p[y] -= 1.0;
    Ok(Array1::from_vec(p))
}

/// Mean loss of a batch with its head gradients.
#[derive(Debug, Clone)]
pub struct BatchGrad {
    pub loss: f64,
    pub d_weights: Array2<f64>,
    pub d_bias: Array1<f64>,
    pub per_example: Vec<f64>,
}

impl BatchGrad {
    pub fn norm(&self) -> f64 {
        self.d_weights
            .iter()
            .chain(self.d_bias.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Per-example softmax probabilities and losses, `n x C`.
pub(crate) fn probs_and_losses(
    head: &LinearHead,
    features: ArrayView2<f64>,
    labels: &[usize],
) -> Result<(Array2<f64>, Vec<f64>)> {
    if features.nrows() != labels.len() {
        return Err(Error::shape(format!(
            "{} feature rows but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    let classes = head.class_count();
    let mut z = head.batch_logits(features)?;
    let mut losses = Vec::with_capacity(labels.len());
    let mut p = vec![0.0; classes];
    for (mut row, &y) in z.axis_iter_mut(Axis(0)).zip(labels) {
        check_label(y, classes)?;
        let zr = row.to_vec();
        losses.push((log_sum_exp(&zr) - zr[y]).max(0.0));
        softmax_into(&zr, &mut p);
        row.assign(&ArrayView1::from(&p));
    }
    Ok((z, losses))
}

/// Mean cross-entropy over the batch and its gradient in `(W, b)`.
pub fn batch_loss_and_grads(
    head: &LinearHead,
    features: ArrayView2<f64>,
    labels: &[usize],
) -> Result<BatchGrad> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (mut residual, per_example) = probs_and_losses(head, features, labels)?;
    for (mut row, &y) in residual.axis_iter_mut(Axis(0)).zip(labels) {
        row[y] -= 1.0;
    }
    let n = labels.len() as f64;
    let (classes, dim) = head.weights.dim();
    let mut d_weights = Array2::<f64>::zeros((classes, dim));
    let mut d_bias = Array1::<f64>::zeros(classes);
    for (r, h) in residual.axis_iter(Axis(0)).zip(features.axis_iter(Axis(0))) {
        for c in 0..classes {
            d_bias[c] += r[c];
            for j in 0..dim {
                d_weights[[c, j]] += r[c] * h[j];
            }
        }
    }
    d_weights /= n;
    d_bias /= n;
    let loss = per_example.iter().sum::<f64>() / n;
    Ok(BatchGrad {
        loss,
        d_weights,
        d_bias,
        per_example,
    })
}

/// Full-batch gradient descent settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GdOptions {
    pub steps: usize,
    pub lr: f64,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub weight_decay: f64,
}

impl GdOptions {
    pub fn new(steps: usize, lr: f64) -> Self {
        Self {
            steps,
            lr,
            clip_norm: None,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be >= 0",
                self.lr
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("clip_norm {c} must be positive")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Factor that rescales a gradient of norm `norm` to at most `clip`.
pub(crate) fn clip_scale(norm: f64, clip: Option<f64>) -> f64 {
    match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    }
}

/// One full-batch step in place. Returns the pre-step batch loss.
pub(crate) fn gd_step(
    head: &mut LinearHead,
    features: ArrayView2<f64>,
    labels: &[usize],
    lr: f64,
    clip_norm: Option<f64>,
    weight_decay: f64,
) -> Result<f64> {
    let mut g = batch_loss_and_grads(head, features, labels)?;
    if weight_decay != 0.0 {
        g.d_weights.scaled_add(weight_decay, &head.weights);
    }
    let scale = clip_scale(g.norm(), clip_norm);
    head.weights.scaled_add(-lr * scale, &g.d_weights);
    head.bias.scaled_add(-lr * scale, &g.d_bias);
    Ok(g.loss)
}

/// Plain gradient descent on raw arrays; `phase` names the caller in errors.
pub(crate) fn gd_train(
    head: &LinearHead,
    features: ArrayView2<f64>,
    labels: &[usize],
    opts: &GdOptions,
    phase: &str,
) -> Result<LinearHead> {
    let mut head = head.clone();
    for step in 0..opts.steps {
        let loss = gd_step(
            &mut head,
            features,
            labels,
            opts.lr,
            opts.clip_norm,
            opts.weight_decay,
        )?;
        if !loss.is_finite() || !head.is_finite() {
            return Err(Error::Divergence {
                phase: phase.to_string(),
                step,
            });
        }
    }
    Ok(head)
}

/// Full-batch ERM on `ds` starting from `head`.
pub fn erm_train(head: &LinearHead, ds: &FeatureDataset, opts: &GdOptions) -> Result<LinearHead> {
    opts.validate()?;
    head.check_input(ds.dim())?;
    if opts.steps == 0 {
        return Ok(head.clone());
    }
    gd_train(head, ds.features_f64().view(), ds.labels(), opts, "erm")
}

/// Grouped evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` for groups with no samples.
    pub per_group_accuracy: Vec<Option<f64>>,
    pub per_group_counts: Vec<usize>,
    pub worst_group_accuracy: f64,
    pub average_accuracy: f64,
    pub mean_loss: f64,
}

impl EvalReport {
    /// Index of the group attaining the worst-group accuracy.
    pub fn worst_group(&self) -> Option<usize> {
        self.per_group_accuracy
            .iter()
            .enumerate()
            .filter_map(|(g, a)| a.map(|a| (g, a)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(g, _)| g)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(z: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (k, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = k;
        }
    }
    best
}

pub fn predict(head: &LinearHead, ds: &FeatureDataset) -> Result<Vec<usize>> {
    let z = head.batch_logits(ds.features_f64().view())?;
    Ok(z.axis_iter(Axis(0)).map(argmax).collect())
}

pub fn evaluate(head: &LinearHead, ds: &FeatureDataset) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::validation("cannot evaluate on an empty dataset"));
    }
    if head.class_count() != ds.class_count() {
        return Err(Error::shape(format!(
            "head has {} classes, dataset has {}",
            head.class_count(),
            ds.class_count()
        )));
    }
    let features = ds.features_f64();
    let (probs, losses) = probs_and_losses(head, features.view(), ds.labels())?;
    let groups = ds.group_count();
    let mut correct = vec![0usize; groups];
    let mut counts = vec![0usize; groups];
    for ((row, &y), &g) in probs.axis_iter(Axis(0)).zip(ds.labels()).zip(ds.groups()) {
        counts[g] += 1;
        if argmax(row) == y {
            correct[g] += 1;
        }
    }
    let per_group_accuracy: Vec<Option<f64>> = correct
        .iter()
        .zip(&counts)
        .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
        .collect();
    let worst_group_accuracy = per_group_accuracy
        .iter()
        .flatten()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let average_accuracy = correct.iter().sum::<usize>() as f64 / ds.len() as f64;
    Ok(EvalReport {
        per_group_accuracy,
        per_group_counts: counts,
        worst_group_accuracy,
        average_accuracy,
        mean_loss: losses.iter().sum::<f64>() / ds.len() as f64,
    })
}
