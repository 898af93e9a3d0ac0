//! Randomized verification of the unrolled meta-gradient against central
//! finite differences.

use ndarray::{Array1, Array2};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::hardset::{hard_set_loss, HardSet};
use crate::linhead::LinearHead;
use crate::metaopt::{
    finite_diff_meta_gradient, inner_adapt, meta_gradient_with, InnerLoop, MetaGradMode, SupportSet,
};

pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-7;
pub const FD_EPS: f64 = 1e-4;

/// A small random bilevel problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub head: LinearHead,
    pub support: SupportSet,
    pub hard: HardSet,
    pub inner: InnerLoop,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        scale * rng.sample::<f64, _>(StandardNormal)
    })
}

/// Draw an instance with `d` in {2, 6, 16}, `C` in {2, 3}, `s <= 12`,
/// `|Q| <= 8`, `T` in {1, 2, 3, 5} and `alpha` in {0.01, 0.1}.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let d = *[2usize, 6, 16].choose(rng).unwrap();
    let classes = *[2usize, 3].choose(rng).unwrap();
    let steps = *[1usize, 2, 3, 5].choose(rng).unwrap();
    let alpha = *[0.01, 0.1].choose(rng).unwrap();
    let s = rng.random_range(classes..=12);
    let q = rng.random_range(1..=8);
    instance_with(rng, d, classes, s, q, InnerLoop::new(steps, alpha))
}

pub fn instance_with(
    rng: &mut ChaCha8Rng,
    d: usize,
    classes: usize,
    s: usize,
    q: usize,
    inner: InnerLoop,
) -> Instance {
    let head = LinearHead::new(
        normal_matrix(rng, classes, d, 0.5),
        Array1::from_shape_simple_fn(classes, || 0.5 * rng.sample::<f64, _>(StandardNormal)),
    )
    .expect("finite");
    let labels: Vec<usize> = (0..s).map(|i| i % classes).collect();
    let support = SupportSet::new(
        normal_matrix(rng, s, d, 1.0),
        labels,
        (0..s).collect(),
        vec![0; s],
        classes,
        1,
    )
    .expect("valid support");
    let hard = HardSet {
        features: normal_matrix(rng, q, d, 1.0),
        labels: (0..q).map(|_| rng.random_range(0..classes)).collect(),
        source_rows: (0..q).collect(),
        losses_at_selection: vec![0.0; q],
    };
    Instance {
        head,
        support,
        hard,
        inner,
    }
}

/// Largest element-wise relative error of `analytic` against `reference`;
/// differences within [`ABS_FLOOR`] count as zero.
pub fn max_rel_error(analytic: &Array2<f64>, reference: &Array2<f64>) -> f64 {
    analytic
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| {
            let diff = (a - b).abs();
            if diff <= ABS_FLOOR {
                0.0
            } else {
                diff / b.abs()
            }
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseResult {
    pub d: usize,
    pub classes: usize,
    pub support: usize,
    pub hard: usize,
    pub steps: usize,
    pub alpha: f64,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Largest |entry| of the finite-difference gradient.
    pub grad_scale: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub cases: Vec<CaseResult>,
    /// T = 0 produced an all-zero gradient (exact equality, not a tolerance).
    pub zero_unroll_exact: bool,
    pub passed: bool,
}

pub fn check_instance(inst: &Instance, mode: MetaGradMode) -> Result<CaseResult> {
    let (_, tape) = inner_adapt(&inst.head, &inst.support, &inst.inner)?;
    let analytic = meta_gradient_with(&tape, &inst.support, &inst.hard, mode)?;
    let fd = finite_diff_meta_gradient(&inst.head, &inst.support, &inst.hard, &inst.inner, FD_EPS)?;
    let err = max_rel_error(&analytic, &fd);
    Ok(CaseResult {
        d: inst.support.dim(),
        classes: inst.support.class_count(),
        support: inst.support.len(),
        hard: inst.hard.len(),
        steps: inst.inner.steps,
        alpha: inst.inner.alpha,
        max_rel_error: err,
        max_abs_error: analytic
            .iter()
            .zip(fd.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max),
        grad_scale: fd.iter().map(|v| v.abs()).fold(0.0, f64::max),
        passed: err < REL_TOL,
    })
}

/// Run `instances` random checks plus the exact T = 0 check.
pub fn run_suite(instances: usize, seed: u64, mode: MetaGradMode) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::with_capacity(instances);
    for _ in 0..instances {
        let inst = random_instance(&mut rng);
        cases.push(check_instance(&inst, mode)?);
    }
    let mut zero = random_instance(&mut rng);
    zero.inner.steps = 0;
    let (_, tape) = inner_adapt(&zero.head, &zero.support, &zero.inner)?;
    let g = meta_gradient_with(&tape, &zero.support, &zero.hard, mode)?;
    let zero_unroll_exact = g.iter().all(|&v| v == 0.0);
    let passed = zero_unroll_exact && cases.iter().all(|c| c.passed);
    Ok(GradCheckReport {
        cases,
        zero_unroll_exact,
        passed,
    })
}

/// Outer loss of `support` on `inst` after the inner loop.
pub fn outer_loss(inst: &Instance, support: &SupportSet) -> Result<f64> {
    let (adapted, _) = inner_adapt(&inst.head, support, &inst.inner)?;
    hard_set_loss(&adapted, &inst.hard)
}

/// Halve the outer step from 1.0 until one plain meta update strictly lowers
/// the outer loss. Returns `(eta, loss_before, loss_after)`, or `None` after
/// `max_halvings` failures.
pub fn descent_step(inst: &Instance, max_halvings: usize) -> Result<Option<(f64, f64, f64)>> {
    let (_, tape) = inner_adapt(&inst.head, &inst.support, &inst.inner)?;
    let grad = meta_gradient_with(&tape, &inst.support, &inst.hard, MetaGradMode::Exact)?;
    let before = outer_loss(inst, &inst.support)?;
    let mut eta = 1.0;
    for _ in 0..=max_halvings {
        let mut moved = inst.support.clone();
        moved.set_embeddings(inst.support.embeddings() - &(&grad * eta))?;
        let after = outer_loss(inst, &moved)?;
        if after < before {
            return Ok(Some((eta, before, after)));
        }
        eta *= 0.5;
    }
    Ok(None)
}
