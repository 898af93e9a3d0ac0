//! Named HSFM hyperparameter sets.
//!
//! The backbone rows (`<dataset>-<backbone>`) are the published settings for
//! real embeddings. Their inner learning rates are tuned for 2048-dim
//! ResNet-scale features and are far too small to move a head on the
//! 20-dim synthetic benchmark; use `synth-default` there.

use crate::metaopt::{HsfmConfig, OuterOptimizer};

struct Row {
    name: &'static str,
    support_per_class: usize,
    inner_steps: usize,
    inner_lr: f64,
    outer_lr: f64,
    meta_steps: usize,
    k_hard: usize,
    epochs: usize,
}

const ROWS: &[Row] = &[
    Row {
        name: "celeba-resnet",
        support_per_class: 1024,
        inner_steps: 10,
        inner_lr: 5e-5,
        outer_lr: 1e-1,
        meta_steps: 5,
        k_hard: 256,
        epochs: 20,
    },
    Row {
        name: "waterbirds-resnet",
        support_per_class: 16,
        inner_steps: 15,
        inner_lr: 5e-5,
        outer_lr: 1.0,
        meta_steps: 15,
        k_hard: 64,
        epochs: 40,
    },
    Row {
        name: "metashift-resnet",
        support_per_class: 32,
        inner_steps: 15,
        inner_lr: 5e-5,
        outer_lr: 1e-2,
        meta_steps: 10,
        k_hard: 64,
        epochs: 10,
    },
    Row {
        name: "dominoes-resnet",
        support_per_class: 16,
        inner_steps: 10,
        inner_lr: 1e-4,
        outer_lr: 1.0,
        meta_steps: 15,
        k_hard: 256,
        epochs: 40,
    },
    Row {
        name: "celeba-vit",
        support_per_class: 1024,
        inner_steps: 10,
        inner_lr: 1e-4,
        outer_lr: 1.0,
        meta_steps: 15,
        k_hard: 256,
        epochs: 50,
    },
    Row {
        name: "waterbirds-vit",
        support_per_class: 128,
        inner_steps: 10,
        inner_lr: 1e-4,
        outer_lr: 1.0,
        meta_steps: 15,
        k_hard: 32,
        epochs: 40,
    },
    Row {
        name: "metashift-vit",
        support_per_class: 64,
        inner_steps: 10,
        inner_lr: 1e-5,
        outer_lr: 1e-2,
        meta_steps: 10,
        k_hard: 8,
        epochs: 30,
    },
    Row {
        name: "dominoes-vit",
        support_per_class: 128,
        inner_steps: 10,
        inner_lr: 1e-4,
        outer_lr: 1.0,
        meta_steps: 15,
        k_hard: 256,
        epochs: 40,
    },
    Row {
        name: "celeba-convnext",
        support_per_class: 32,
        inner_steps: 10,
        inner_lr: 1e-4,
        outer_lr: 1.0,
        meta_steps: 15,
        k_hard: 8,
        epochs: 40,
    },
    Row {
        name: "waterbirds-convnext",
        support_per_class: 128,
        inner_steps: 10,
        inner_lr: 1e-4,
        outer_lr: 1.0,
        meta_steps: 15,
        k_hard: 16,
        epochs: 40,
    },
];

/// Every preset name accepted by [`hsfm_preset`].
pub fn preset_names() -> Vec<&'static str> {
    let mut names: Vec<_> = ROWS.iter().map(|r| r.name).collect();
    names.push("finegrained-resnet");
    names.push("synth-default");
    names.push("synth-plain");
    names
}

pub fn hsfm_preset(name: &str) -> Option<HsfmConfig> {
    if name == "synth-default" {
        return Some(HsfmConfig::synth_default());
    }
    if name == "synth-plain" {
        return Some(HsfmConfig::synth_plain());
    }
    if name == "finegrained-resnet" {
        // 16 vectors per class, 40 iterations of 15 inner + 15 head steps,
        // top-64 hard examples per class, clipping at 10, adaptive meta steps.
        return Some(HsfmConfig {
            support_per_class: 16,
            inner_steps: 15,
            inner_lr: 1e-3,
            outer_lr: 5e-5,
            meta_steps: 15,
            k_hard: 64,
            epochs: 40,
            seed: 0,
            clip_norm: Some(10.0),
            outer_optimizer: OuterOptimizer::Adaptive,
            first_order: false,
        });
    }
    ROWS.iter().find(|r| r.name == name).map(|r| HsfmConfig {
        support_per_class: r.support_per_class,
        inner_steps: r.inner_steps,
        inner_lr: r.inner_lr,
        outer_lr: r.outer_lr,
        meta_steps: r.meta_steps,
        k_hard: r.k_hard,
        epochs: r.epochs,
        seed: 0,
        clip_norm: None,
        outer_optimizer: OuterOptimizer::PlainGd,
        first_order: false,
    })
}
