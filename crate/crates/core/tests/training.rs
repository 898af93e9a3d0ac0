use hsfm::metaopt::{class_displacements, meta_gradient_with, MetaGradMode};
use hsfm::{
    build_hard_set, dfr_baseline, erm_train, evaluate, export_support, generate, hsfm_train,
    init_support, inner_adapt, read_features, Balance, DatasetSplit, GdOptions, HsfmConfig,
    LinearHead, SynthConfig,
};

fn canonical() -> (DatasetSplit, LinearHead) {
    let split = generate(&SynthConfig::synth_waterbirds()).unwrap();
    let erm = erm_train(
        &LinearHead::zeros(2, 20),
        &split.train,
        &GdOptions::new(100, 0.1),
    )
    .unwrap();
    (split, erm)
}

fn short() -> HsfmConfig {
    HsfmConfig {
        epochs: 4,
        ..HsfmConfig::synth_default()
    }
}

#[test]
fn training_is_bit_reproducible() {
    let (split, erm) = canonical();
    let a = hsfm_train(&erm, &split, &short()).unwrap();
    let b = hsfm_train(&erm, &split, &short()).unwrap();
    assert_eq!(a.head.to_bytes(), b.head.to_bytes());
    assert_eq!(a.trace.to_jsonl(), b.trace.to_jsonl());
    assert_eq!(a.support.embeddings(), b.support.embeddings());
}

#[test]
fn support_labels_never_change() {
    let (split, erm) = canonical();
    let cfg = short();
    let fresh = init_support(&split.train, cfg.support_per_class, cfg.seed).unwrap();
    let out = hsfm_train(&erm, &split, &cfg).unwrap();
    assert_eq!(out.support.labels(), fresh.labels());
    assert_eq!(out.support.source_rows(), fresh.source_rows());
    assert_eq!(out.support.initial_embeddings(), fresh.embeddings());
    assert_ne!(out.support.embeddings(), fresh.embeddings());
    for (&r, &y) in fresh.source_rows().iter().zip(fresh.labels()) {
        assert_eq!(split.train.labels()[r], y);
    }
}

#[test]
fn without_meta_steps_it_is_erm_on_the_frozen_support() {
    let (split, erm) = canonical();
    let cfg = HsfmConfig {
        meta_steps: 0,
        ..short()
    };
    let out = hsfm_train(&erm, &split, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (init, _) = export_support(&out.support, dir.path().join("s")).unwrap();
    let support_ds = read_features(init).unwrap();
    let plain = erm_train(
        &erm,
        &support_ds,
        &GdOptions::new(cfg.inner_steps * cfg.epochs, cfg.inner_lr),
    )
    .unwrap();
    assert_eq!(out.head, plain);
}

#[test]
fn fresh_support_exports_identical_files() {
    let (split, _) = canonical();
    let sup = init_support(&split.train, 8, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (init, opt) = export_support(&sup, dir.path().join("fresh")).unwrap();
    assert_eq!(std::fs::read(&init).unwrap(), std::fs::read(&opt).unwrap());
    let back = read_features(&opt).unwrap();
    assert_eq!(back.labels(), sup.labels());
    assert_eq!(back.groups(), sup.source_groups());
    for (a, b) in back.features().iter().zip(sup.embeddings().iter()) {
        assert_eq!(*a as f64, *b);
    }
}

#[test]
fn meta_steps_lower_the_outer_loss_in_the_first_epoch() {
    let (split, erm) = canonical();
    let out = hsfm_train(&erm, &split, &short()).unwrap();
    let first = &out.trace.epochs[0];
    assert!(first.hard_loss_after < first.hard_loss_before, "{first:?}");
    assert_eq!(first.hard_set_size, 64);
    // The hard set of an ERM head leans on the minority groups (1 and 2).
    let minority = first.hard_group_counts[1] + first.hard_group_counts[2];
    assert!(
        minority > first.hard_set_size / 2,
        "{:?}",
        first.hard_group_counts
    );
}

#[test]
fn every_class_moves() {
    let (split, erm) = canonical();
    let out = hsfm_train(&erm, &split, &HsfmConfig::synth_default()).unwrap();
    assert!(class_displacements(&out.support).iter().all(|&d| d > 0.0));
}

#[test]
fn tape_replays_and_first_order_signal_is_zero() {
    let (split, erm) = canonical();
    let cfg = HsfmConfig::synth_default();
    let sup = init_support(&split.train, cfg.support_per_class, 0).unwrap();
    let (_, tape) = inner_adapt(&erm, &sup, &cfg.inner_loop()).unwrap();
    assert_eq!(tape.iterates.len(), cfg.inner_steps + 1);
    assert!(tape.replays_exactly(sup.labels()));
    let hard = build_hard_set(&erm, &split.val, 8).unwrap();
    let g = meta_gradient_with(&tape, &sup, &hard, MetaGradMode::FirstOrder).unwrap();
    assert!(g.iter().all(|&v| v == 0.0));
    let exact = meta_gradient_with(&tape, &sup, &hard, MetaGradMode::Exact).unwrap();
    assert!(exact.iter().any(|&v| v != 0.0));
}

#[test]
fn dfr_beats_erm_on_worst_group() {
    let (split, erm) = canonical();
    let dfr = dfr_baseline(
        &erm,
        &split.val,
        &GdOptions::new(500, 0.1),
        Balance::ByGroup,
        0,
    )
    .unwrap();
    let before = evaluate(&erm, &split.test).unwrap().worst_group_accuracy;
    let after = evaluate(&dfr, &split.test).unwrap().worst_group_accuracy;
    assert!(after > before + 0.05, "{before} -> {after}");
}

#[test]
fn by_class_dfr_runs_with_hidden_groups() {
    let (split, erm) = canonical();
    let val = &split.val;
    let hidden = hsfm::FeatureDataset::new(
        val.features().to_vec(),
        val.labels().to_vec(),
        vec![0; val.len()],
        val.dim(),
        2,
        1,
    )
    .unwrap();
    assert!(dfr_baseline(&erm, &hidden, &GdOptions::new(10, 0.1), Balance::ByGroup, 0).is_err());
    dfr_baseline(&erm, &hidden, &GdOptions::new(10, 0.1), Balance::ByClass, 0).unwrap();
}
