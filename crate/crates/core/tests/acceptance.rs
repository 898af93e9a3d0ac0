//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Run with `cargo test -p hsfm --test acceptance`.

mod common;

use std::path::Path;
use std::time::Instant;

use hsfm::gradcheck::{check_instance, descent_step, instance_with, random_instance};
use hsfm::metaopt::{meta_gradient_with, InnerLoop, MetaGradMode};
use hsfm::runner::{run, Command, DataSource, RunConfig, SweepAxis, SweepSettings};
use hsfm::{bayes_core_accuracy, build_hard_set, inner_adapt, Error, FeatureDataset, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn canonical_config() -> RunConfig {
    RunConfig {
        data: Some(DataSource {
            synth_preset: Some("synth-waterbirds".into()),
            ..DataSource::default()
        }),
        seed: Some(0),
        ..RunConfig::default()
    }
}

fn wga(report: &Value) -> f64 {
    report["worst_group_accuracy"].as_f64().unwrap()
}

fn avg(report: &Value) -> f64 {
    report["average_accuracy"].as_f64().unwrap()
}

fn gradient_exactness() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = (0.0f64, 0.0f64);
    let mut smallest_scale = f64::INFINITY;
    let mut failures = 0;
    let mut count = 0;
    // Every (T, C, d) combination once, then random draws on top.
    for t in [1, 2, 3, 5] {
        for c in [2, 3] {
            for d in [2, 6, 16] {
                let alpha = if rng.random_bool(0.5) { 0.01 } else { 0.1 };
                let s = rng.random_range(c..=12);
                let q = rng.random_range(1..=8);
                let inst = instance_with(&mut rng, d, c, s, q, InnerLoop::new(t, alpha));
                let r = check_instance(&inst, MetaGradMode::Exact).unwrap();
                worst = (worst.0.max(r.max_rel_error), worst.1.max(r.max_abs_error));
                smallest_scale = smallest_scale.min(r.grad_scale);
                failures += usize::from(!r.passed);
                count += 1;
            }
        }
    }
    for _ in 0..16 {
        let r = check_instance(&random_instance(&mut rng), MetaGradMode::Exact).unwrap();
        worst = (worst.0.max(r.max_rel_error), worst.1.max(r.max_abs_error));
        smallest_scale = smallest_scale.min(r.grad_scale);
        failures += usize::from(!r.passed);
        count += 1;
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        failures == 0 && secs < 10.0,
        format!(
            "{count} instances, {failures} over 1e-4, max rel err {:.1e}, max abs diff {:.1e} (smallest gradient scale {smallest_scale:.1e}), {secs:.2} s",
            worst.0, worst.1
        ),
    )
}

fn zero_unroll() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut all_zero = true;
    for _ in 0..10 {
        let mut inst = random_instance(&mut rng);
        inst.inner.steps = 0;
        let (_, tape) = inner_adapt(&inst.head, &inst.support, &inst.inner).unwrap();
        let g = meta_gradient_with(&tape, &inst.support, &inst.hard, MetaGradMode::Exact).unwrap();
        all_zero &= g.iter().all(|&v| v == 0.0);
    }
    outcome(
        all_zero,
        "T = 0 gradient is exactly zero on 10 instances".into(),
    )
}

fn descent() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ok = 0;
    let mut smallest_eta = 1.0f64;
    for _ in 0..10 {
        if let Some((eta, before, after)) = descent_step(&random_instance(&mut rng), 40).unwrap() {
            if after < before {
                ok += 1;
                smallest_eta = smallest_eta.min(eta);
            }
        }
    }
    outcome(
        ok == 10,
        format!("{ok}/10 instances decreased L_out, smallest eta {smallest_eta:.3e}"),
    )
}

struct Benchmark {
    erm: Value,
    hsfm: Value,
    dfr: Value,
    hsfm_secs: f64,
}

fn benchmark(dir: &Path) -> Benchmark {
    let cfg = canonical_config();
    let started = Instant::now();
    let h = run(Command::TrainHsfm, &cfg, &dir.join("hsfm"))
        .unwrap()
        .summary;
    let hsfm_secs = started.elapsed().as_secs_f64();
    let d = run(Command::TrainDfr, &cfg, &dir.join("dfr"))
        .unwrap()
        .summary;
    Benchmark {
        erm: h["start_test"].clone(),
        hsfm: h["test"].clone(),
        dfr: d["test"].clone(),
        hsfm_secs,
    }
}

fn robustness_gain(b: &Benchmark) -> Outcome {
    let bayes = bayes_core_accuracy(&SynthConfig::synth_waterbirds()).unwrap();
    let (e, h) = (wga(&b.erm), wga(&b.hsfm));
    let (ea, ha) = (avg(&b.erm), avg(&b.hsfm));
    let gap_ok = e <= bayes - 0.10;
    let gain_ok = h - e >= 0.10;
    // Average accuracy may not drop by more than 3 points.
    let avg_ok = ha >= ea - 0.03;
    let time_ok = b.hsfm_secs < 60.0;
    outcome(
        gap_ok && gain_ok && avg_ok && time_ok,
        format!(
            "Bayes {bayes:.4}; ERM WGA {e:.3} (gap {:.3}); HSFM WGA {h:.3} (gain {:+.3}); avg {ea:.3} -> {ha:.3}; {:.2} s",
            bayes - e,
            h - e,
            b.hsfm_secs
        ),
    )
}

fn baseline_ordering(b: &Benchmark) -> Outcome {
    let (e, h, d) = (wga(&b.erm), wga(&b.hsfm), wga(&b.dfr));
    outcome(
        (h - d).abs() <= 0.05 && h >= e + 0.10 && d >= e + 0.10,
        format!(
            "HSFM WGA {h:.3}, DFR WGA {d:.3} (diff {:+.3}), ERM WGA {e:.3}",
            h - d
        ),
    )
}

fn sweep_wgas(dir: &Path, axis: SweepAxis, values: Vec<usize>) -> Vec<f64> {
    let cfg = RunConfig {
        sweep: Some(SweepSettings {
            axis,
            values,
            seed_policy: Default::default(),
        }),
        ..canonical_config()
    };
    let s = run(Command::Sweep, &cfg, dir).unwrap().summary;
    s["points"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["wga"].as_f64().unwrap())
        .collect()
}

fn ablation_shapes(dir: &Path) -> Outcome {
    let t = sweep_wgas(
        &dir.join("t"),
        SweepAxis::InnerSteps,
        vec![1, 5, 10, 15, 25],
    );
    let best = t.iter().cloned().fold(f64::MIN, f64::max);
    let t_ok = t[0] <= best - 0.05;
    let s = sweep_wgas(
        &dir.join("s"),
        SweepAxis::SupportPerClass,
        vec![2, 8, 32, 128, 512],
    );
    let s_ok = s.windows(2).any(|w| w[1] <= w[0]);
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.3}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    outcome(
        t_ok && s_ok,
        format!(
            "T {{1,5,10,15,25}}: {} (T=1 {} best by {:.3}); support {{2,8,32,128,512}}: {} ({})",
            fmt(&t),
            if t_ok { "below" } else { "NOT 5 points below" },
            best - t[0],
            fmt(&s),
            if s_ok {
                "not monotone"
            } else {
                "monotone increasing"
            }
        ),
    )
}

fn determinism(dir: &Path) -> Outcome {
    let cfg = canonical_config();
    run(Command::TrainHsfm, &cfg, &dir.join("a")).unwrap();
    run(Command::TrainHsfm, &cfg, &dir.join("b")).unwrap();
    let names = [
        "erm.hsfh",
        "head.hsfh",
        "support.init",
        "support.opt",
        "trace.jsonl",
        "summary.json",
    ];
    let differing: Vec<&str> = names
        .iter()
        .copied()
        .filter(|n| {
            std::fs::read(dir.join("a").join(n)).unwrap()
                != std::fs::read(dir.join("b").join(n)).unwrap()
        })
        .collect();
    outcome(
        differing.is_empty(),
        format!(
            "{} artifacts compared, differing: {differing:?}",
            names.len()
        ),
    )
}

fn format_conformance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(0..40);
        let d = rng.random_range(1..10);
        let c = rng.random_range(2..6);
        let g = rng.random_range(1..6);
        let coarse = rng.random_bool(0.3);
        let ds = common::random_dataset(&mut rng, n, d, c, g, coarse);
        let bytes = ds.to_bytes();
        let back = FeatureDataset::from_bytes(&bytes, Path::new("mem")).unwrap();
        let bit_equal = back
            .features()
            .iter()
            .zip(ds.features())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if bytes != common::oracle_bytes(&ds)
            || !bit_equal
            || back.labels() != ds.labels()
            || back.groups() != ds.groups()
        {
            mismatches += 1;
        }
    }
    let ds =
        FeatureDataset::new(vec![1.0, 2.0, 3.0, 4.0], vec![0, 1], vec![0, 0], 2, 2, 1).unwrap();
    let good = ds.to_bytes();
    let mut magic = good.clone();
    magic[..4].copy_from_slice(b"NOPE");
    let bad_magic = matches!(
        FeatureDataset::from_bytes(&magic, Path::new("m")),
        Err(Error::BadMagic { .. })
    );
    let truncated = matches!(
        FeatureDataset::from_bytes(&good[..good.len() - 3], Path::new("t")),
        Err(Error::Truncated { .. })
    );
    let mut label = good.clone();
    let at = good.len() - 2 * 4 * 2 + 4;
    label[at..at + 4].copy_from_slice(&9u32.to_le_bytes());
    let label_err = match FeatureDataset::from_bytes(&label, Path::new("l")) {
        Err(e @ Error::Validation(_)) => e.to_string().contains("label 9"),
        _ => false,
    };
    outcome(
        mismatches == 0 && bad_magic && truncated && label_err,
        format!(
            "1000 round trips, {mismatches} mismatches; bad magic {}, truncation {}, out-of-range label {}",
            ok(bad_magic),
            ok(truncated),
            ok(label_err)
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "WRONG ERROR"
    }
}

fn hard_set_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    let mut with_ties = 0;
    for i in 0..100 {
        let c = rng.random_range(2..5);
        let d = rng.random_range(1..5);
        let n = rng.random_range(5..60);
        let coarse = i % 2 == 0;
        let val = common::random_dataset(&mut rng, n, d, c, 2, coarse);
        let head = common::random_head(&mut rng, c, d, 0.8);
        let k = rng.random_range(1..15);
        with_ties += usize::from(common::has_ties(&head, &val));
        let got = build_hard_set(&head, &val, k).unwrap().source_rows;
        if got != common::oracle_hard_rows(&head, &val, k) {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0 && with_ties > 0,
        format!("100 instances ({with_ties} with tied losses), {mismatches} mismatches"),
    )
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let bench = benchmark(dir.path());
    let results = [
        ("1 meta-gradient exactness", gradient_exactness()),
        ("2 zero-unroll identity", zero_unroll()),
        ("3 descent property", descent()),
        ("4 synthetic robustness gain", robustness_gain(&bench)),
        ("5 baseline ordering vs DFR", baseline_ordering(&bench)),
        (
            "6 ablation shapes",
            ablation_shapes(&dir.path().join("sweeps")),
        ),
        ("7 determinism", determinism(&dir.path().join("det"))),
        ("8 format conformance", format_conformance()),
        ("9 hard-set oracle equivalence", hard_set_oracle()),
    ];
    let mut failed = 0;
    for (name, r) in &results {
        println!(
            "[{}] criterion {name}: {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.detail
        );
        failed += usize::from(!r.passed);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
