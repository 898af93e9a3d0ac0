//! Parametric spurious-correlation datasets in feature space.
//!
//! Each sample has three blocks of coordinates: core dims whose mean depends
//! on the class, spurious dims whose mean depends on an environment
//! attribute, and pure noise dims. Group id is `class * env_count + env`.
//! Group imbalance in the training split ties environment to class, which is
//! what an ERM head latches onto.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::error::{Error, Result};
use crate::featurestore::{DatasetSplit, FeatureDataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub class_count: usize,
    pub env_count: usize,
    pub d_core: usize,
    pub d_spur: usize,
    #[serde(default = "default_noise_dims")]
    pub d_noise: usize,
    pub mu_core: f64,
    pub mu_spur: f64,
    pub sigma: f64,
    /// `[class][env]` sample counts.
    pub train_group_counts: Vec<Vec<usize>>,
    pub val_group_counts: Vec<Vec<usize>>,
    pub test_group_counts: Vec<Vec<usize>>,
    pub seed: u64,
}

fn default_noise_dims() -> usize {
    10
}

impl SynthConfig {
    /// Two classes, two environments, 95% of training samples in the two
    /// majority groups; balanced validation and test splits.
    pub fn synth_waterbirds() -> Self {
        Self {
            class_count: 2,
            env_count: 2,
            d_core: 5,
            d_spur: 5,
            d_noise: 10,
            mu_core: 1.0,
            mu_spur: 2.0,
            sigma: 1.0,
            train_group_counts: vec![vec![1000, 50], vec![50, 1000]],
            val_group_counts: vec![vec![200, 200], vec![200, 200]],
            test_group_counts: vec![vec![200, 200], vec![200, 200]],
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "synth-waterbirds" => Some(Self::synth_waterbirds()),
            _ => None,
        }
    }

    pub fn dim(&self) -> usize {
        self.d_core + self.d_spur + self.d_noise
    }

    pub fn group_count(&self) -> usize {
        self.class_count * self.env_count
    }

    /// Flattened per-group counts for one split, in group-id order.
    pub fn group_plan(counts: &[Vec<usize>]) -> Vec<usize> {
        counts.iter().flatten().copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Config("class_count must be at least 2".into()));
        }
        if self.env_count == 0 {
            return Err(Error::Config("env_count must be at least 1".into()));
        }
        if self.dim() == 0 {
            return Err(Error::Config(
                "d_core + d_spur + d_noise must be at least 1".into(),
            ));
        }
        for (name, v) in [("mu_core", self.mu_core), ("mu_spur", self.mu_spur)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and nonnegative"
                )));
            }
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        for (name, counts) in [
            ("train_group_counts", &self.train_group_counts),
            ("val_group_counts", &self.val_group_counts),
            ("test_group_counts", &self.test_group_counts),
        ] {
            if counts.len() != self.class_count
                || counts.iter().any(|row| row.len() != self.env_count)
            {
                return Err(Error::Config(format!(
                    "{name} must be a {}x{} matrix",
                    self.class_count, self.env_count
                )));
            }
        }
        if self.train_group_counts.iter().flatten().sum::<usize>() == 0 {
            return Err(Error::Config("training split has zero samples".into()));
        }
        block_pattern(self.class_count, self.d_core, "d_core")?;
        block_pattern(self.env_count, self.d_spur, "d_spur")?;
        Ok(())
    }

    /// Mean vector of group `(class, env)`.
    pub fn group_mean(&self, class: usize, env: usize) -> Vec<f64> {
        let core = block_pattern(self.class_count, self.d_core, "d_core").expect("validated");
        let spur = block_pattern(self.env_count, self.d_spur, "d_spur").expect("validated");
        let mut mean = Vec::with_capacity(self.dim());
        mean.extend(core[class].iter().map(|u| self.mu_core * u));
        mean.extend(spur[env].iter().map(|v| self.mu_spur * v));
        mean.extend(std::iter::repeat_n(0.0, self.d_noise));
        mean
    }
}

/// Unit direction patterns, one per category, over `dims` coordinates.
///
/// One category: all zeros. Two: -1 / +1 on every coordinate. More: one-hot
/// on contiguous blocks of `dims / count` coordinates.
fn block_pattern(count: usize, dims: usize, name: &str) -> Result<Vec<Vec<f64>>> {
    match count {
        1 => Ok(vec![vec![0.0; dims]]),
        2 => Ok(vec![vec![-1.0; dims], vec![1.0; dims]]),
        _ => {
            if dims < count {
                return Err(Error::Config(format!(
                    "{name} = {dims} is too small for {count} one-hot blocks"
                )));
            }
            let block = dims / count;
            Ok((0..count)
                .map(|k| {
                    (0..dims)
                        .map(|j| {
                            if j / block == k && j < block * count {
                                1.0
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect())
        }
    }
}

fn generate_split(
    cfg: &SynthConfig,
    counts: &[Vec<usize>],
    rng: &mut ChaCha8Rng,
) -> Result<FeatureDataset> {
    let d = cfg.dim();
    let noise = Normal::new(0.0, cfg.sigma).map_err(|e| Error::Config(e.to_string()))?;
    let total: usize = counts.iter().flatten().sum();
    let mut features = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    let mut groups = Vec::with_capacity(total);
    for (class, row) in counts.iter().enumerate() {
        for (env, &count) in row.iter().enumerate() {
            let mean = cfg.group_mean(class, env);
            for _ in 0..count {
                features.extend(mean.iter().map(|m| (m + noise.sample(rng)) as f32));
                labels.push(class);
                groups.push(class * cfg.env_count + env);
            }
        }
    }
    FeatureDataset::new(
        features,
        labels,
        groups,
        d,
        cfg.class_count,
        cfg.group_count(),
    )
}

/// Draw train, validation and test splits. Pure function of `cfg`, seed included.
pub fn generate(cfg: &SynthConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = generate_split(cfg, &cfg.train_group_counts, &mut rng)?;
    let val = generate_split(cfg, &cfg.val_group_counts, &mut rng)?;
    let test = generate_split(cfg, &cfg.test_group_counts, &mut rng)?;
    DatasetSplit::new(train, val, test)
}

/// Accuracy of the Bayes-optimal classifier that only looks at the core
/// dims, `Phi(mu_core * sqrt(d_core) / sigma)`. Two classes only; the value is
/// the same for every group.
pub fn bayes_core_accuracy(cfg: &SynthConfig) -> Result<f64> {
    if cfg.class_count != 2 {
        return Err(Error::Unsupported(format!(
            "analytic core accuracy needs 2 classes, got {}",
            cfg.class_count
        )));
    }
    let margin = cfg.mu_core * (cfg.d_core as f64).sqrt() / cfg.sigma;
    if margin.is_infinite() {
        return Ok(1.0);
    }
    Ok(StdNormal::standard().cdf(margin))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            train_group_counts: vec![vec![10, 2], vec![2, 10]],
            val_group_counts: vec![vec![3, 3], vec![3, 3]],
            test_group_counts: vec![vec![1, 1], vec![1, 1]],
            seed,
            ..SynthConfig::synth_waterbirds()
        }
    }

    #[test]
    fn canonical_group_sizes() {
        let split = generate(&SynthConfig::synth_waterbirds()).unwrap();
        assert_eq!(split.train.group_sizes(), vec![1000, 50, 50, 1000]);
        assert_eq!(split.val.group_sizes(), vec![200; 4]);
        assert_eq!(split.train.len(), 2100);
        assert_eq!(split.test.len(), 800);
        assert_eq!(split.train.dim(), 20);
    }

    #[test]
    fn near_zero_sigma_pins_means() {
        let cfg = SynthConfig {
            sigma: 1e-9,
            ..small(3)
        };
        let split = generate(&cfg).unwrap();
        for i in 0..split.train.len() {
            if split.train.groups()[i] != 0 {
                continue;
            }
            let row = split.train.row(i);
            assert!(row[..5].iter().all(|&v| (v + 1.0).abs() < 1e-6));
            assert!(row[5..10].iter().all(|&v| (v + 2.0).abs() < 1e-6));
            assert!(row[10..].iter().all(|&v| v.abs() < 1e-6));
        }
    }

    #[test]
    fn deterministic_bytes() {
        let a = generate(&small(11)).unwrap();
        let b = generate(&small(11)).unwrap();
        let c = generate(&small(12)).unwrap();
        assert_eq!(a.train.to_bytes(), b.train.to_bytes());
        assert_ne!(a.train.to_bytes(), c.train.to_bytes());
    }

    #[test]
    fn rejects_empty_training() {
        let cfg = SynthConfig {
            train_group_counts: vec![vec![0, 0], vec![0, 0]],
            ..small(0)
        };
        assert!(generate(&cfg).is_err());
        let cfg = SynthConfig {
            d_core: 0,
            d_spur: 0,
            d_noise: 0,
            ..small(0)
        };
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn bayes_values() {
        // Phi(sqrt(5)) = 0.98732... (scipy.stats.norm.cdf(5 ** 0.5))
        let acc = bayes_core_accuracy(&SynthConfig::synth_waterbirds()).unwrap();
        assert!((acc - 0.987_326_6).abs() < 1e-6, "{acc}");
        let zero = SynthConfig {
            mu_core: 0.0,
            ..SynthConfig::synth_waterbirds()
        };
        assert_eq!(bayes_core_accuracy(&zero).unwrap(), 0.5);
        let huge = SynthConfig {
            mu_core: 1e6,
            ..SynthConfig::synth_waterbirds()
        };
        assert_eq!(bayes_core_accuracy(&huge).unwrap(), 1.0);
        let three = SynthConfig {
            class_count: 3,
            ..SynthConfig::synth_waterbirds()
        };
        assert!(matches!(
            bayes_core_accuracy(&three),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn multiclass_one_hot_blocks() {
        let cfg = SynthConfig {
            class_count: 3,
            env_count: 3,
            d_core: 6,
            d_spur: 3,
            d_noise: 0,
            train_group_counts: vec![vec![1; 3]; 3],
            val_group_counts: vec![vec![1; 3]; 3],
            test_group_counts: vec![vec![1; 3]; 3],
            ..SynthConfig::synth_waterbirds()
        };
        assert_eq!(
            cfg.group_mean(1, 2),
            vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0]
        );
        let split = generate(&cfg).unwrap();
        assert_eq!(split.train.group_count(), 9);
        assert_eq!(split.train.groups()[5], 5);
    }
}
