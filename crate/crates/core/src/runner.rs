//! Config-driven commands shared by the `hsfm` binary and the FFI layer.
//!
//! A [`RunConfig`] is loaded from JSON, resolved (presets expanded, the
//! run seed pushed into every component, paths made absolute), validated for
//! the command at hand and then executed. Every command writes the resolved
//! config to `config.json` in its output directory; feeding that file back in
//! reproduces the run.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::featurestore::{read_features, write_features, DatasetSplit, FeatureDataset};
use crate::gradcheck::{descent_step, random_instance, run_suite};
use crate::linhead::{
    erm_train, evaluate, read_head, write_head, EvalReport, GdOptions, LinearHead,
};
use crate::metaopt::{
    class_displacements, dfr_baseline, export_support, hsfm_train, Balance, HsfmConfig,
    MetaGradMode, SupportSet,
};
use crate::presets::{hsfm_preset, preset_names};
use crate::synthgen::{generate, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GenData,
    TrainErm,
    TrainDfr,
    TrainHsfm,
    Evaluate,
    Sweep,
    CheckGrad,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::GenData,
        Command::TrainErm,
        Command::TrainDfr,
        Command::TrainHsfm,
        Command::Evaluate,
        Command::Sweep,
        Command::CheckGrad,
    ];

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainErm => "train-erm",
            Command::TrainDfr => "train-dfr",
            Command::TrainHsfm => "train-hsfm",
            Command::Evaluate => "evaluate",
            Command::Sweep => "sweep",
            Command::CheckGrad => "check-grad",
        }
    }
}

/// Where the train/val/test splits come from. Exactly one field must be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth_preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub files: Option<SplitFiles>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFiles {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DfrInit {
    /// Start from the ERM head (`init_head`, or ERM trained with `erm`).
    #[default]
    Erm,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DfrSettings {
    #[serde(default = "DfrSettings::default_steps")]
    pub steps: usize,
    #[serde(default = "DfrSettings::default_lr")]
    pub lr: f64,
    #[serde(default = "DfrSettings::default_balance")]
    pub balance: Balance,
    #[serde(default)]
    pub init: DfrInit,
    #[serde(default)]
    pub seed: u64,
}

impl DfrSettings {
    fn default_steps() -> usize {
        500
    }
    fn default_lr() -> f64 {
        0.1
    }
    fn default_balance() -> Balance {
        Balance::ByGroup
    }
}

impl Default for DfrSettings {
    fn default() -> Self {
        Self {
            steps: Self::default_steps(),
            lr: Self::default_lr(),
            balance: Self::default_balance(),
            init: DfrInit::Erm,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "T", alias = "inner_steps")]
    InnerSteps,
    #[serde(rename = "support_per_class")]
    SupportPerClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeedPolicy {
    /// Every point uses the run seed.
    #[default]
    Shared,
    /// Point `i` uses `seed + i`.
    Offset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSettings {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
    #[serde(default)]
    pub seed_policy: SeedPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Inject {
    #[default]
    None,
    /// Flip the sign of the Hessian-vector product in the reverse pass.
    HvpSignFlip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckGradSettings {
    #[serde(default = "CheckGradSettings::default_instances")]
    pub instances: usize,
    #[serde(default = "CheckGradSettings::default_descent")]
    pub descent_instances: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub inject: Inject,
}

impl CheckGradSettings {
    fn default_instances() -> usize {
        20
    }
    fn default_descent() -> usize {
        10
    }
}

impl Default for CheckGradSettings {
    fn default() -> Self {
        Self {
            instances: Self::default_instances(),
            descent_instances: Self::default_descent(),
            seed: 0,
            inject: Inject::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSettings {
    pub head: PathBuf,
    pub data: PathBuf,
}

/// Benchmark ERM: 100 full-batch steps at lr 0.1 from a zero head.
pub fn default_erm() -> GdOptions {
    GdOptions::new(100, 0.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSource>,
    #[serde(default = "default_erm")]
    pub erm: GdOptions,
    /// HSFM preset name; `hsfm` entries override its fields.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub hsfm: Map<String, Value>,
    #[serde(default)]
    pub dfr: DfrSettings,
    /// Starting head for train-hsfm, train-dfr and sweep. ERM is trained from
    /// zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_head: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluate: Option<EvaluateSettings>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSettings>,
    #[serde(default)]
    pub check_grad: CheckGradSettings,
    /// Overrides the synthetic data, HSFM, DFR and check-grad seeds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            erm: default_erm(),
            preset: None,
            hsfm: Map::new(),
            dfr: DfrSettings::default(),
            init_head: None,
            evaluate: None,
            sweep: None,
            check_grad: CheckGradSettings::default(),
            seed: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// Parse a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(files) = self.data.as_mut().and_then(|d| d.files.as_mut()) {
            fix(&mut files.train);
            fix(&mut files.val);
            fix(&mut files.test);
        }
        if let Some(p) = self.init_head.as_mut() {
            fix(p);
        }
        if let Some(ev) = self.evaluate.as_mut() {
            fix(&mut ev.head);
            fix(&mut ev.data);
        }
        if let Some(p) = self.out_dir.as_mut() {
            fix(p);
        }
    }

    /// Expand presets and push the run seed down. The result has no preset
    /// references left and resolves to itself.
    pub fn resolve(&self) -> Result<Self> {
        let mut out = self.clone();
        let mut hsfm = self.hsfm_config()?;
        if let Some(seed) = self.seed {
            hsfm.seed = seed;
            out.dfr.seed = seed;
            out.check_grad.seed = seed;
        }
        out.preset = None;
        out.hsfm = match serde_json::to_value(&hsfm).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("struct serializes to an object"),
        };
        if let Some(data) = out.data.as_mut() {
            if let Some(name) = data.synth_preset.take() {
                let synth = SynthConfig::preset(&name)
                    .ok_or_else(|| Error::Config(format!("unknown synthetic preset {name:?}")))?;
                if data.synth.is_some() {
                    return Err(Error::Config(
                        "data: set only one of synth_preset, synth and files".into(),
                    ));
                }
                data.synth = Some(synth);
            }
            if let (Some(seed), Some(synth)) = (self.seed, data.synth.as_mut()) {
                synth.seed = seed;
            }
        }
        Ok(out)
    }

    /// The HSFM settings: the preset (or `synth-default`) with `hsfm`
    /// entries laid over it.
    pub fn hsfm_config(&self) -> Result<HsfmConfig> {
        let base = match &self.preset {
            Some(name) => hsfm_preset(name).ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset {name:?}; known presets: {}",
                    preset_names().join(", ")
                ))
            })?,
            None => HsfmConfig::synth_default(),
        };
        let mut merged = match serde_json::to_value(&base).expect("config serializes") {
            Value::Object(m) => m,
            _ => unreachable!("struct serializes to an object"),
        };
        for (k, v) in &self.hsfm {
            let key = match k.as_str() {
                "T" => "inner_steps",
                "K_H" => "meta_steps",
                "K_hard" => "k_hard",
                other => other,
            };
            merged.insert(key.to_string(), v.clone());
        }
        let cfg: HsfmConfig = serde_json::from_value(Value::Object(merged))
            .map_err(|e| Error::Config(format!("hsfm: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Check that everything `cmd` needs is present and well-formed.
    /// Expects a resolved config.
    pub fn validate_for(&self, cmd: Command) -> Result<()> {
        self.erm.validate()?;
        self.hsfm_config()?;
        if self.dfr.steps == 0 && cmd == Command::TrainDfr {
            log::warn!("dfr.steps is 0; DFR returns its starting head");
        }
        if !(self.dfr.lr.is_finite() && self.dfr.lr >= 0.0) {
            return Err(Error::Config(format!(
                "dfr.lr {} must be >= 0",
                self.dfr.lr
            )));
        }
        if let Some(data) = &self.data {
            let set = [
                data.synth_preset.is_some(),
                data.synth.is_some(),
                data.files.is_some(),
            ];
            if set.iter().filter(|&&b| b).count() != 1 {
                return Err(Error::Config(
                    "data: set exactly one of synth_preset, synth and files".into(),
                ));
            }
            if let Some(synth) = &data.synth {
                synth.validate()?;
            }
            if let Some(files) = &data.files {
                for p in [&files.train, &files.val, &files.test] {
                    require_file(p)?;
                }
            }
        }
        let needs_data = matches!(
            cmd,
            Command::GenData
                | Command::TrainErm
                | Command::TrainDfr
                | Command::TrainHsfm
                | Command::Sweep
        );
        if needs_data && self.data.is_none() {
            return Err(Error::Config(format!("{} needs a data source", cmd.name())));
        }
        if cmd == Command::GenData && self.data.as_ref().is_some_and(|d| d.files.is_some()) {
            return Err(Error::Config(
                "gen-data needs a synthetic data source".into(),
            ));
        }
        if let Some(p) = &self.init_head {
            require_file(p)?;
        }
        match cmd {
            Command::Evaluate => {
                let ev = self
                    .evaluate
                    .as_ref()
                    .ok_or_else(|| Error::Config("evaluate needs an `evaluate` section".into()))?;
                require_file(&ev.head)?;
                require_file(&ev.data)?;
            }
            Command::Sweep => {
                let sw = self
                    .sweep
                    .as_ref()
                    .ok_or_else(|| Error::Config("sweep needs a `sweep` section".into()))?;
                if sw.values.is_empty() {
                    return Err(Error::Config("sweep.values is empty".into()));
                }
                if sw.values.contains(&0) {
                    return Err(Error::Config("sweep values must be at least 1".into()));
                }
            }
            Command::CheckGrad if self.check_grad.instances == 0 => {
                return Err(Error::Config(
                    "check_grad.instances must be at least 1".into(),
                ));
            }
            _ => {}
        }
        Ok(())
    }
}

fn require_file(p: &Path) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} does not exist", p.display())))
    }
}

/// What a command produced.
#[derive(Debug, Clone)]
pub struct CommandOutput {
    pub files: Vec<PathBuf>,
    /// The JSON report also written to disk (printed by the CLI).
    pub summary: Value,
}

/// Resolve, validate and run `cmd`, writing into `out_dir`.
pub fn run(cmd: Command, cfg: &RunConfig, out_dir: &Path) -> Result<CommandOutput> {
    let cfg = cfg.resolve()?;
    cfg.validate_for(cmd)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_path = out_dir.join("config.json");
    write_text(&config_path, &cfg.to_json())?;
    log::info!("{} -> {}", cmd.name(), out_dir.display());
    let mut out = match cmd {
        Command::GenData => gen_data(&cfg, out_dir),
        Command::TrainErm => train_erm(&cfg, out_dir),
        Command::TrainDfr => train_dfr(&cfg, out_dir),
        Command::TrainHsfm => train_hsfm(&cfg, out_dir),
        Command::Evaluate => cmd_evaluate(&cfg, out_dir),
        Command::Sweep => sweep(&cfg, out_dir),
        Command::CheckGrad => check_grad(&cfg, out_dir),
    }?;
    out.files.insert(0, config_path);
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("json serializes");
    s.push('\n');
    write_text(path, &s)
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Load the three splits named by the (resolved) data source.
pub fn load_split(data: &DataSource) -> Result<DatasetSplit> {
    if let Some(synth) = &data.synth {
        return generate(synth);
    }
    if let Some(f) = &data.files {
        return DatasetSplit::new(
            read_features(&f.train)?,
            read_features(&f.val)?,
            read_features(&f.test)?,
        );
    }
    Err(Error::Config("data source has nothing to load".into()))
}

fn data_of(cfg: &RunConfig) -> &DataSource {
    cfg.data.as_ref().expect("validated")
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let synth = data_of(cfg).synth.as_ref().expect("validated");
    let split = generate(synth)?;
    let mut files = Vec::new();
    let mut entries = Map::new();
    for (name, ds) in [
        ("train", &split.train),
        ("val", &split.val),
        ("test", &split.test),
    ] {
        let path = out.join(format!("{name}.hsfm"));
        write_features(&path, ds)?;
        entries.insert(
            name.to_string(),
            json!({
                "path": format!("{name}.hsfm"),
                "rows": ds.len(),
                "sha256": sha256_file(&path)?,
            }),
        );
        files.push(path);
    }
    let manifest = json!({ "synth": synth, "files": entries });
    let manifest_path = out.join("manifest.json");
    write_json(&manifest_path, &manifest)?;
    files.push(manifest_path);
    Ok(CommandOutput {
        files,
        summary: manifest,
    })
}

fn check_head_shape(head: &LinearHead, ds: &FeatureDataset) -> Result<()> {
    if head.class_count() != ds.class_count() || head.dim() != ds.dim() {
        return Err(Error::shape(format!(
            "head is {}x{} but data has C={}, d={}",
            head.class_count(),
            head.dim(),
            ds.class_count(),
            ds.dim()
        )));
    }
    Ok(())
}

/// `head` as it reads back from a checkpoint. Reports and downstream runs
/// use this so that resuming from a written head reproduces them exactly.
fn as_stored(head: &LinearHead) -> Result<LinearHead> {
    head.check_storable()?;
    LinearHead::from_bytes(&head.to_bytes(), Path::new("<memory>"))
}

/// The starting head: `init_head` if given, else ERM from zero.
fn starting_head(cfg: &RunConfig, split: &DatasetSplit) -> Result<LinearHead> {
    match &cfg.init_head {
        Some(p) => {
            let head = read_head(p)?;
            check_head_shape(&head, &split.train)?;
            Ok(head)
        }
        None => as_stored(&erm_train(
            &LinearHead::zeros(split.train.class_count(), split.train.dim()),
            &split.train,
            &cfg.erm,
        )?),
    }
}

fn split_reports(head: &LinearHead, split: &DatasetSplit) -> Result<Value> {
    Ok(json!({
        "train": evaluate(head, &split.train)?,
        "val": evaluate(head, &split.val)?,
        "test": evaluate(head, &split.test)?,
    }))
}

fn train_erm(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let split = load_split(data_of(cfg))?;
    let zero = LinearHead::zeros(split.train.class_count(), split.train.dim());
    let head = erm_train(&zero, &split.train, &cfg.erm)?;
    finish_head(out, &head, &split)
}

fn train_dfr(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let split = load_split(data_of(cfg))?;
    let head0 = match cfg.dfr.init {
        DfrInit::Erm => starting_head(cfg, &split)?,
        DfrInit::Zero => LinearHead::zeros(split.train.class_count(), split.train.dim()),
    };
    let opts = GdOptions::new(cfg.dfr.steps, cfg.dfr.lr);
    let head = dfr_baseline(&head0, &split.val, &opts, cfg.dfr.balance, cfg.dfr.seed)?;
    finish_head(out, &head, &split)
}

fn finish_head(out: &Path, head: &LinearHead, split: &DatasetSplit) -> Result<CommandOutput> {
    let head = as_stored(head)?;
    let report = split_reports(&head, split)?;
    let head_path = out.join("head.hsfh");
    write_head(&head_path, &head)?;
    let report_path = out.join("report.json");
    write_json(&report_path, &report)?;
    Ok(CommandOutput {
        files: vec![head_path, report_path],
        summary: report,
    })
}

fn group_displacements(sup: &SupportSet) -> Vec<Option<f64>> {
    let groups = sup.source_groups();
    let n_groups = groups.iter().copied().max().map_or(0, |g| g + 1);
    let mut total = vec![0.0; n_groups];
    let mut count = vec![0usize; n_groups];
    for (d, &g) in sup.row_displacements().iter().zip(groups) {
        total[g] += d;
        count[g] += 1;
    }
    total
        .iter()
        .zip(&count)
        .map(|(t, &c)| (c > 0).then(|| t / c as f64))
        .collect()
}

/// One HSFM run from `head0`, written into `dir`. Shared by train-hsfm and
/// each sweep point so a one-value sweep reproduces train-hsfm exactly.
fn hsfm_point(
    head0: &LinearHead,
    split: &DatasetSplit,
    hsfm: &HsfmConfig,
    dir: &Path,
) -> Result<(EvalReport, Vec<PathBuf>, Value)> {
    let outcome = hsfm_train(head0, split, hsfm)?;
    let head = as_stored(&outcome.head)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let head_path = dir.join("head.hsfh");
    write_head(&head_path, &head)?;
    let (init_path, opt_path) = export_support(&outcome.support, dir.join("support"))?;
    let trace_path = dir.join("trace.jsonl");
    write_text(&trace_path, &outcome.trace.to_jsonl())?;

    let test = evaluate(&head, &split.test)?;
    let summary = json!({
        "start_test": evaluate(head0, &split.test)?,
        "test": test,
        "val": evaluate(&head, &split.val)?,
        "epochs": outcome.trace.epochs.len(),
        "class_displacement": class_displacements(&outcome.support),
        "group_displacement": group_displacements(&outcome.support),
    });
    let summary_path = dir.join("summary.json");
    write_json(&summary_path, &summary)?;
    Ok((
        test,
        vec![head_path, init_path, opt_path, trace_path, summary_path],
        summary,
    ))
}

fn train_hsfm(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let split = load_split(data_of(cfg))?;
    let head0 = starting_head(cfg, &split)?;
    let mut files = Vec::new();
    if cfg.init_head.is_none() {
        let erm_path = out.join("erm.hsfh");
        write_head(&erm_path, &head0)?;
        files.push(erm_path);
    }
    let started = std::time::Instant::now();
    let (test, point_files, summary) = hsfm_point(&head0, &split, &cfg.hsfm_config()?, out)?;
    log::info!(
        "train-hsfm finished in {:.2?}: test WGA {:.4}, avg {:.4}",
        started.elapsed(),
        test.worst_group_accuracy,
        test.average_accuracy
    );
    files.extend(point_files);
    Ok(CommandOutput { files, summary })
}

fn cmd_evaluate(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let ev = cfg.evaluate.as_ref().expect("validated");
    let head = read_head(&ev.head)?;
    let data = read_features(&ev.data)?;
    check_head_shape(&head, &data)?;
    let report = evaluate(&head, &data)?;
    let value = serde_json::to_value(&report).expect("report serializes");
    let path = out.join("report.json");
    write_json(&path, &value)?;
    Ok(CommandOutput {
        files: vec![path],
        summary: value,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: usize,
    pub wga: Option<f64>,
    pub avg_acc: Option<f64>,
    pub status: String,
}

fn sweep(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let settings = cfg.sweep.as_ref().expect("validated");
    let split = load_split(data_of(cfg))?;
    let head0 = starting_head(cfg, &split)?;
    let base = cfg.hsfm_config()?;
    let axis_name = match settings.axis {
        SweepAxis::InnerSteps => "T",
        SweepAxis::SupportPerClass => "support_per_class",
    };

    let rows: Vec<SweepRow> = settings
        .values
        .par_iter()
        .enumerate()
        .map(|(i, &value)| {
            let mut point = base.clone();
            match settings.axis {
                SweepAxis::InnerSteps => point.inner_steps = value,
                SweepAxis::SupportPerClass => point.support_per_class = value,
            }
            if settings.seed_policy == SeedPolicy::Offset {
                point.seed = base.seed.wrapping_add(i as u64);
            }
            let dir = out.join(format!("{axis_name}-{value}"));
            match hsfm_point(&head0, &split, &point, &dir) {
                Ok((test, _, _)) => SweepRow {
                    value,
                    wga: Some(test.worst_group_accuracy),
                    avg_acc: Some(test.average_accuracy),
                    status: "ok".into(),
                },
                Err(e) => {
                    log::warn!("sweep point {axis_name}={value} failed: {e}");
                    SweepRow {
                        value,
                        wga: None,
                        avg_acc: None,
                        status: format!("error: {e}"),
                    }
                }
            }
        })
        .collect();

    let csv_path = out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&csv_path)
        .map_err(|e| Error::io(&csv_path, std::io::Error::other(e)))?;
    for row in &rows {
        w.serialize(row)
            .map_err(|e| Error::io(&csv_path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let failed = rows.iter().filter(|r| r.status != "ok").count();
    let summary = json!({ "axis": axis_name, "points": rows });
    let summary_path = out.join("summary.json");
    write_json(&summary_path, &summary)?;
    if failed > 0 {
        return Err(Error::Failed(format!(
            "{failed} of {} sweep points failed",
            rows.len()
        )));
    }
    Ok(CommandOutput {
        files: vec![csv_path, summary_path],
        summary,
    })
}

fn check_grad(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let s = &cfg.check_grad;
    let mode = match s.inject {
        Inject::None => MetaGradMode::Exact,
        Inject::HvpSignFlip => MetaGradMode::HvpSignFlip,
    };
    let suite = run_suite(s.instances, s.seed, mode)?;

    let mut rng = ChaCha8Rng::seed_from_u64(s.seed.wrapping_add(1));
    let mut descent = Vec::with_capacity(s.descent_instances);
    for _ in 0..s.descent_instances {
        let inst = random_instance(&mut rng);
        descent.push(descent_step(&inst, 40)?.map(|(eta, before, after)| {
            json!({ "eta": eta, "loss_before": before, "loss_after": after })
        }));
    }
    let descent_ok = descent.iter().all(Option::is_some);
    let failed_cases = suite.cases.iter().filter(|c| !c.passed).count();
    let passed = suite.passed && descent_ok;
    let report = json!({
        "inject": s.inject,
        "passed": passed,
        "zero_unroll_exact": suite.zero_unroll_exact,
        "failed_cases": failed_cases,
        "max_rel_error": suite.cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max),
        "cases": suite.cases,
        "descent": descent,
    });
    let path = out.join("report.json");
    write_json(&path, &report)?;
    if !passed {
        return Err(Error::Failed(format!(
            "meta-gradient check: {failed_cases} of {} cases over tolerance, zero-unroll exact: {}, descent ok: {descent_ok}",
            suite.cases.len(),
            suite.zero_unroll_exact
        )));
    }
    Ok(CommandOutput {
        files: vec![path],
        summary: report,
    })
}
