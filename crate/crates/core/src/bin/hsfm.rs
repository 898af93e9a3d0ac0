use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hsfm::runner::{run, Command, RunConfig};

#[derive(Parser)]
#[command(
    name = "hsfm",
    version,
    about = "Hard-set-guided feature-space meta-learning on frozen embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic train/val/test split as HSFM-FS files.
    GenData(Common),
    /// Train a linear head by full-batch ERM from zero.
    TrainErm(Common),
    /// Retrain a head on a balanced validation subset.
    TrainDfr(Common),
    /// Run HSFM from an ERM head and export the learned support set.
    TrainHsfm(Common),
    /// Evaluate a head checkpoint on a dataset file.
    Evaluate(Common),
    /// Run HSFM over a list of T or support-size values.
    Sweep(Common),
    /// Check the meta-gradient against finite differences.
    CheckGrad(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// HSFM preset name (overrides the config's `preset`).
    #[arg(long)]
    preset: Option<String>,
    /// Output directory (overrides the config's `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seed (overrides the config's `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HSFM_LOG", "warn")).init();
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::GenData(a) => (Command::GenData, a),
        Cmd::TrainErm(a) => (Command::TrainErm, a),
        Cmd::TrainDfr(a) => (Command::TrainDfr, a),
        Cmd::TrainHsfm(a) => (Command::TrainHsfm, a),
        Cmd::Evaluate(a) => (Command::Evaluate, a),
        Cmd::Sweep(a) => (Command::Sweep, a),
        Cmd::CheckGrad(a) => (Command::CheckGrad, a),
    };
    match execute(command, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hsfm {}: {e}", command.name());
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn execute(command: Command, args: Common) -> hsfm::Result<()> {
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let mut cfg = RunConfig::load(&args.config)?;
    if args.preset.is_some() {
        cfg.preset = args.preset;
    }
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    let out = args
        .out
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("hsfm-out"));
    let output = run(command, &cfg, &out)?;
    let text = serde_json::to_string_pretty(&output.summary).expect("json serializes");
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    let _ = writeln!(std::io::stdout().lock(), "{text}");
    Ok(())
}
