//! Command-line entry point: dataset generation, two-stage training,
//! k-means evaluation, and similarity analysis for cIDFD experiments.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use cidfd::cli::{cmd_analyze, cmd_eval, cmd_gen_data, cmd_train, StageArg};
use cidfd::config::{ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(
    name = "cidfd",
    about = "Background-aware contrastive representation learning for image clustering",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the dataset scale factor in (0, 1].
    #[arg(long)]
    scale: Option<f64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self, cache_bg_features: Option<bool>) -> cidfd::Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config)?.apply_overrides(&Overrides {
            seed: self.seed,
            scale: self.scale,
            out: self.out.clone(),
            cache_bg_features,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the target/background dataset pair (PNG files + CSV manifests).
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Run two-stage training (or one stage at a time).
    Train {
        #[command(flatten)]
        common: Common,
        /// Which stage to run: bg, tg, or both.
        #[arg(long, default_value = "both")]
        stage: StageArg,
        /// Force all pair weights to 1 (the plain-IDFD ablation; skips the
        /// background branch entirely).
        #[arg(long)]
        idfd_baseline: bool,
        /// Precompute the background-feature bank once instead of
        /// re-embedding every augmented view (cheaper desk runs).
        #[arg(long)]
        cache_bg_features: bool,
    },
    /// Extract features, run k-means, and report ACC / NMI / ARI.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint stem to evaluate (default: <output_dir>/checkpoints/tg).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export pair-type similarity histograms and a 2-D projection.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Checkpoint stem to analyze (default: <output_dir>/checkpoints/tg).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run() -> cidfd::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { common } => {
            let cfg = common.resolve(None)?;
            cmd_gen_data(&cfg)?;
            println!("datasets written under {}", cfg.dataset.data_dir.display());
        }
        Command::Train {
            common,
            stage,
            idfd_baseline,
            cache_bg_features,
        } => {
            let cfg = common.resolve(if cache_bg_features { Some(true) } else { None })?;
            cmd_train(&cfg, stage, idfd_baseline)?;
            println!(
                "checkpoints under {}",
                cfg.output_dir.join("checkpoints").display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve(None)?;
            let report = cmd_eval(&cfg, checkpoint.as_deref())?;
            println!(
                "acc = {:.4}  nmi = {:.4}  ari = {:.4}  (k = {}, inertia = {:.3})",
                report.acc, report.nmi, report.ari, report.k, report.inertia
            );
            println!("metrics at {}", cfg.output_dir.join("metrics.json").display());
        }
        Command::Analyze { common, checkpoint } => {
            let cfg = common.resolve(None)?;
            cmd_analyze(&cfg, checkpoint.as_deref())?;
            println!("analysis CSVs under {}", cfg.output_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
