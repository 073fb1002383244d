//! `tiil`: analyze image-caption pairs, evaluate and ablate over manifests,
//! and build or inspect datasets.
//!
//! Exit codes: 0 ok, 1 internal error, 2 usage, 3 backend, 4 data.

mod analyze;
mod dataset;
mod evaluate;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tiil_core::backends::BackendSpec;
use tiil_core::{Bundle, PipelineConfig};

use crate::failure::Failure;

#[derive(Parser, Debug)]
#[command(name = "tiil", version, about = "Text-image inconsistency localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Localize the inconsistency of one image-caption pair.
    Analyze(analyze::AnalyzeArgs),
    /// Localization and detection metrics over a manifest.
    Evaluate(evaluate::EvaluateArgs),
    /// Ablation tables over a manifest.
    Ablate(evaluate::AblateArgs),
    /// Dataset construction and statistics.
    #[command(subcommand)]
    Dataset(dataset::DatasetCommand),
}

/// Options shared by every command that runs the pipeline.
#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// `synthetic` or `diffusion:<model-id>`.
    #[arg(long, default_value = "synthetic")]
    pub backend: String,
    /// Seed of the backend's own weights.
    #[arg(long, default_value_t = 0)]
    pub backend_seed: u64,
    /// Seed of alignment and mask noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub n_noises: Option<usize>,
    /// Worker threads for batch commands.
    #[arg(long, default_value_t = default_jobs())]
    pub jobs: usize,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

impl RunArgs {
    pub fn bundle(&self) -> Result<Bundle, Failure> {
        let spec = BackendSpec::parse(&self.backend).map_err(|e| Failure::Usage(e.to_string()))?;
        Bundle::load(&spec, self.backend_seed).map_err(|e| Failure::Backend(e.to_string()))
    }

    pub fn config(&self) -> Result<PipelineConfig, Failure> {
        let mut cfg = if self.backend == "synthetic" {
            PipelineConfig::synthetic()
        } else {
            PipelineConfig::default()
        };
        if let Some(v) = self.iterations {
            cfg.align.iterations = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.align.learning_rate = v;
        }
        if let Some(v) = self.gamma {
            cfg.align.gamma = v;
        }
        if let Some(v) = self.n_noises {
            cfg.mask.n_noises = v;
        }
        cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

pub fn create_out_dir(out: &PathBuf) -> Result<(), Failure> {
    std::fs::create_dir_all(out).map_err(|e| Failure::Internal(format!("cannot create {}: {e}", out.display())))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Analyze(a) => analyze::run(&a),
        Command::Evaluate(a) => evaluate::run_evaluate(&a),
        Command::Ablate(a) => evaluate::run_ablate(&a),
        Command::Dataset(c) => dataset::run(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
