use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde_json::json;
use tiil_core::dataset::{load_manifest, DatasetRecord};
use tiil_core::maskgen::ThresholdStrategy;
use tiil_core::metrics::{
    baseline_clip_detect, evaluate, load_pairs, run_ablations, AblationAxis, AblationGrid, EvalPair, MetricReport,
};
use tiil_core::{Error, Scalar};

use crate::failure::{write_json, Failure};
use crate::{create_out_dir, RunArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Localization,
    Detection,
    All,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = Task::All)]
    pub task: Task,
    #[arg(long, default_value = "tiil-out")]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated axes among denoise, init, threshold. Defaults to all
    /// axes, or to `threshold` alone when --strategies is given.
    #[arg(long)]
    pub axes: Option<String>,
    /// Comma-separated threshold strategies, e.g. `0.1,0.2,mean`.
    #[arg(long)]
    pub strategies: Option<String>,
    #[arg(long, default_value = "tiil-out")]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

/// Loads a manifest, reporting malformed lines on stderr.
pub fn load_records(path: &Path) -> Result<(Vec<DatasetRecord>, PathBuf), Failure> {
    let manifest = load_manifest(path).map_err(|e| match e {
        Error::Io { .. } => Failure::Usage(format!("cannot read manifest: {e}")),
        other => Failure::Data(other.to_string()),
    })?;
    if !manifest.errors.is_empty() {
        for err in &manifest.errors {
            eprintln!("{}:{}: {}", path.display(), err.line, err.message);
        }
        return Err(Failure::Data(format!(
            "{} malformed manifest line(s) in {}",
            manifest.errors.len(),
            path.display()
        )));
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest.records, base))
}

fn load(path: &Path) -> Result<Vec<EvalPair<f64>>, Failure> {
    let (records, base) = load_records(path)?;
    if records.is_empty() {
        return Err(Failure::Data(format!("manifest {} has no records", path.display())));
    }
    load_pairs(&records, &base).map_err(|e| Failure::Data(e.to_string()))
}

pub fn run_evaluate(args: &EvaluateArgs) -> Result<(), Failure> {
    let pairs = load(&args.manifest)?;
    let bundle = args.run.bundle()?;
    let cfg = args.run.config()?;
    let eval = evaluate(&pairs, &bundle, &cfg, args.run.seed, args.run.jobs)?;

    let mut value = json!({ "n_pairs": pairs.len(), "rows": eval.rows });
    if args.task != Task::Detection {
        value["miou"] = json!(eval.miou);
        value["miou_intermediate"] = json!(eval.miou_intermediate);
    }
    if args.task != Task::Localization {
        value["detection"] = json!(eval.detection);
        value["baseline_detection"] = match baseline_clip_detect(&pairs, &bundle) {
            Ok(d) => json!(d),
            Err(e) => json!({ "error": e.to_string() }),
        };
    }
    let report = MetricReport::new("evaluation", value, cfg.to_json(), args.run.seed, &bundle.id);
    create_out_dir(&args.out)?;
    write_json(&args.out.join("metrics.json"), &report)?;

    if let Some(m) = eval.miou {
        println!("mIoU: {m:.4}");
    }
    if let Some(d) = &eval.detection {
        println!("AUC: {:.4}  accuracy: {:.4}  threshold: {:.4}", d.auc, d.accuracy, d.threshold);
    }
    Ok(())
}

pub fn run_ablate(args: &AblateArgs) -> Result<(), Failure> {
    let mut grid = match (&args.axes, &args.strategies) {
        (Some(axes), _) => AblationGrid::<f64>::parse_axes(axes)?,
        (None, Some(_)) => AblationGrid {
            axes: vec![AblationAxis::Threshold],
            ..AblationGrid::default()
        },
        (None, None) => AblationGrid::default(),
    };
    if let Some(s) = &args.strategies {
        grid.thresholds = s
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(ThresholdStrategy::parse)
            .collect::<tiil_core::Result<_>>()?;
        if grid.thresholds.is_empty() {
            return Err(Failure::Usage("--strategies is empty".into()));
        }
    }
    let pairs = load(&args.manifest)?;
    let bundle = args.run.bundle()?;
    let cfg = args.run.config()?;
    let report = run_ablations(&pairs, &bundle, &cfg, &grid, args.run.seed, args.run.jobs)?;

    for t in &report.tables {
        println!("{}", t.axis.as_str());
        for r in &t.rows {
            println!("  {:<16} {:.4}", r.variant, r.miou);
        }
    }
    let value = serde_json::to_value(&report).map_err(|e| Failure::Internal(e.to_string()))?;
    let thresholds: Vec<String> = grid.thresholds.iter().map(|t| t.label()).collect();
    let config = json!({ "base": cfg.to_json(), "thresholds": thresholds, "gamma": cfg.align.gamma.as_f64() });
    let out = MetricReport::new("ablation", value, config, args.run.seed, &bundle.id);
    create_out_dir(&args.out)?;
    write_json(&args.out.join("metrics.json"), &out)
}
