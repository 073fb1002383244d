use std::collections::HashMap;
use std::path::PathBuf;

use clap::{Args, Subcommand};
use tiil_core::bench::synthetic_benchmark;
use tiil_core::dataset::{generate_pairs, load_edits, resolve, validate_stats, write_manifest};
use tiil_core::io::{read_image, read_mask, write_image};
use tiil_core::{Bundle, Error, Image};

use crate::evaluate::load_records;
use crate::failure::{write_json, Failure};
use crate::{create_out_dir, RunArgs};

#[derive(Subcommand, Debug)]
pub enum DatasetCommand {
    /// Expand base records and an edits file into four pairs per edit.
    Build(BuildArgs),
    /// Count records by label, pair type, region bucket and source.
    Stats(StatsArgs),
    /// Write a planted-inconsistency benchmark rendered by the synthetic backend.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON list of edits.
    #[arg(long)]
    pub edits: PathBuf,
    #[arg(long, default_value = "tiil-out")]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "tiil-out")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of edits; each yields two consistent and two inconsistent pairs.
    #[arg(long, default_value_t = 25)]
    pub edits: usize,
    /// Largest allowed embedding change of a replacement.
    #[arg(long, default_value_t = 8.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0)]
    pub backend_seed: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "tiil-out")]
    pub out: PathBuf,
}

pub fn run(cmd: &DatasetCommand) -> Result<(), Failure> {
    match cmd {
        DatasetCommand::Build(a) => build(a),
        DatasetCommand::Stats(a) => stats(a),
        DatasetCommand::Synth(a) => synth(a),
    }
}

fn data(e: Error) -> Failure {
    Failure::Data(e.to_string())
}

fn build(args: &BuildArgs) -> Result<(), Failure> {
    let (records, base) = load_records(&args.manifest)?;
    let edits = load_edits(&args.edits).map_err(data)?;
    let bundle = args.run.bundle()?;
    let by_id: HashMap<&str, _> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    create_out_dir(&args.out.join("images"))?;

    let mut out = Vec::new();
    for (i, spec) in edits.iter().enumerate() {
        let record = by_id
            .get(spec.base_record.as_str())
            .ok_or_else(|| Failure::Data(format!("edit {i}: unknown base record `{}`", spec.base_record)))?;
        let image: Image = read_image(&resolve(&base, &record.image_path)).map_err(data)?;
        let region_path = resolve(&base, &spec.region_mask);
        let region = read_mask(&region_path).map_err(data)?;
        let edited_rel = PathBuf::from(format!("images/{}_edit{i}.png", record.id));
        let mut base_record = (*record).clone();
        base_record.image_path = absolute(resolve(&base, &record.image_path));
        let mut spec = spec.clone();
        spec.region_mask = absolute(region_path);
        let generated = generate_pairs(&base_record, &image, &region, &spec, &bundle, &edited_rel)
            .map_err(|e| Failure::Data(format!("edit {i}: {e}")))?;
        write_image(&args.out.join(&edited_rel), &generated.edited_image)?;
        out.extend(generated.records.into_iter().map(|mut r| {
            r.id = format!("{}-e{i}", r.id);
            r
        }));
    }
    write_manifest(&args.out.join("manifest.jsonl"), &out)?;
    println!("{} records from {} edits", out.len(), edits.len());
    Ok(())
}

fn absolute(p: PathBuf) -> PathBuf {
    std::path::absolute(&p).unwrap_or(p)
}

fn stats(args: &StatsArgs) -> Result<(), Failure> {
    // Malformed lines are reported but the valid ones are still counted.
    let manifest = tiil_core::dataset::load_manifest(&args.manifest)
        .map_err(|e| Failure::Usage(format!("cannot read manifest: {e}")))?;
    let report = validate_stats(&manifest.records);
    create_out_dir(&args.out)?;
    let value = serde_json::json!({ "stats": report, "malformed_lines": manifest.errors });
    write_json(&args.out.join("stats.json"), &value)?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap_or_default());
    if !manifest.errors.is_empty() {
        for err in &manifest.errors {
            eprintln!("{}:{}: {}", args.manifest.display(), err.line, err.message);
        }
        return Err(Failure::Data(format!("{} malformed manifest line(s)", manifest.errors.len())));
    }
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<(), Failure> {
    let bundle = Bundle::synthetic(args.backend_seed);
    let bench = synthetic_benchmark(&bundle, args.edits, args.gamma, args.seed).map_err(|e| Failure::Usage(e.to_string()))?;
    create_out_dir(&args.out)?;
    let manifest = bench.write(&args.out)?;
    println!("{} records written to {}", bench.records.len(), manifest.display());
    Ok(())
}
