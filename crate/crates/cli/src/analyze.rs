use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::Args;
use tiil_core::io::{overlay_rgb8, read_image, write_image, write_mask};
use tiil_core::pipeline::analyze;
use tiil_core::{BinaryMask, Error, Image};

use crate::failure::{write_json, Failure};
use crate::{create_out_dir, RunArgs};

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub text: String,
    #[arg(long, default_value = "tiil-out")]
    pub out: PathBuf,
    /// Number of words reported.
    #[arg(long, default_value_t = 1)]
    pub top_k: usize,
    #[command(flatten)]
    pub run: RunArgs,
}

pub fn run(args: &AnalyzeArgs) -> Result<(), Failure> {
    let image: Image = read_image(&args.image).map_err(|e| match e {
        Error::Io { .. } => Failure::Usage(format!("cannot read image: {e}")),
        other => Failure::Data(other.to_string()),
    })?;
    let bundle = args.run.bundle()?;
    let mut cfg = args.run.config()?.seeded(args.run.seed);
    cfg.top_k = args.top_k;
    let result = analyze(&image, &args.text, &bundle, &cfg)?;

    create_out_dir(&args.out)?;
    write_mask(&args.out.join("mask.png"), &result.mask)?;
    write_mask(&args.out.join("mask_intermediate.png"), &result.intermediate_mask)?;
    write_image(&args.out.join("edited.png"), &result.edited_image)?;
    let words: Vec<&str> = result.words.iter().map(|w| w.surface.as_str()).collect();
    write_overlay(&args.out.join("overlay.png"), &image, &result.mask, &words.join(", "))?;
    let mut report = result.report_json("mask.png", "edited.png");
    report["metadata"]["seed"] = args.run.seed.into();
    report["metadata"]["backend_seed"] = args.run.backend_seed.into();
    write_json(&args.out.join("result.json"), &report)?;

    println!("score: {:.4}", result.score);
    println!("words: {}", if words.is_empty() { "-".to_string() } else { words.join(", ") });
    println!("mask area: {}", result.mask.area());
    Ok(())
}

/// 8-bit RGB overlay with the detected words in a `tEXt` chunk.
fn write_overlay(path: &Path, image: &Image, mask: &BinaryMask, words: &str) -> Result<(), Failure> {
    let pixels = overlay_rgb8(image, mask)?;
    let io_err = |e: &dyn std::fmt::Display| Failure::Internal(format!("cannot write {}: {e}", path.display()));
    let file = File::create(path).map_err(|e| io_err(&e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width() as u32, image.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.add_text_chunk("words".to_string(), words.to_string()).map_err(|e| io_err(&e))?;
    let mut writer = enc.write_header().map_err(|e| io_err(&e))?;
    writer.write_image_data(&pixels).map_err(|e| io_err(&e))?;
    writer.finish().map_err(|e| io_err(&e))
}
