use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn tiil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tiil")).args(args).output().expect("spawn tiil")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn synth(dir: &Path) -> PathBuf {
    let out = dir.join("bench");
    let o = tiil(&["dataset", "synth", "--edits", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn stats_on_mini_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture("mini_manifest.jsonl");
    let o = tiil(&["dataset", "stats", "--manifest", manifest.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let s = &read_json(&dir.path().join("stats.json"))["stats"];
    assert_eq!(s["total"], 12);
    assert_eq!(s["by_label"]["consistent"], 6);
    assert_eq!(s["by_label"]["inconsistent"], 6);
    for t in ["orig_orig", "edit_editText", "orig_editText", "edit_origText"] {
        assert_eq!(s["by_pair_type"][t], 3, "{t}");
    }
    assert_eq!(s["by_region_bucket"]["none"], 6);
    assert_eq!(s["by_region_bucket"]["small"], 2);
    assert_eq!(s["by_source"]["real"], 3);
}

#[test]
fn analyze_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let bench = synth(dir.path());
    let records = std::fs::read_to_string(bench.join("manifest.jsonl")).unwrap();
    let first: Value = serde_json::from_str(records.lines().next().unwrap()).unwrap();
    let image = bench.join(first["image_path"].as_str().unwrap());
    let out = dir.path().join("analysis");
    let o = tiil(&[
        "analyze",
        "--image",
        image.to_str().unwrap(),
        "--text",
        first["caption"].as_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["result.json", "mask.png", "mask_intermediate.png", "edited.png", "overlay.png"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let r = read_json(&out.join("result.json"));
    let score = r["score"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&score));
    assert!(r["words"].is_array());
}

#[test]
fn evaluate_and_ablate_on_synthetic_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let bench = synth(dir.path());
    let manifest = bench.join("manifest.jsonl");

    let out = dir.path().join("eval");
    let o = tiil(&["evaluate", "--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = read_json(&out.join("metrics.json"));
    let miou = m["value"]["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));
    assert_eq!(m["value"]["rows"].as_array().unwrap().len(), 4);

    let out = dir.path().join("ablate");
    let o = tiil(&[
        "ablate",
        "--manifest",
        manifest.to_str().unwrap(),
        "--strategies",
        "0.1,mean",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let tables = read_json(&out.join("metrics.json"))["value"]["tables"].clone();
    let tables = tables.as_array().unwrap();
    assert_eq!(tables.len(), 1);
    assert_eq!(tables[0]["axis"], "threshold");
    assert_eq!(tables[0]["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&tiil(&["analyze", "--image", "x.png"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.png");
    let out = dir.path().join("o");
    let o = tiil(&["analyze", "--image", missing.to_str().unwrap(), "--text", "a cat", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unavailable_backend_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let bench = synth(dir.path());
    let out = dir.path().join("o");
    let o = tiil(&[
        "evaluate",
        "--manifest",
        bench.join("manifest.jsonl").to_str().unwrap(),
        "--backend",
        "diffusion:sd-2-inpainting",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3);
    let o = tiil(&["evaluate", "--manifest", "m.jsonl", "--backend", "stable-diffusion", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn malformed_manifest_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("bad.jsonl");
    let good = std::fs::read_to_string(fixture("mini_manifest.jsonl")).unwrap();
    std::fs::write(&manifest, format!("{good}{{not json\n")).unwrap();
    let out = dir.path().join("o");
    let o = tiil(&["dataset", "stats", "--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    let s = read_json(&out.join("stats.json"));
    assert_eq!(s["malformed_lines"].as_array().unwrap().len(), 1);
    assert_eq!(s["stats"]["total"], 12);
}
