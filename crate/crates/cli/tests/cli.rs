use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csvit_core::CsvMap;

fn csvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csvit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = csvit(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

struct Hemi {
    mesh: PathBuf,
    atlas: PathBuf,
    map: PathBuf,
}

fn hemisphere(dir: &Path, name: &str, seed: u64, k: usize) -> Hemi {
    let mesh = dir.join("ico3.mesh");
    if !mesh.exists() {
        ok(&["mesh", "build", "--level", "3", "--out", p(&mesh)]);
    }
    let raw = dir.join(format!("{name}.raw.atlas"));
    let atlas = dir.join(format!("{name}.atlas"));
    let map = dir.join(format!("{name}.csvmap"));
    let seed = seed.to_string();
    let k = k.to_string();
    ok(&["atlas", "synth", "--mesh", p(&mesh), "--rois", "10", "--wall-frac", "0.1", "--seed", &seed, "--out", p(&raw)]);
    ok(&["atlas", "clean", "--mesh", p(&mesh), "--atlas", p(&raw), "--threshold", "0.1", "--out", p(&atlas)]);
    ok(&["partition", "--mesh", p(&mesh), "--atlas", p(&atlas), "--k-total", &k, "--seed", "0", "--out", p(&map)]);
    Hemi { mesh, atlas, map }
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let h = hemisphere(dir.path(), "lh", 1, 40);
    let out = ok(&["validate", "--csvmap", p(&h.map), "--mesh", p(&h.mesh), "--atlas", p(&h.atlas)]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("check=roi_pure passed=true"));
    assert!(text.contains("duplicated_vertices=0"));

    // Move one vertex into a CSV of a different ROI.
    let mut map = CsvMap::load(&h.map).unwrap();
    let v = map.csv_of.iter().position(Option::is_some).unwrap();
    let own = map.csv_of[v].unwrap();
    let foreign = (0..map.num_csvs()).find(|&c| map.roi_of_csv[c] != map.roi_of_csv[own]).unwrap();
    map.csv_of[v] = Some(foreign);
    let bad = dir.path().join("bad.csvmap");
    fs::write(&bad, map.to_bytes().unwrap()).unwrap();
    let out = csvit(&["validate", "--csvmap", p(&bad), "--mesh", p(&h.mesh), "--atlas", p(&h.atlas)]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("check=roi_pure passed=false"), "{text}");
    assert!(text.contains("failed=") && text.contains("roi_pure"));

    // Face-based mode reports duplication and does not fail.
    let report = dir.path().join("face.json");
    let out = ok(&[
        "validate", "--csvmap", p(&h.map), "--mesh", p(&h.mesh), "--atlas", p(&h.atlas),
        "--face-based", "--report", p(&report),
    ]);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert!(json["duplicated_vertices"].as_u64().unwrap() > 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("face_based=true"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(csvit(&[]).status.code(), Some(2));
    assert_eq!(csvit(&["partition", "--mesh"]).status.code(), Some(2));
    assert_eq!(csvit(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        csvit(&["validate", "--csvmap", "/nonexistent/a", "--mesh", "/nonexistent/b", "--atlas", "/nonexistent/c"])
            .status
            .code(),
        Some(2)
    );
    let dir = tempfile::tempdir().unwrap();
    let mesh = dir.path().join("m");
    ok(&["mesh", "build", "--level", "1", "--out", p(&mesh)]);
    let out = csvit(&["atlas", "clean", "--mesh", p(&mesh), "--atlas", p(&mesh), "--threshold", "1.5", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn version_and_config_printing() {
    let out = ok(&["--version"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
    let out = ok(&["--print-config"]);
    let cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["fragment_threshold"], 0.1);
    assert_eq!(cfg["model"]["dim"], 96);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    fs::write(&path, r#"{"model": {"depth": 1}}"#).unwrap();
    let out = ok(&["--config", p(&path), "--print-config"]);
    let cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["model"]["depth"], 1);
    fs::write(&path, r#"{"nope": 1}"#).unwrap();
    assert_eq!(csvit(&["--config", p(&path), "--print-config"]).status.code(), Some(2));
}

#[test]
fn outputs_are_byte_identical_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let h = hemisphere(dir.path(), "lh", 3, 40);
    let again = dir.path().join("again.csvmap");
    ok(&[
        "--threads", "2", "partition", "--mesh", p(&h.mesh), "--atlas", p(&h.atlas), "--k-total", "40",
        "--out", p(&again),
    ]);
    assert_eq!(fs::read(&h.map).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn plan_prints_json() {
    let dir = tempfile::tempdir().unwrap();
    let h = hemisphere(dir.path(), "lh", 2, 40);
    let out = ok(&["plan", "--atlas", p(&h.atlas), "--k-total", "40", "--mesh", p(&h.mesh), "--json"]);
    let plan: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let total: u64 = plan["counts"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total, 40);
}

#[test]
fn gradcheck_passes_on_tiny_model() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("gc.json");
    let out = ok(&["gradcheck", "--seed", "3", "--out", p(&out_path)]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("max_rel_error="));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(&out_path).unwrap()).unwrap();
    assert!(r["max_rel_error"].as_f64().unwrap() < 1e-4);
    assert!(r["checked"].as_u64().unwrap() >= 200);
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let lh = hemisphere(d, "lh", 1, 40);
    let rh = hemisphere(d, "rh", 2, 40);
    let index = d.join("table.idx");
    ok(&["tokenize", "--csvmap-left", p(&lh.map), "--csvmap-right", p(&rh.map), "--out", p(&index)]);
    let data = d.join("data");
    ok(&[
        "synth-data", "--index", p(&index), "--mesh", p(&lh.mesh), "--out", p(&data), "--subjects", "120",
        "--seed", "5",
    ]);
    let batch = d.join("batch.bin");
    ok(&[
        "tokenize", "--csvmap-left", p(&lh.map), "--csvmap-right", p(&rh.map), "--out", p(&index),
        "--features", p(&data), "--batch-out", p(&batch),
    ]);
    assert!(fs::metadata(&batch).unwrap().len() > 0);

    let cfg = d.join("run.json");
    fs::write(
        &cfg,
        r#"{"model": {"dim": 8, "depth": 1, "heads": 2, "mlp_ratio": 2.0, "dropout": 0.0},
            "train": {"epochs": 6, "batch_size": 16}}"#,
    )
    .unwrap();
    let report = d.join("report.json");
    let ckpts = d.join("ckpt");
    let out = ok(&[
        "--config", p(&cfg), "train", "--data", p(&data), "--index", p(&index), "--folds", "4", "--seed", "1",
        "--report", p(&report), "--checkpoints", p(&ckpts),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean"));
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["report"]["folds"].as_array().unwrap().len(), 4);
    assert_eq!(json["model"]["num_tokens"], 80);
    for f in 0..4 {
        let ck = csvit_nn::Checkpoint::load(&ckpts.join(format!("fold{f}.ckpt"))).unwrap();
        assert_eq!(ck.meta.model.num_tokens, 80);
        assert!(ck.meta.stats.is_some());
    }
    let out = ok(&["report", "--report", p(&report)]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("fold"));

    // Same inputs and seed give an identical report file.
    let report2 = d.join("report2.json");
    ok(&[
        "--config", p(&cfg), "train", "--data", p(&data), "--index", p(&index), "--folds", "4", "--seed", "1",
        "--report", p(&report2),
    ]);
    assert_eq!(fs::read(&report).unwrap(), fs::read(&report2).unwrap());

    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.is_empty() || stderr.lines().all(|l| l.starts_with("level=")));
}
