use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_batchmoe"))
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path
}

const MINIMAL: &str = r#"
[model]
num_layers = 2
num_experts = 4
top_k = 1

[policy]
mode = "lat"
drop_count = 2

[schedule]
batch_size = 3
num_batches = 1
prompt_len = 2
decode_steps = 2
seed = 5
"#;

#[test]
fn simulate_minimal_config_record_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), MINIMAL);
    let out = dir.path().join("out");
    let status = bin()
        .args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "simulate"])
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));

    // prefill: 3 sequences x 2 prompt tokens; decode: 2 steps of 3 tokens; 2 layers, k = 1
    let trace = fs::read_to_string(out.join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 2 * (3 * 2 + 2 * 3));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["seed"], 5);
    let csv = fs::read_to_string(out.join("divergence.csv")).unwrap();
    assert!(csv.starts_with("x,series,value\n"));
}

#[test]
fn drop_clipping_is_reported_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &MINIMAL.replace("drop_count = 2", "drop_count = 9"));
    let out = dir.path().join("out");
    let status = bin()
        .args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "simulate"])
        .status()
        .unwrap();
    assert!(status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let warnings = manifest["warnings"].as_array().unwrap();
    assert_eq!(warnings.len(), 1);
    assert!(warnings[0].as_str().unwrap().contains("clipped"));
}

#[test]
fn simulate_then_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let ana = dir.path().join("ana");
    assert!(bin()
        .args(["--seed", "3", "--out", sim.to_str().unwrap(), "simulate"])
        .status()
        .unwrap()
        .success());
    let out = bin()
        .args([
            "--out",
            ana.to_str().unwrap(),
            "analyze",
            sim.join("trace.jsonl").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = String::from_utf8(out.stdout).unwrap();
    assert!(report.contains("skew ratio"));
    for f in ["frequencies.csv", "reduction.csv", "activation_stats.json", "report.txt", "manifest.json"] {
        assert!(ana.join(f).exists(), "{f} missing");
    }
}

#[test]
fn analyze_reports_the_bad_line() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    assert!(bin()
        .args(["--out", sim.to_str().unwrap(), "simulate"])
        .status()
        .unwrap()
        .success());
    let text = fs::read_to_string(sim.join("trace.jsonl")).unwrap();
    let mut lines: Vec<&str> = text.lines().take(5).collect();
    let cut = &lines[3][..lines[3].len() / 2];
    lines[3] = cut;
    let broken = dir.path().join("broken.jsonl");
    fs::write(&broken, lines.join("\n")).unwrap();

    let out = bin()
        .args(["--out", dir.path().join("x").to_str().unwrap(), "analyze", broken.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("line 4"), "{err}");
}

#[test]
fn bad_config_key_names_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[model]\nnum_layers = 2\nnum_expertz = 4\n");
    let out = bin()
        .args(["--config", cfg.to_str().unwrap(), "simulate"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn costmodel_with_table_and_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let table = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/decode_breakdown.csv");
    let out = dir.path().join("cost");
    let res = bin()
        .args([
            "--format",
            "jsonl",
            "--out",
            out.to_str().unwrap(),
            "costmodel",
            "--calibration",
            table.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report = String::from_utf8(res.stdout).unwrap();
    assert!(report.contains("speedup 8->4 at batch 8"));
    let first = fs::read_to_string(out.join("speedup.jsonl")).unwrap();
    let row: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert!(row["x"].is_number() && row["series"].is_string() && row["value"].is_number());
    assert!(out.join("calibration.json").exists());
}

#[test]
fn layer_window_ablation_has_one_row_per_window() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[ablation]\nseeds = 2\nbatch_size = 2\nwindow = 2\n[schedule]\nprompt_len = 2\ndecode_steps = 2\n",
    );
    let out = dir.path().join("ab");
    assert!(bin()
        .args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "ablate", "layer-window"])
        .status()
        .unwrap()
        .success());
    let csv = fs::read_to_string(out.join("ablation-layer-window.csv")).unwrap();
    // eight layers, window two: seven windows, two series each
    assert_eq!(csv.lines().filter(|l| l.contains(",mean_l2,")).count(), 7);
}

#[test]
fn unknown_ablation_is_rejected() {
    let out = bin().args(["ablate", "bogus"]).output().unwrap();
    assert!(!out.status.success());
}
