use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seeds = [3]
batch_size = 4
metrics = ["patch_cosine", "attention_js", "attention_flow"]
plot_samples = 1

[model]
source = "random"
architecture = "toy"

[dataset]
kind = "synthetic"
count = 8
image_size = 32
classes = 2

[calibration]
samples = 4

[stats]
bootstrap_resamples = 50
permutations = 50

[[interventions]]
kind = "zero"

[[interventions]]
kind = "mean_sub"

[[tasks]]
kind = "correspondence"
pairs = 3
"#;

fn cli(args: &[&str], cwd: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_ablate-lab"))
        .args(args)
        .current_dir(cwd)
        .env_remove("ABLATE_LAB_CACHE")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn run_report_plots_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    cli(&["--threads", "2", "run", "--config", "exp.toml", "--out", "a"], dir.path());
    cli(&["run", "--config", "exp.toml", "--out", "b", "--batch-size", "4"], dir.path());
    let a = std::fs::read(dir.path().join("a/report.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/report.json")).unwrap();
    assert_eq!(a, b);
    let report: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["provenance"]["seeds"], serde_json::json!([3]));

    let csv = cli(&["report", "a", "--format", "csv"], dir.path());
    let csv = String::from_utf8(csv.stdout).unwrap();
    assert!(csv.starts_with("model,intervention,task,metric,value,ci_lo,ci_hi,delta_vs_full,p_value,seed,config_hash"));

    let plots = cli(&["plots", "a"], dir.path());
    let text = String::from_utf8(plots.stdout).unwrap();
    assert!(text.contains("heatmap_seed3.svg"), "{text}");
    assert!(dir.path().join("a/plots/pca_rgb.png").is_file());
}

#[test]
fn seed_override_changes_provenance() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    cli(&["run", "--config", "exp.toml", "--out", "o", "--seed", "11"], dir.path());
    let r: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("o/report.json")).unwrap()).unwrap();
    assert_eq!(r["provenance"]["seeds"], serde_json::json!([11]));
    assert!(r["rows"].as_array().unwrap().iter().all(|row| row["seed"] == 11));
}

#[test]
fn calibrate_then_reference() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    let out = cli(&["calibrate", "--config", "exp.toml", "--out", "cal"], dir.path());
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("calibration "));
    assert!(dir.path().join("cal/calibration.tarc").is_file());
    let with_ref = CONFIG
        .replace("[calibration]\nsamples = 4\n", "")
        .replace("kind = \"mean_sub\"", "kind = \"mean_sub\"\ncalibration_ref = \"cal/calibration\"");
    std::fs::write(dir.path().join("ref.toml"), with_ref).unwrap();
    cli(&["run", "--config", "ref.toml", "--out", "r"], dir.path());
}

#[test]
fn pairs_manifest_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    cli(&["pairs", "--config", "exp.toml", "--out", "p1", "--count", "5"], dir.path());
    cli(&["pairs", "--config", "exp.toml", "--out", "p2", "--count", "5"], dir.path());
    let a = std::fs::read(dir.path().join("p1/pairs.json")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("p2/pairs.json")).unwrap());
    let m: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(m["pairs"].as_array().unwrap().len(), 5);
}

#[test]
fn missing_calibration_fails_before_running() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), CONFIG.replace("[calibration]\nsamples = 4\n", "")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ablate-lab"))
        .args(["run", "--config", "exp.toml", "--out", "x"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("calibration"));
    assert!(!dir.path().join("x/report.json").exists());
}
