use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ganprotect"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// A data root holding the directories and files the sample configs name.
/// Validation checks paths only, so the files can be empty.
fn fake_data_root() -> tempfile::TempDir {
    let root = tempfile::tempdir().unwrap();
    for d in ["cifar-10-batches-bin", "stl10_binary"] {
        std::fs::create_dir(root.path().join(d)).unwrap();
    }
    std::fs::write(root.path().join("vgg16_features.safetensors"), b"").unwrap();
    root
}

#[test]
fn sample_configs_validate() {
    let root = fake_data_root();
    let mut seen = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "conf") {
            run_ok(bin().env("GANPROTECT_DATA", root.path()).arg("validate").arg("--config").arg(&path));
            seen += 1;
        }
    }
    assert!(seen >= 5, "only {seen} sample configs found");
}

#[test]
fn validate_lists_every_problem_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    std::fs::write(&cfg, "pipeline = teleport\nout = x\ncyclegan.lamda = 0.4\n").unwrap();
    let out = bin().arg("validate").arg("--config").arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 1") && err.contains("teleport"), "{err}");
    assert!(err.contains("line 3") && err.contains("cyclegan.lamda"), "{err}");
}

#[test]
fn empty_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.conf");
    std::fs::write(&cfg, "").unwrap();
    let out = bin().arg("validate").arg("--config").arg(&cfg).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn synth_then_self_ssim_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("imgs");
    run_ok(bin().args(["synth", "--count", "6", "--side", "24", "--out"]).arg(&data));
    let report = dir.path().join("report.json");
    let d = data.to_str().unwrap();
    run_ok(bin().args(["metrics", "ssim", "--ref", d, "--test", d, "--out"]).arg(&report));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["mean_ssim"].as_f64(), Some(1.0), "{json}");
    let manifest = dir.path().join("report.run").join("manifest.json");
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(manifest).unwrap()).unwrap();
    assert_eq!(m["status"], "succeeded");
}

#[test]
fn cifar_layout_synth_loads_as_dataset() {
    let root = tempfile::tempdir().unwrap();
    run_ok(
        bin()
            .args(["synth", "--format", "cifar10", "--count", "20", "--split", "test", "--out"])
            .arg(root.path()),
    );
    let out_dir = root.path().join("run");
    let out = run_ok(
        bin()
            .env("GANPROTECT_DATA", root.path())
            .args(["metrics", "ssim", "--ref", "cifar10", "--test", "cifar10", "--out"])
            .arg(&out_dir),
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("metrics.mean_ssim"));
}

#[test]
fn failed_run_exits_nonzero_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = bin()
        .args(["metrics", "ssim", "--ref", "synthetic:2:4:16:1", "--test", "synthetic:2:4:24:1", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["status"], "failed");
    assert!(m["error"].is_string());
}
