//! End-to-end checks of the binary: exit codes, file outputs, and the
//! FP_SEED override.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_frostbit"))
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("frostbit-cli-{name}"));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write(path: &Path, content: &str) {
    std::fs::write(path, content).unwrap();
}

fn quick_config() -> &'static str {
    r#"{
        "task": "MRD1",
        "head_hidden": [16, 8],
        "backbone_hidden": 16,
        "backbone_embed": 8,
        "epochs": 2,
        "synth_n": 60,
        "synth_dim": 4,
        "seed": 3
    }"#
}

#[test]
fn generate_writes_both_files() {
    let dir = tmp_dir("generate");
    let prefix = dir.join("toy");
    let out = bin()
        .args(["generate", "--task", "MRD2", "--n", "40", "--dim", "3", "--noise", "0.1", "--seed", "9"])
        .arg("--out-prefix")
        .arg(&prefix)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.join("toy.targets.csv")).unwrap();
    assert!(csv.starts_with("id,task,value_mm"));
    assert_eq!(csv.lines().count(), 41);
    let bin_bytes = std::fs::read(dir.join("toy.features.fpft")).unwrap();
    assert_eq!(&bin_bytes[..4], b"FPFT");
}

#[test]
fn train_runs_and_reports() {
    let dir = tmp_dir("train");
    let cfg = dir.join("cfg.json");
    write(&cfg, quick_config());
    let prefix = dir.join("run");
    let out = bin()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&prefix)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("mse=") && stdout.contains("r2="));

    let metrics = std::fs::read_to_string(dir.join("run.metrics.csv")).unwrap();
    assert!(metrics.starts_with("task,head,loss,gamma,encoding,or,mse,mae,r2"));
    let curves = std::fs::read_to_string(dir.join("run.curves.csv")).unwrap();
    // Header plus one point per epoch.
    assert_eq!(curves.lines().count(), 3);

    // Markdown report from the emitted metrics plus an SVG from the curves.
    let svg_path = dir.join("run.svg");
    let out = bin()
        .arg("report")
        .arg("--in")
        .arg(dir.join("run.metrics.csv"))
        .args(["--format", "markdown"])
        .arg("--curves")
        .arg(&svg_path)
        .arg("--curve-data")
        .arg(dir.join("run.curves.csv"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let md = String::from_utf8(out.stdout).unwrap();
    let first = md.lines().next().unwrap();
    assert_eq!(first.matches('|').count(), 10, "nine columns: {first}");
    let svg = std::fs::read_to_string(&svg_path).unwrap();
    // Two polylines (train, val), each with one point per epoch.
    assert_eq!(svg.matches("<polyline").count(), 2);
    for part in svg.split("<polyline").skip(1) {
        let points = part.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(points.split_whitespace().count(), 2);
    }
}

#[test]
fn fp_seed_overrides_config_and_is_deterministic() {
    let dir = tmp_dir("fpseed");
    let cfg = dir.join("cfg.json");
    write(&cfg, quick_config());
    let run = |seed: &str| -> String {
        let out = bin()
            .arg("train")
            .arg("--config")
            .arg(&cfg)
            .env("FP_SEED", seed)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let a = run("11");
    let b = run("11");
    let c = run("12");
    assert_eq!(a, b, "same FP_SEED must reproduce bit-identical output");
    assert_ne!(a, c, "different FP_SEED must change the run");

    let out = bin()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .env("FP_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_errors_exit_2() {
    let dir = tmp_dir("cfgerr");
    let cfg = dir.join("bad.json");
    // mse with encoding enabled is an invalid pair.
    write(
        &cfg,
        r#"{"task": "MRD1", "encoding_enabled": true, "loss": "mse"}"#,
    );
    let out = bin().arg("train").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = dir.join("unknown.json");
    write(&cfg, r#"{"task": "MRD1", "no_such_field": 1}"#);
    let out = bin().arg("train").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let dir = tmp_dir("dataerr");
    let out = bin()
        .arg("report")
        .arg("--in")
        .arg(dir.join("missing.csv"))
        .args(["--format", "csv"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    let bad = dir.join("bad.csv");
    write(&bad, "not,the,header\n");
    let out = bin().arg("report").arg("--in").arg(&bad).args(["--format", "csv"]).output().unwrap();
    assert_eq!(out.status.code(), Some(3));

    // Malformed FPFT features referenced from a train config.
    let feat = dir.join("feat.fpft");
    std::fs::write(&feat, b"NOPE").unwrap();
    let targets = dir.join("targets.csv");
    write(&targets, "id,task,value_mm\n0,MRD1,2.5\n");
    let cfg = dir.join("cfg.json");
    write(
        &cfg,
        &format!(
            r#"{{"task": "MRD1", "data_features": {:?}, "data_targets": {:?}}}"#,
            feat.to_str().unwrap(),
            targets.to_str().unwrap()
        ),
    );
    let out = bin().arg("train").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn numeric_failures_exit_4() {
    let dir = tmp_dir("numeric");
    let cfg = dir.join("diverge.json");
    // An absurd learning rate drives the squared error past f64 range.
    write(
        &cfg,
        r#"{
            "task": "MRD1",
            "head_hidden": [16, 8],
            "backbone_hidden": 16,
            "backbone_embed": 8,
            "epochs": 20,
            "synth_n": 60,
            "synth_dim": 4,
            "seed": 3,
            "lr": 1e60
        }"#,
    );
    let out = bin().arg("train").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("numeric failure"));
}

#[test]
fn ablate_emits_twenty_reproducible_rows() {
    let dir = tmp_dir("ablate");
    let cfg = dir.join("cfg.json");
    write(
        &cfg,
        r#"{
            "task": "MRD1",
            "head_hidden": [8, 4],
            "backbone_hidden": 8,
            "backbone_embed": 8,
            "epochs": 1,
            "synth_n": 40,
            "synth_dim": 4,
            "seed": 5
        }"#,
    );
    let out_a = dir.join("a.csv");
    let out_b = dir.join("b.csv");
    for out in [&out_a, &out_b] {
        let res = bin()
            .arg("ablate")
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .output()
            .unwrap();
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    let a = std::fs::read(&out_a).unwrap();
    let b = std::fs::read(&out_b).unwrap();
    assert_eq!(a, b, "grid must be bit-stable");
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 21, "header plus 20 rows");
    assert!(text.contains("Classification") && text.contains("Regression"));
}

#[test]
fn distill_logs_every_step() {
    let dir = tmp_dir("distill");
    let log = dir.join("distill.csv");
    let out = bin()
        .args(["distill", "--steps", "20", "--seed", "4", "--tps", "0.1", "--tpt", "0.04", "--l", "0.99", "--m", "0.9"])
        .arg("--out")
        .arg(&log)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(text.starts_with("step,loss,teacher_student_divergence,center_norm"));
    assert_eq!(text.lines().count(), 21);

    // Bad temperature is a parameter error → exit 2.
    let out = bin().args(["distill", "--steps", "5", "--tpt", "0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn trained_model_consumes_generated_files() {
    let dir = tmp_dir("roundtrip");
    let prefix = dir.join("ds");
    let out = bin()
        .args(["generate", "--task", "MRD1", "--n", "60", "--dim", "4", "--noise", "0.0", "--seed", "2"])
        .arg("--out-prefix")
        .arg(&prefix)
        .output()
        .unwrap();
    assert!(out.status.success());

    let cfg = dir.join("cfg.json");
    write(
        &cfg,
        &format!(
            r#"{{
                "task": "MRD1",
                "head_hidden": [16, 8],
                "backbone_hidden": 16,
                "backbone_embed": 8,
                "epochs": 2,
                "seed": 3,
                "data_features": {:?},
                "data_targets": {:?}
            }}"#,
            dir.join("ds.features.fpft").to_str().unwrap(),
            dir.join("ds.targets.csv").to_str().unwrap()
        ),
    );
    let out = bin().arg("train").arg("--config").arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mse="));
}
