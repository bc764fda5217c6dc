//! End-to-end runs of the `spss` binary on a tiny synthetic dataset.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn spss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spss"))
        .args(args)
        .env_remove("SPSS_OUTPUT_ROOT")
        .output()
        .expect("spss binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = spss(args);
    assert!(
        out.status.success(),
        "spss {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn prepare(root: &Path, name: &str) -> PathBuf {
    let data = root.join(name);
    ok(&["prepare", "--synthetic", "classes=3", "n=10", "size=16", "--seed", "7", "--out", s(&data)]);
    data
}

const QUICK: [&str; 6] = ["--epochs", "1", "--base-filters", "4", "--batch-size", "2"];

#[test]
fn full_pipeline_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = prepare(root, "data");
    assert!(data.join("manifest.json").is_file());

    ok(&["annotate", "--data", s(&data), "--keypoints", "n=2", "radius=1", "--seed", "3"]);
    assert!(data.join("sp.csv").is_file());
    assert!(data.join("keypoints.csv").is_file());
    // a second run must not silently replace annotations
    assert!(!spss(&["annotate", "--data", s(&data)]).status.success());

    let deg = root.join("degraded");
    ok(&["degrade", "--data", s(&data), "--noise", "sigma=0.1", "--out", s(&deg)]);
    assert!(deg.join("sp_degraded.csv").is_file());

    let spss_dir = root.join("train_spss");
    let mut args = vec!["train", "--data", s(&data), "--mode", "spss", "--repeat", "3", "--out", s(&spss_dir)];
    args.extend(QUICK);
    ok(&args);
    for k in 0..3 {
        let run = spss_dir.join(format!("run_{k:02}"));
        assert!(run.join("model.ckpt").is_file() && run.join("history.json").is_file());
    }

    let plus_dir = root.join("train_plus");
    let sp = deg.join("sp_degraded.csv");
    let mut args = vec!["train", "--data", s(&data), "--mode", "spss-plus", "--alpha", "0.5", "--sp", s(&sp), "--out", s(&plus_dir)];
    args.extend(QUICK);
    ok(&args);

    let eval_dir = root.join("eval");
    let c0 = spss_dir.join("run_00/model.ckpt");
    let c1 = spss_dir.join("run_01/model.ckpt");
    let printed = ok(&["eval", "--data", s(&data), "--checkpoint", s(&c0), s(&c1), "--export-maps", "--out", s(&eval_dir)]);
    assert!(printed.contains("Mean IoU") || printed.to_lowercase().contains("iou"), "{printed}");
    assert!(eval_dir.join("report.json").is_file());

    let pred_dir = root.join("predict");
    ok(&["predict", "--data", s(&data), "--checkpoint", s(&c0), "--out", s(&pred_dir)]);
    assert!(pred_dir.join("sp_predicted.csv").is_file());

    let sweep_dir = root.join("sweep");
    let mut args = vec!["sweep", "--data", s(&data), "--noise", "levels=0,0.2", "--trend-tolerance", "100", "--out", s(&sweep_dir)];
    args.extend(QUICK);
    let printed = ok(&args);
    assert!(printed.contains("trend check"), "{printed}");

    let report_dir = root.join("report");
    let entry = format!("spss={}", eval_dir.display());
    ok(&["report", "--inputs", &entry, "--out", s(&report_dir)]);
    let md = std::fs::read_to_string(report_dir.join("report.md")).unwrap();
    assert!(md.contains("spss"), "{md}");
}

#[test]
fn keypoint_training_without_keypoints_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let data = prepare(tmp.path(), "data");
    ok(&["annotate", "--data", s(&data)]);
    let out_dir = tmp.path().join("plus");
    let mut args = vec!["train", "--data", s(&data), "--mode", "spss-plus", "--out", s(&out_dir)];
    args.extend(QUICK);
    let out = spss(&args);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("SPSS"));
}

#[test]
fn annotation_files_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let read = |dir: &Path, name: &str| std::fs::read(dir.join(name)).unwrap();
    let mut dirs = Vec::new();
    for name in ["a", "b"] {
        let data = prepare(tmp.path(), name);
        ok(&["annotate", "--data", s(&data), "--keypoints", "n=3", "radius=2", "--seed", "11"]);
        let deg = tmp.path().join(format!("{name}_cluster"));
        ok(&["degrade", "--data", s(&data), "--cluster", "k=3", "--seed", "2", "--out", s(&deg)]);
        dirs.push((data, deg));
    }
    let (a, b) = (&dirs[0], &dirs[1]);
    assert_eq!(read(&a.0, "sp.csv"), read(&b.0, "sp.csv"));
    assert_eq!(read(&a.0, "keypoints.csv"), read(&b.0, "keypoints.csv"));
    assert_eq!(read(&a.1, "sp_degraded.csv"), read(&b.1, "sp_degraded.csv"));
}

#[test]
fn bad_arguments_exit_nonzero() {
    assert!(!spss(&["train"]).status.success());
    assert!(!spss(&["prepare", "--synthetic", "classes=3", "bogus=1", "--out", "/nonexistent/x"]).status.success());
}
