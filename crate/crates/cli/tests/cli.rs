use std::path::Path;
use std::process::{Command, Output};

fn partlearn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partlearn")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_exits_zero() {
    let out = partlearn(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["synth", "fit-boxes", "train", "detect", "eval", "report"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = partlearn(&["train", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn missing_bundle_in_is_usage_error() {
    let out = partlearn(&["train", "--stage", "t2", "--manifest", "m.json", "--bundle-out", "b.pfb"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_manifest_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = partlearn(&["train", "--stage", "t1", "--manifest", s(&dir.path().join("nope.json")), "--bundle-out", s(&dir.path().join("b.pfb"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"mining": {"weight": 1}}"#).unwrap();
    let out = partlearn(&["train", "--stage", "t1", "--manifest", "m.json", "--bundle-out", "b.pfb", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mining.weight"));
}

#[test]
fn corrupt_bundle_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("b.pfb");
    std::fs::write(&bundle, b"PFB1\x01").unwrap();
    let out = partlearn(&["detect", "--bundle", s(&bundle), "--images", s(dir.path()), "--out", s(&dir.path().join("d.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupt"));
}

/// Tiny synthetic benchmark through every subcommand.
#[test]
fn end_to_end_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    std::fs::write(
        d.join("spec.json"),
        r#"{"archetype": 1, "counts": {"images_per_part": 5, "objects_per_viewpoint": 5, "hard_domain": 5, "evaluation": 3, "pair_fraction": 0.2}}"#,
    )
    .unwrap();
    std::fs::write(d.join("cfg.json"), r#"{"train": {"max_iterations": 150}}"#).unwrap();
    let ok = |args: &[&str]| {
        let out = partlearn(args);
        assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    ok(&["synth", "--spec", s(&d.join("spec.json")), "--out", s(&data), "--seed", "3"]);
    let manifest = data.join("manifest.json");
    assert!(manifest.is_file() && data.join("gt.json").is_file());

    ok(&["fit-boxes", "--in", s(&data.join("parts")), "--out", s(&d.join("boxes.csv")), "--masks", s(&d.join("masks"))]);
    let boxes = std::fs::read_to_string(d.join("boxes.csv")).unwrap();
    assert!(boxes.starts_with("image_id,x_min,y_min,x_max,y_max\n") && boxes.lines().count() > 1);

    let cfg = d.join("cfg.json");
    let train = |stage: &str, input: Option<&Path>, out: &Path| {
        let mut args = vec!["train", "--stage", stage, "--manifest", s(&manifest), "--config", s(&cfg), "--seed", "3", "--bundle-out", s(out)];
        if let Some(i) = input {
            args.extend(["--bundle-in", s(i)]);
        }
        ok(&args);
    };
    train("t0", None, &d.join("curated.json"));
    train("t1", None, &d.join("t1.pfb"));
    train("t2", Some(&d.join("t1.pfb")), &d.join("t2.pfb"));
    train("t3", Some(&d.join("t2.pfb")), &d.join("t3.pfb"));
    let t3 = std::fs::read(d.join("t3.pfb")).unwrap();
    assert_eq!(&t3[..4], b"PFB1");

    // replayable: the same inputs give the same bytes
    train("t3", Some(&d.join("t2.pfb")), &d.join("t3b.pfb"));
    assert_eq!(t3, std::fs::read(d.join("t3b.pfb")).unwrap());

    let gt = data.join("gt.json");
    ok(&["detect", "--bundle", s(&d.join("t3.pfb")), "--images", s(&data), "--gt", s(&gt), "--out", s(&d.join("dets.csv"))]);
    ok(&["detect", "--bundle", s(&d.join("t3.pfb")), "--images", s(&data.join("eval")), "--out", s(&d.join("wide.csv"))]);
    let out = ok(&[
        "eval", "--detections", s(&d.join("dets.csv")), "--gt", s(&gt), "--report", s(&d.join("report.json")),
        "--bundle", s(&d.join("t3.pfb")), "--images", s(&data),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("mAP "));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["parts"].as_array().unwrap().len(), 3);
    assert!(report["viewpoint"]["overall_accuracy"].is_number());

    let out = ok(&[
        "--workers", "2", "report", "--manifest", s(&manifest), "--gt", s(&gt), "--config", s(&cfg), "--csv", s(&d.join("stages.csv")),
    ]);
    let csv = std::fs::read_to_string(d.join("stages.csv")).unwrap();
    assert_eq!(csv.lines().count(), 8);
    assert!(csv.starts_with("model,"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("A3+L3"));
}
