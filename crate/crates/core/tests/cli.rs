//! The command-line binary end to end on a tiny configuration.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::TINY_TOML;

fn mgreid(out: &Path, args: &[&str]) -> Output {
    let config = out.join("tiny.toml");
    if !config.exists() {
        std::fs::create_dir_all(out).unwrap();
        std::fs::write(&config, TINY_TOML).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_mgreid"))
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) {
    let o = mgreid(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
}

fn pipeline(out: &Path) {
    for step in [
        &["gen-data"][..],
        &["annotate"],
        &["train", "--stage", "1"],
        &["train", "--stage", "2"],
        &["eval"],
        &["render-masks", "--limit", "2"],
    ] {
        ok(out, step);
    }
}

fn leftovers(out: &Path) -> Vec<String> {
    std::fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.contains(".tmp-") || n.ends_with(".partial"))
        .collect()
}

#[test]
fn every_command_writes_its_folder() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    pipeline(out);
    for folder in ["data", "labels", "stage1", "stage2", "eval", "masks"] {
        assert!(out.join(folder).join("config.toml").is_file(), "{folder} has no config snapshot");
    }
    assert!(out.join("data/manifest.json").is_file());
    for stage in ["stage1", "stage2"] {
        assert!(out.join(stage).join("checkpoint.bin").is_file());
        let csv = std::fs::read_to_string(out.join(stage).join("losses.csv")).unwrap();
        assert!(csv.starts_with("stage,epoch,iteration,lr"));
        assert!(csv.lines().count() > 1);
    }
    let metrics: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("eval/metrics.json")).unwrap()).unwrap();
    for key in ["mAP", "rank1", "random_rank1", "mean_iou", "per_part_iou"] {
        assert!(metrics.get(key).is_some(), "metrics.json lacks {key}");
    }
    let pngs = std::fs::read_dir(out.join("masks"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 3 * 2);
    assert!(leftovers(out).is_empty(), "{:?}", leftovers(out));
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    for file in ["labels/labels.jsonl", "stage1/checkpoint.bin", "stage2/checkpoint.bin", "stage2/losses.csv", "eval/metrics.json"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert!(x == y, "{file} differs between runs");
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["--seed", "11", "--mask-source", "stripe", "--granularities", "GU", "gen-data"]);
    let snap = std::fs::read_to_string(out.join("data/config.toml")).unwrap();
    let cfg = mgreid::config::RunConfig::from_toml(&snap).unwrap();
    assert_eq!(cfg.seed, Some(11));
    assert_eq!(cfg.data.seed, 11);
    assert_eq!(cfg.data.num_ids, 4, "file value lost");
    assert_eq!(cfg.train.mask_source, mgreid::image_encoder::MaskMode::Stripe);
    assert_eq!(cfg.granularities.to_string(), "GU");
    assert_eq!(cfg.train.label_smoothing, 0.1, "default lost");
}

#[test]
fn default_dataset_yields_three_label_rows_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for step in [&["gen-data"][..], &["annotate"]] {
        let o = Command::new(env!("CARGO_BIN_EXE_mgreid")).arg("--out").arg(out).args(step).output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let labels = std::fs::read_to_string(out.join("labels/labels.jsonl")).unwrap();
    assert_eq!(labels.lines().count(), 600);
}

#[test]
fn missing_inputs_fail_with_the_producing_command() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = mgreid(out, &["annotate"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("gen-data"));

    ok(out, &["gen-data"]);
    ok(out, &["annotate"]);
    let o = mgreid(out, &["train", "--stage", "2"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("train --stage 1"), "{err}");
    assert!(!out.join("stage2").exists());
    assert!(leftovers(out).is_empty(), "{:?}", leftovers(out));

    let o = mgreid(out, &["eval"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("train --stage 2"));
}

#[test]
fn bad_arguments_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["train", "--stage", "3"][..], &["--mask-source", "oracle", "eval"], &["--granularities", "GX", "eval"], &["frobnicate"]] {
        let o = mgreid(dir.path(), args);
        assert!(!o.status.success(), "{args:?} succeeded");
    }
    assert!(!dir.path().join("data").exists());
}

#[test]
fn resuming_a_finished_stage_keeps_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for step in [&["gen-data"][..], &["annotate"], &["train", "--stage", "1"]] {
        ok(out, step);
    }
    let ck = std::fs::read(out.join("stage1/checkpoint.bin")).unwrap();
    let csv = std::fs::read(out.join("stage1/losses.csv")).unwrap();
    ok(out, &["train", "--stage", "1", "--resume"]);
    assert!(ck == std::fs::read(out.join("stage1/checkpoint.bin")).unwrap());
    assert_eq!(csv, std::fs::read(out.join("stage1/losses.csv")).unwrap());
}
