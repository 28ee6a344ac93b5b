mod common;

use common::*;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

/// Hash of every output file except the run manifests.
fn tree_hashes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            let name = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
            if p.is_dir() {
                stack.push(p);
            } else if !name.contains("manifest_") && !name.ends_with(".toml") {
                out.insert(name, sha(&p));
            }
        }
    }
    out
}

#[test]
fn full_pipeline_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let run = cli_pipeline(dir.path(), 16, 40, 6).unwrap();
    assert!(run.checkpoint.exists());
    let log = std::fs::read_to_string(run.run_dir.join("training_log.csv")).unwrap();
    assert!(log.starts_with("epoch,step,lr,train_loss,holdout_loss,holdout_rmse_mm"));
    assert!(log.lines().count() >= 2);
    for name in ["manifest_train.json", "manifest_eval.json", "manifest_transfer.json"] {
        assert!(run.run_dir.join(name).exists(), "{name}");
    }
    let report = std::fs::read_to_string(&run.report).unwrap();
    assert_eq!(report.lines().count(), 1 + run.metrics.len());
    assert_eq!(run.metrics.len(), 5);
    for model in ["persistence", "linear", "transformer_multimodal"] {
        assert!(
            report.lines().any(|l| l.starts_with(&format!("{model},"))),
            "{model} missing"
        );
    }
}

#[test]
fn transfer_leaves_the_checkpoint_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let run = cli_pipeline(dir.path(), 16, 40, 4).unwrap();
    let before = sha(&run.checkpoint);
    let target = dir.path().join("target").join("truth.cube");
    let cfg = dir.path().join("train.toml");
    let out = cli(&[
        "transfer",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("again").to_str().unwrap(),
        "--checkpoint",
        run.checkpoint.to_str().unwrap(),
        "--target",
        target.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(sha(&run.checkpoint), before);
}

#[test]
fn repeated_runs_are_identical_apart_from_manifests() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cli_pipeline(a.path(), 16, 40, 4).unwrap();
    cli_pipeline(b.path(), 16, 40, 4).unwrap();
    let (ha, hb) = (tree_hashes(a.path()), tree_hashes(b.path()));
    assert!(!ha.is_empty());
    assert_eq!(ha, hb);
}

#[test]
fn config_errors_are_single_line_and_list_every_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(
        &path,
        "[data]\ntrain_fraction = 2.0\n[model]\nkind = \"lstm\"\n[optim]\nbatch_size = 0\n",
    )
    .unwrap();
    let out = cli(&[
        "train",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error code=config"));
    for field in ["data.train_fraction", "model.kind", "optim"] {
        assert!(err.contains(field), "{field} missing from {err}");
    }
}

#[test]
fn usage_errors_exit_with_code_two() {
    let out = cli(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error code=usage"));
}

#[test]
fn missing_input_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&[
        "transfer",
        "--out",
        dir.path().to_str().unwrap(),
        "--checkpoint",
        "/nonexistent/model.ckpt",
        "--target",
        "/nonexistent/tile.cube",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error code="));
}
