mod common;

use std::fs;

use common::{read, tiny, tree};
use ordlab::ordering::StrategyTag;
use ordlab::trainer::{
    list_checkpoints, read_checkpoint_state, read_jsonl, resume, row_num, run_experiment, train_in_memory,
    HookSchedule, RunManifest, RunStatus, CHECKPOINTS_DIR, MANIFEST, METRICS_DIR, TRAINING_METRICS,
};
use ordlab::Error;

/// Every file except the manifest, which records its own directory.
fn outputs(dir: &std::path::Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    tree(dir)
        .into_iter()
        .filter(|(p, _)| p != std::path::Path::new(MANIFEST))
        .collect()
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = run_experiment(&tiny(StrategyTag::Random, &tmp.path().join("a"))).unwrap();
    let b = run_experiment(&tiny(StrategyTag::Random, &tmp.path().join("b"))).unwrap();
    assert_eq!(a.epochs_completed, 6);
    assert_eq!(outputs(&a.run_dir), outputs(&b.run_dir));
    let (ma, mb) = (
        RunManifest::load(&a.run_dir).unwrap(),
        RunManifest::load(&b.run_dir).unwrap(),
    );
    assert_eq!(ma.dataset_sha256, mb.dataset_sha256);
    assert_eq!(ma.final_test_accuracy, mb.final_test_accuracy);
    assert_eq!(ma.status, RunStatus::Exhausted);
}

#[test]
fn different_seed_changes_the_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tiny(StrategyTag::Random, tmp.path());
    let mut b = a.clone();
    b.master_seed += 1;
    let la = train_in_memory(&a).unwrap().1.series(TRAINING_METRICS, "loss");
    let lb = train_in_memory(&b).unwrap().1.series(TRAINING_METRICS, "loss");
    assert_ne!(la, lb);
}

#[test]
fn hooks_do_not_perturb_training() {
    let tmp = tempfile::tempdir().unwrap();
    for strategy in [
        StrategyTag::Stride,
        StrategyTag::FixedRandom,
        StrategyTag::Random,
        StrategyTag::Target,
    ] {
        let on = tiny(strategy, tmp.path());
        let mut off = on.clone();
        off.hooks = HookSchedule::none();
        let (_, s_on) = train_in_memory(&on).unwrap();
        let (_, s_off) = train_in_memory(&off).unwrap();
        let rows = |s: &ordlab::trainer::MemorySink| s.hook(TRAINING_METRICS).cloned().collect::<Vec<_>>();
        assert_eq!(rows(&s_on), rows(&s_off), "{strategy}");
        assert!(s_on.hook("counterfactual").count() > 0);
        assert!(s_on.hook("hessian").count() > 0);
        assert_eq!(s_off.rows.len(), 6);
    }
}

#[test]
fn resume_from_any_checkpoint_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let full = run_experiment(&tiny(StrategyTag::Stride, &tmp.path().join("full"))).unwrap();
    assert_eq!(list_checkpoints(&full.run_dir).unwrap(), vec![0, 2, 4, 6]);
    let want = outputs(&full.run_dir);
    for epoch in [0, 2, 4] {
        let dir = tmp.path().join(format!("r{epoch}"));
        fs::create_dir_all(&dir).unwrap();
        copy_tree(&full.run_dir, &dir);
        let out = resume(&dir, Some(epoch), None).unwrap();
        assert_eq!(out.epochs_completed, 6);
        assert_eq!(outputs(&dir), want, "resumed from {epoch}");
    }
}

#[test]
fn interrupted_run_resumes_to_the_same_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let full = run_experiment(&tiny(StrategyTag::FixedRandom, &tmp.path().join("full"))).unwrap();
    let dir = tmp.path().join("short");
    let mut short = tiny(StrategyTag::FixedRandom, &dir);
    short.max_epochs = 3;
    run_experiment(&short).unwrap();
    let mut extended = short.clone();
    extended.max_epochs = 6;
    resume(&dir, Some(2), Some(extended)).unwrap();
    assert_eq!(outputs(&dir), outputs(&full.run_dir));
}

#[test]
fn resume_rejects_trajectory_drift() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let cfg = tiny(StrategyTag::Random, &dir);
    run_experiment(&cfg).unwrap();
    let mut drifted = cfg.clone();
    drifted.optimizer.weight_decay = 0.05;
    drifted.batch_size = 16;
    match resume(&dir, Some(2), Some(drifted)) {
        Err(Error::Config(msgs)) => assert_eq!(msgs.len(), 2, "{msgs:?}"),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn corrupted_checkpoint_is_detected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    run_experiment(&tiny(StrategyTag::Random, &dir)).unwrap();
    let params = dir.join(CHECKPOINTS_DIR).join("4").join("params.bin");
    let mut bytes = fs::read(&params).unwrap();
    bytes[20] ^= 0x01;
    fs::write(&params, bytes).unwrap();
    assert!(matches!(read_checkpoint_state(&dir, 4), Err(Error::Format { .. })));
    assert!(matches!(resume(&dir, Some(4), None), Err(Error::Format { .. })));
    assert!(read_checkpoint_state(&dir, 2).is_ok());
}

#[test]
fn existing_run_directory_is_not_overwritten() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(StrategyTag::Random, &tmp.path().join("run"));
    run_experiment(&cfg).unwrap();
    assert!(matches!(run_experiment(&cfg), Err(Error::Input(_))));
}

#[test]
fn manifest_records_config_and_outcome() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(StrategyTag::Target, &tmp.path().join("run"));
    let out = run_experiment(&cfg).unwrap();
    let m = RunManifest::load(&out.run_dir).unwrap();
    assert_eq!(m.config, cfg);
    assert_eq!(m.epochs_completed, 6);
    assert_eq!(m.final_test_accuracy, Some(out.final_test_accuracy));
    assert!(m.decisions.contains_key("stop_rule"));
    let text = read(&out.run_dir.join(MANIFEST));
    let again: RunManifest = serde_json::from_str(&text).unwrap();
    assert_eq!(again, m);
}

#[test]
fn metric_streams_have_one_row_per_epoch_and_csv_mirrors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_experiment(&tiny(StrategyTag::Stride, &tmp.path().join("run"))).unwrap();
    let metrics = out.run_dir.join(METRICS_DIR);
    let rows = read_jsonl(&metrics.join(format!("{TRAINING_METRICS}.jsonl"))).unwrap();
    let epochs: Vec<f64> = rows.iter().map(|r| row_num(r, "epoch").unwrap()).collect();
    assert_eq!(epochs, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    for hook in ["norms", "consecutive", "fourier", "counterfactual", "hessian"] {
        assert!(metrics.join(format!("{hook}.jsonl")).exists(), "{hook}");
        assert!(metrics.join(format!("{hook}.csv")).exists(), "{hook}");
    }
    // consecutive cosine needs a previous epoch
    let cons = read_jsonl(&metrics.join("consecutive.jsonl")).unwrap();
    assert_eq!(row_num(&cons[0], "epoch"), Some(2.0));
    // counterfactual fires after epoch 1 and every third epoch
    let cf = read_jsonl(&metrics.join("counterfactual.jsonl")).unwrap();
    let cf_epochs: Vec<f64> = cf.iter().map(|r| row_num(r, "epoch").unwrap()).collect();
    assert_eq!(cf_epochs, vec![1.0, 3.0, 6.0]);
    for r in &cf {
        assert!(row_num(r, "partition_residual").unwrap() < 1e-10);
    }
}

fn copy_tree(from: &std::path::Path, to: &std::path::Path) {
    for (rel, bytes) in tree(from) {
        let dst = to.join(rel);
        fs::create_dir_all(dst.parent().unwrap()).unwrap();
        fs::write(dst, bytes).unwrap();
    }
}
