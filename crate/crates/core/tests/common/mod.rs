#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use ordlab::nn::{ModelConfig, Precision};
use ordlab::ordering::StrategyTag;
use ordlab::trainer::{ExperimentConfig, Hook};

/// A run small enough to train a few epochs in well under a second, with
/// every hook enabled.
pub fn tiny(strategy: StrategyTag, out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk(strategy, 0.1, 3, out);
    c.task.p = 13;
    c.task.train_size = 80;
    c.task.test_size = 169 - 80;
    c.model = ModelConfig {
        p: 13,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        n_layers: 1,
        dropout: 0.1,
        precision: Precision::F32,
    };
    c.batch_size = 8;
    c.max_epochs = 6;
    c.eval.test_subset = 40;
    c.checkpoint_every = 2;
    c.hooks.set(Hook::Hessian, Some(2));
    c.hooks.set(Hook::Counterfactual, Some(3));
    c.probes.hessian_burst = 3;
    c
}

/// Relative path -> bytes of every file under `dir`, sorted.
pub fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

pub fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
