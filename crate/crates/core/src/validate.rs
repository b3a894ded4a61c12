//! Validation routines behind `ordlab validate`: the closed-form oracle
//! suite, K-sufficiency of the counterfactual estimate, stride-frequency
//! prediction, and the small-prime weight-decay sweep.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::counterfactual::{decompose, validate_k, KValidation};
use crate::error::{Error, Result};
use crate::hessian::{entanglement_step, hvp_fd, EntanglementVariant};
use crate::nn::{Layout, Mode, ModelConfig, ParamVec, ParameterVector, Precision, Transformer};
use crate::optim::{cosine_lr, AdamWConfig, AdamWState};
use crate::ordering::{predicted_fundamental, StrategyTag};
use crate::rng;
use crate::spectral::{harmonic_series, peak_frequency, spectral_entropy, weight_spectrum, PowerSpectrum};
use crate::task::{ExamplePair, TaskSpec};
use crate::trainer::{ExperimentConfig, HookSchedule, NullSink, Trainer};

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn vector(xs: Vec<f64>) -> ParameterVector {
    let n = xs.len();
    ParamVec::from_vec(Arc::new(Layout::new(vec![("theta".into(), vec![n])])), xs).expect("layout")
}

/// Symmetric positive-definite `n x n` matrix `M M^T + n I` from a seeded
/// stream, row-major.
fn spd(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, "oracle", &[n as u64]);
    let m: Vec<f64> = (0..n * n).map(|_| 2.0 * rng::unit_f64(&mut r) - 1.0).collect();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = (0..n).map(|k| m[i * n + k] * m[j * n + k]).sum::<f64>();
        }
        a[i * n + i] += n as f64;
    }
    a
}

fn matvec(a: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum()).collect()
}

/// Gradient of `0.5 x^T A x + b^T x`.
fn quadratic_grad(a: Vec<f64>, b: Vec<f64>) -> impl FnMut(&ParameterVector) -> Result<ParameterVector> {
    move |x| {
        let mut g = matvec(&a, x.as_slice());
        for (gi, bi) in g.iter_mut().zip(&b) {
            *gi += bi;
        }
        Ok(vector(g))
    }
}

/// Finite-difference HVP and the content-term reconstruction on quadratics.
pub fn quadratic_oracles() -> Vec<Check> {
    let mut out = Vec::new();
    let n = 6;
    let a = spd(n, 1);
    let mut r = rng::stream(2, "oracle", &[]);
    let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| 2.0 * rng::unit_f64(&mut r) - 1.0).collect() };
    let theta = vector(draw(n));
    let v = vector(draw(n));
    let hv = hvp_fd(quadratic_grad(a.clone(), vec![0.0; n]), &theta, &v, None).expect("nonzero v");
    let err = rel_err(hv.as_slice(), &matvec(&a, v.as_slice()));
    out.push(Check::new(
        "hvp_matches_hessian",
        err < 1e-6,
        format!("relative error {err:.3e} (< 1e-6)"),
    ));

    // batch A and batch B are different quadratics; SGD step on A
    let b_mat = spd(n, 3);
    let b_vec = draw(n);
    let eta = 0.05;
    let g_a = quadratic_grad(a.clone(), vec![0.0; n])(&theta).expect("grad");
    let mut after = theta.clone();
    after.axpy(-eta, &g_a);
    let mut grad_b = quadratic_grad(b_mat.clone(), b_vec.clone());
    let g_b_obs = grad_b(&after).expect("grad");
    let step = entanglement_step(
        &g_a,
        None,
        &after,
        &g_b_obs,
        eta,
        EntanglementVariant::RawGradient,
        None,
        quadratic_grad(b_mat, b_vec.clone()),
    )
    .expect("probe");
    let truth = grad_b(&theta).expect("grad");
    let err = rel_err(step.c.as_slice(), truth.as_slice());
    out.push(Check::new(
        "content_equals_pre_step_gradient",
        err < 1e-8,
        format!("relative error {err:.3e} (< 1e-8)"),
    ));
    out
}

/// Worst per-coordinate relative error `|a - n| / max(|a|, |n|, 1e-6)` of
/// analytic gradients against central differences (h = 1e-5) over every
/// parameter of a small f64 model.
pub fn gradient_check(p: u32, d_model: usize) -> Result<f64> {
    let cfg = ModelConfig {
        p,
        d_model,
        n_heads: 2,
        d_ff: 4 * d_model,
        n_layers: 1,
        dropout: 0.0,
        precision: Precision::F64,
    };
    let model = Transformer::new(cfg)?;
    let params = model.init_params::<f64>(11);
    let batch: Vec<ExamplePair> = (0..p)
        .flat_map(|a| (0..p).map(move |b| ExamplePair::new(a, b, p).expect("in range")))
        .collect();
    let (_, analytic) = model.loss_and_grad(&params, &batch, Mode::Eval)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut theta = params.clone();
    for i in 0..params.len() {
        let x = params.as_slice()[i];
        theta.as_mut_slice()[i] = x + h;
        let lp = model.loss_and_grad(&theta, &batch, Mode::Eval)?.0;
        theta.as_mut_slice()[i] = x - h;
        let lm = model.loss_and_grad(&theta, &batch, Mode::Eval)?.0;
        theta.as_mut_slice()[i] = x;
        let numeric = (lp - lm) / (2.0 * h);
        let a = analytic.as_slice()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
    }
    Ok(worst)
}

fn spectrum_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let (p, d) = (97usize, 3usize);
    let mut r = rng::stream(5, "oracle", &[]);
    let w: Vec<f64> = (0..p * d).map(|_| 2.0 * rng::unit_f64(&mut r) - 1.0).collect();
    let spec = weight_spectrum(&w, p, d).expect("nonzero");
    let sum: f64 = spec.power.iter().sum();
    let energy: f64 = w.iter().map(|x| x * x).sum::<f64>() * p as f64;
    let sym = (1..p)
        .map(|k| (spec.power[k] - spec.power[p - k]).abs())
        .fold(0.0, f64::max);
    out.push(Check::new(
        "spectrum_normalized_symmetric_parseval",
        (sum - 1.0).abs() < 1e-9 && sym < 1e-12 && ((spec.total - energy) / energy).abs() < 1e-9,
        format!(
            "sum-1 {:.1e}, max asymmetry {sym:.1e}, Parseval residual {:.1e}",
            sum - 1.0,
            (spec.total - energy) / energy
        ),
    ));
    let uniform = PowerSpectrum {
        power: vec![1.0 / p as f64; p],
        total: 1.0,
    };
    let mut delta = vec![0.0; p];
    delta[7] = 1.0;
    let delta = PowerSpectrum {
        power: delta,
        total: 1.0,
    };
    let (su, sd) = (spectral_entropy(&uniform), spectral_entropy(&delta));
    out.push(Check::new(
        "entropy_endpoints",
        (su - 1.0).abs() < 1e-12 && sd == 0.0,
        format!("uniform {su}, delta {sd}"),
    ));
    let cos7: Vec<f64> = (0..p)
        .map(|a| (2.0 * std::f64::consts::PI * 7.0 * a as f64 / p as f64).cos())
        .collect();
    let peak = peak_frequency(&weight_spectrum(&cos7, p, 1).expect("nonzero"));
    out.push(Check::new(
        "cosine_peak",
        peak == Some(7),
        format!("peak {peak:?} (expected 7)"),
    ));
    let series = harmonic_series(101, 9973, 7);
    out.push(Check::new(
        "harmonic_series",
        series == [101, 202, 404, 808, 1616, 3232, 3509],
        format!("{series:?}"),
    ));
    let fundamentals: Vec<u32> = [50, 99, 150].iter().map(|&s| predicted_fundamental(9973, s)).collect();
    out.push(Check::new(
        "stride_fundamentals",
        fundamentals == [199, 101, 66],
        format!("{fundamentals:?} (expected [199, 101, 66])"),
    ));
    out
}

fn optimizer_checks() -> Vec<Check> {
    let layout = Arc::new(Layout::new(vec![("theta".into(), vec![2])]));
    let mut params = ParamVec::<f64>::from_vec(Arc::clone(&layout), vec![1.0, -1.0]).expect("layout");
    let grad = ParamVec::<f64>::from_vec(Arc::clone(&layout), vec![0.01, 0.01]).expect("layout");
    let mut hp = AdamWConfig::with_weight_decay(0.0);
    hp.eps = 1e-12;
    let mut st = AdamWState::<f64>::new(layout, hp);
    st.step(&mut params, &grad, 1e-3).expect("finite");
    let amp = st.adaptive_update(1e-3).norm() / (1e-3 * grad.norm());
    vec![Check::new(
        "adam_first_step_amplification",
        (amp - 100.0).abs() < 1e-6,
        format!("amplification {amp} (expected 100)"),
    )]
}

fn decomposition_checks() -> Vec<Check> {
    let mut r = rng::stream(9, "oracle", &[]);
    let mut draw = || vector((0..50).map(|_| 2.0 * rng::unit_f64(&mut r) - 1.0).collect());
    let actual = draw();
    let shuffled: Vec<_> = (0..3).map(|_| draw()).collect();
    let d = decompose(&actual, &shuffled).expect("nonzero");
    let res = d.partition_residual();
    vec![Check::new(
        "decomposition_energy_identity",
        res < 1e-10,
        format!("relative residual {res:.2e} (< 1e-10)"),
    )]
}

/// Every closed-form check, including the f64 gradient check at p=7, d=8.
pub fn oracle_suite() -> Vec<Check> {
    let mut out = quadratic_oracles();
    match gradient_check(7, 8) {
        Ok(err) => out.push(Check::new(
            "gradient_check_p7_d8",
            err < 1e-4,
            format!("max relative error {err:.3e} (< 1e-4)"),
        )),
        Err(e) => out.push(Check::new("gradient_check_p7_d8", false, e.to_string())),
    }
    out.extend(spectrum_checks());
    out.extend(optimizer_checks());
    out.extend(decomposition_checks());
    out
}

/// K-validation at each requested epoch of `cfg`'s trajectory: `k + 1`
/// shuffled epochs from the live state at that epoch, compared
/// leave-one-out against their full mean.
pub fn k_sufficiency(cfg: &ExperimentConfig, epochs: &[u64], k: usize) -> Result<Vec<(u64, KValidation)>> {
    let mut cfg = cfg.clone();
    cfg.hooks = HookSchedule::none();
    match cfg.model.precision {
        Precision::F32 => k_sufficiency_impl::<f32>(cfg, epochs, k),
        Precision::F64 => k_sufficiency_impl::<f64>(cfg, epochs, k),
    }
}

fn k_sufficiency_impl<T: crate::nn::Real>(
    cfg: ExperimentConfig,
    epochs: &[u64],
    k: usize,
) -> Result<Vec<(u64, KValidation)>> {
    let mut trainer = Trainer::<T>::new(cfg)?;
    let mut out = Vec::new();
    let mut sorted = epochs.to_vec();
    sorted.sort_unstable();
    for e in sorted {
        while trainer.epochs_completed() < e {
            trainer.run_epoch(&mut NullSink)?;
        }
        let lr = cosine_lr(e, &trainer.config().schedule);
        let shuffled = trainer.counterfactual_gradients(&trainer.state, e, lr, k + 1)?;
        out.push((e, validate_k(&shuffled, trainer.prev_grad.as_ref())?));
    }
    Ok(out)
}

/// Peak embedding frequency per epoch for one stride.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrideFrequency {
    pub p: u32,
    pub stride: u32,
    pub predicted: u32,
    /// Peak after each epoch (index 0 is epoch 1).
    pub peaks: Vec<Option<usize>>,
}

impl StrideFrequency {
    pub fn observed(&self) -> Option<usize> {
        self.peaks.last().copied().flatten()
    }

    /// First epoch from which the peak equals the prediction until the end.
    pub fn locked_from(&self) -> Option<u64> {
        let want = Some(self.predicted as usize);
        let tail = self.peaks.iter().rev().take_while(|&&pk| pk == want).count();
        (tail > 0).then(|| (self.peaks.len() - tail + 1) as u64)
    }
}

/// Trains `base` under the stride strategy for each stride and records the
/// embedding's peak frequency after every epoch.
pub fn stride_frequency(base: &ExperimentConfig, strides: &[u32], epochs: u64) -> Result<Vec<StrideFrequency>> {
    strides
        .iter()
        .map(|&s| {
            let mut cfg = base.clone();
            cfg.strategy = StrategyTag::Stride;
            cfg.stride = Some(s);
            cfg.hooks = HookSchedule::none();
            cfg.max_epochs = epochs;
            match cfg.model.precision {
                Precision::F32 => stride_peaks::<f32>(cfg, epochs),
                Precision::F64 => stride_peaks::<f64>(cfg, epochs),
            }
        })
        .collect()
}

fn stride_peaks<T: crate::nn::Real>(cfg: ExperimentConfig, epochs: u64) -> Result<StrideFrequency> {
    let (p, s, d) = (cfg.task.p, cfg.stride.expect("set"), cfg.model.d_model);
    let mut trainer = Trainer::<T>::new(cfg)?;
    let mut peaks = Vec::new();
    for _ in 0..epochs {
        trainer.run_epoch(&mut NullSink)?;
        let emb = trainer.state.params.to_f64();
        let spec = weight_spectrum(emb.segment("token_embedding"), p as usize, d)?;
        peaks.push(peak_frequency(&spec));
    }
    Ok(StrideFrequency {
        p,
        stride: s,
        predicted: predicted_fundamental(p, s),
        peaks,
    })
}

/// Revision of the numerics that determine a training trajectory (model,
/// optimizer, ordering, data split, RNG streams, epoch loop). Bump it
/// whenever any of them changes so cached sweep results are not reused.
pub const TRAJECTORY_REVISION: u32 = 1;

/// One training run of the weight-decay sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    /// Fingerprint of code and configuration that produced this record.
    pub key: String,
    pub strategy: StrategyTag,
    pub weight_decay: f64,
    pub seed: u64,
    pub stop_epoch: Option<u64>,
    pub epochs: u64,
    pub final_test_accuracy: f64,
}

/// The small-prime sweep configuration: p=97, 2500 training pairs, d=128,
/// one layer, batch 32, AdamW, target 99.5%, hooks off.
pub fn sweep_config(strategy: StrategyTag, weight_decay: f64, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(strategy, weight_decay, seed, PathBuf::from("unused"));
    cfg.hooks = HookSchedule::none();
    cfg.checkpoint_every = 0;
    cfg
}

pub fn sweep_key(cfg: &ExperimentConfig) -> String {
    let mut c = cfg.clone();
    c.output_dir = PathBuf::new();
    let mut h = Sha256::new();
    h.update(TRAJECTORY_REVISION.to_le_bytes());
    h.update(c.to_json().as_bytes());
    hex::encode(h.finalize())
}

/// Trains one sweep configuration in memory.
pub fn run_sweep_point(cfg: &ExperimentConfig) -> Result<SweepRun> {
    fn go<T: crate::nn::Real>(cfg: &ExperimentConfig) -> Result<(Option<u64>, u64, f64)> {
        let mut t = Trainer::<T>::new(cfg.clone())?;
        let stop = t.train(&mut NullSink)?;
        Ok((stop, t.epochs_completed(), t.full_test_accuracy()?))
    }
    let (stop_epoch, epochs, acc) = match cfg.model.precision {
        Precision::F32 => go::<f32>(cfg)?,
        Precision::F64 => go::<f64>(cfg)?,
    };
    Ok(SweepRun {
        key: sweep_key(cfg),
        strategy: cfg.strategy,
        weight_decay: cfg.optimizer.weight_decay,
        seed: cfg.master_seed,
        stop_epoch,
        epochs,
        final_test_accuracy: acc,
    })
}

/// Append-only JSONL store of sweep results keyed by [`sweep_key`].
pub struct SweepCache {
    path: PathBuf,
    runs: BTreeMap<String, SweepRun>,
}

impl SweepCache {
    pub fn open(path: &Path) -> Result<Self> {
        let mut runs = BTreeMap::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                // a torn final line from an interrupted writer is skipped
                if let Ok(run) = serde_json::from_str::<SweepRun>(line) {
                    runs.insert(run.key.clone(), run);
                }
            }
        }
        Ok(SweepCache {
            path: path.to_path_buf(),
            runs,
        })
    }

    pub fn get(&self, cfg: &ExperimentConfig) -> Option<&SweepRun> {
        self.runs.get(&sweep_key(cfg))
    }

    /// Cached result for `cfg`, training and recording it if absent.
    pub fn get_or_run(&mut self, cfg: &ExperimentConfig) -> Result<SweepRun> {
        if let Some(r) = self.get(cfg) {
            return Ok(r.clone());
        }
        let run = run_sweep_point(cfg)?;
        if let Some(dir) = self.path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        let line = serde_json::to_string(&run).expect("serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.runs.insert(run.key.clone(), run.clone());
        Ok(run)
    }
}

/// Weight decays, strategies and seeds of the small-prime sweep.
pub const SWEEP_WEIGHT_DECAYS: [f64; 3] = [0.1, 0.05, 0.01];
pub const SWEEP_STRATEGIES: [StrategyTag; 3] = [StrategyTag::Stride, StrategyTag::FixedRandom, StrategyTag::Random];
pub const SWEEP_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Mean epochs to finish per (strategy, weight decay); runs that never
/// reach the target count with the epochs they ran.
pub fn sweep_means(runs: &[SweepRun]) -> BTreeMap<(String, String), (f64, usize, usize)> {
    let mut acc: BTreeMap<(String, String), (f64, usize, usize)> = BTreeMap::new();
    for r in runs {
        let e = acc
            .entry((r.strategy.as_str().to_string(), format!("{}", r.weight_decay)))
            .or_insert((0.0, 0, 0));
        e.0 += r.stop_epoch.unwrap_or(r.epochs) as f64;
        e.1 += 1;
        e.2 += usize::from(r.stop_epoch.is_some());
    }
    for v in acc.values_mut() {
        v.0 /= v.1 as f64;
    }
    acc
}

/// Dataset of the sweep configuration, for tests that need the split.
pub fn sweep_task(seed: u64) -> TaskSpec {
    sweep_config(StrategyTag::Random, 0.1, seed).task
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::generate_dataset;

    #[test]
    fn oracle_suite_passes() {
        for c in oracle_suite() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn sweep_key_ignores_output_dir_only() {
        let a = sweep_config(StrategyTag::Stride, 0.1, 1);
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(sweep_key(&a), sweep_key(&b));
        b.master_seed = 2;
        assert_ne!(sweep_key(&a), sweep_key(&b));
    }

    #[test]
    fn locked_from_counts_the_stable_tail() {
        let s = StrideFrequency {
            p: 97,
            stride: 9,
            predicted: 11,
            peaks: vec![Some(3), Some(11), Some(4), Some(11), Some(11)],
        };
        assert_eq!(s.locked_from(), Some(4));
        assert_eq!(s.observed(), Some(11));
    }

    #[test]
    fn sweep_dataset_is_small_prime_quarter_density() {
        let t = sweep_task(1);
        assert_eq!((t.p, t.train_size), (97, 2500));
        assert!(generate_dataset(&t).is_ok());
    }
}
