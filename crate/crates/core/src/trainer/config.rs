use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hessian::EntanglementVariant;
use crate::nn::ModelConfig;
use crate::optim::{AdamWConfig, ScheduleSpec};
use crate::ordering::StrategyTag;
use crate::task::TaskSpec;

/// Instrumentation hooks, in the order they run at the end of an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Hook {
    Norms,
    Consecutive,
    Fourier,
    WeightTracking,
    ParameterDelta,
    PathLength,
    BatchDynamics,
    GradientProjection,
    AdamDynamics,
    Hessian,
    Counterfactual,
}

impl Hook {
    pub const ALL: [Hook; 11] = [
        Hook::Norms,
        Hook::Consecutive,
        Hook::Fourier,
        Hook::WeightTracking,
        Hook::ParameterDelta,
        Hook::PathLength,
        Hook::BatchDynamics,
        Hook::GradientProjection,
        Hook::AdamDynamics,
        Hook::Hessian,
        Hook::Counterfactual,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Hook::Norms => "norms",
            Hook::Consecutive => "consecutive",
            Hook::Fourier => "fourier",
            Hook::WeightTracking => "weight_tracking",
            Hook::ParameterDelta => "parameter_delta",
            Hook::PathLength => "path_length",
            Hook::BatchDynamics => "batch_dynamics",
            Hook::GradientProjection => "gradient_projection",
            Hook::AdamDynamics => "adam_dynamics",
            Hook::Hessian => "hessian",
            Hook::Counterfactual => "counterfactual",
        }
    }

    pub fn parse(s: &str) -> Result<Hook> {
        Hook::ALL
            .into_iter()
            .find(|h| h.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown hook `{s}`")))
    }
}

impl fmt::Display for Hook {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn every_epoch() -> Option<u32> {
    Some(1)
}

fn every_tenth() -> Option<u32> {
    Some(10)
}

/// Per-hook cadence in epochs; `null` disables a hook. A hook with cadence
/// `c` fires after epoch 1 and after every epoch divisible by `c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HookSchedule {
    #[serde(default = "every_epoch")]
    pub norms: Option<u32>,
    #[serde(default = "every_epoch")]
    pub consecutive: Option<u32>,
    #[serde(default = "every_epoch")]
    pub fourier: Option<u32>,
    #[serde(default = "every_epoch")]
    pub weight_tracking: Option<u32>,
    #[serde(default = "every_epoch")]
    pub parameter_delta: Option<u32>,
    #[serde(default = "every_epoch")]
    pub path_length: Option<u32>,
    #[serde(default = "every_epoch")]
    pub batch_dynamics: Option<u32>,
    #[serde(default = "every_epoch")]
    pub gradient_projection: Option<u32>,
    #[serde(default = "every_epoch")]
    pub adam_dynamics: Option<u32>,
    #[serde(default = "every_tenth")]
    pub hessian: Option<u32>,
    #[serde(default = "every_tenth")]
    pub counterfactual: Option<u32>,
}

impl Default for HookSchedule {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl HookSchedule {
    pub fn none() -> Self {
        let mut s = HookSchedule::default();
        for h in Hook::ALL {
            s.set(h, None);
        }
        s
    }

    pub fn cadence(&self, hook: Hook) -> Option<u32> {
        match hook {
            Hook::Norms => self.norms,
            Hook::Consecutive => self.consecutive,
            Hook::Fourier => self.fourier,
            Hook::WeightTracking => self.weight_tracking,
            Hook::ParameterDelta => self.parameter_delta,
            Hook::PathLength => self.path_length,
            Hook::BatchDynamics => self.batch_dynamics,
            Hook::GradientProjection => self.gradient_projection,
            Hook::AdamDynamics => self.adam_dynamics,
            Hook::Hessian => self.hessian,
            Hook::Counterfactual => self.counterfactual,
        }
    }

    pub fn set(&mut self, hook: Hook, cadence: Option<u32>) {
        let slot = match hook {
            Hook::Norms => &mut self.norms,
            Hook::Consecutive => &mut self.consecutive,
            Hook::Fourier => &mut self.fourier,
            Hook::WeightTracking => &mut self.weight_tracking,
            Hook::ParameterDelta => &mut self.parameter_delta,
            Hook::PathLength => &mut self.path_length,
            Hook::BatchDynamics => &mut self.batch_dynamics,
            Hook::GradientProjection => &mut self.gradient_projection,
            Hook::AdamDynamics => &mut self.adam_dynamics,
            Hook::Hessian => &mut self.hessian,
            Hook::Counterfactual => &mut self.counterfactual,
        };
        *slot = cadence;
    }

    /// Whether `hook` fires after 1-based epoch `epoch`.
    pub fn due(&self, hook: Hook, epoch: u64) -> bool {
        match self.cadence(hook) {
            Some(c) if c > 0 => epoch == 1 || epoch.is_multiple_of(u64::from(c)),
            _ => false,
        }
    }
}

fn default_test_subset() -> usize {
    10_000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Size of the seeded test subsample scored every epoch.
    #[serde(default = "default_test_subset")]
    pub test_subset: usize,
    /// Score the full test set every epoch instead of only at candidate stops.
    #[serde(default)]
    pub full_every_epoch: bool,
    /// Also score the training set (eval mode) every epoch.
    #[serde(default)]
    pub train_accuracy: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

fn default_k() -> usize {
    3
}

fn default_burst() -> usize {
    10
}

fn default_window() -> usize {
    50
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Shuffled epochs per counterfactual emission.
    #[serde(default = "default_k")]
    pub counterfactual_k: usize,
    /// Probed steps per Hessian burst.
    #[serde(default = "default_burst")]
    pub hessian_burst: usize,
    #[serde(default)]
    pub hessian_variant: EntanglementVariant,
    /// Batch gradients kept for `batch_dynamics`.
    #[serde(default = "default_window")]
    pub batch_window: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

fn default_checkpoint_every() -> u64 {
    50
}

/// Everything that determines a run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub schedule: ScheduleSpec,
    pub optimizer: AdamWConfig,
    pub strategy: StrategyTag,
    /// Stride for the `stride` strategy; defaults to floor(sqrt(p)).
    #[serde(default)]
    pub stride: Option<u32>,
    pub batch_size: usize,
    pub max_epochs: u64,
    pub target_accuracy: f64,
    pub master_seed: u64,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub hooks: HookSchedule,
    #[serde(default)]
    pub probes: ProbeConfig,
    /// Completed run directory (or final-model directory) whose parameters
    /// serve as the solution for projection metrics.
    #[serde(default)]
    pub reference: Option<PathBuf>,
    /// Checkpoint cadence in epochs; 0 disables periodic checkpoints.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Small-prime regime: p=97, 2500 training pairs, batch 32, AdamW with
    /// the given weight decay, everything else at the published defaults.
    pub fn desk(strategy: StrategyTag, weight_decay: f64, master_seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            task: TaskSpec {
                p: 97,
                train_size: 2500,
                test_size: 97 * 97 - 2500,
                data_seed: master_seed,
            },
            model: ModelConfig::desk(97),
            schedule: ScheduleSpec {
                lr_max: 1e-3,
                lr_min: 5e-7,
                total_epochs: 5000,
            },
            optimizer: AdamWConfig::with_weight_decay(weight_decay),
            strategy,
            stride: None,
            batch_size: 32,
            max_epochs: 5000,
            target_accuracy: 0.995,
            master_seed,
            eval: EvalConfig::default(),
            hooks: HookSchedule::default(),
            probes: ProbeConfig::default(),
            reference: None,
            checkpoint_every: default_checkpoint_every(),
            output_dir: output_dir.into(),
        }
    }

    /// Full-scale regime: p=9973, 300000 training pairs, batch 256.
    pub fn gold(strategy: StrategyTag, master_seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        let mut c = Self::desk(strategy, 0.1, master_seed, output_dir);
        c.task = TaskSpec {
            p: 9973,
            train_size: 300_000,
            test_size: 1_000_000,
            data_seed: master_seed,
        };
        c.model = ModelConfig::gold(9973);
        c.batch_size = 256;
        c
    }

    /// Every invalid field, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.task.problems();
        out.extend(self.model.problems());
        if self.model.p != self.task.p {
            out.push(format!(
                "model.p = {} differs from task.p = {}",
                self.model.p, self.task.p
            ));
        }
        out.extend(self.schedule.problems());
        out.extend(self.optimizer.problems());
        match (self.strategy, self.stride) {
            (StrategyTag::Stride, Some(s)) if s == 0 || s >= self.task.p => {
                out.push(format!("stride = {s} must satisfy 1 <= stride < p = {}", self.task.p));
            }
            (StrategyTag::Stride, _) | (_, None) => {}
            (other, Some(_)) => out.push(format!("stride is only used by the stride strategy, not {other}")),
        }
        if self.batch_size == 0 {
            out.push("batch_size must be >= 1".into());
        }
        if self.max_epochs == 0 {
            out.push("max_epochs must be >= 1".into());
        }
        if !(self.target_accuracy > 0.0 && self.target_accuracy <= 1.0) {
            out.push(format!("target_accuracy = {} must lie in (0, 1]", self.target_accuracy));
        }
        if self.eval.test_subset == 0 {
            out.push("eval.test_subset must be >= 1".into());
        }
        for h in Hook::ALL {
            if self.hooks.cadence(h) == Some(0) {
                out.push(format!("hooks.{h}: cadence must be >= 1 (use null to disable)"));
            }
        }
        if self.probes.counterfactual_k < 2 {
            out.push(format!(
                "probes.counterfactual_k = {} must be >= 2",
                self.probes.counterfactual_k
            ));
        }
        if self.probes.hessian_burst == 0 {
            out.push("probes.hessian_burst must be >= 1".into());
        }
        if self.probes.batch_window == 0 {
            out.push("probes.batch_window must be >= 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("{}: {e}", origin.display())]))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Fields that differ in ways a resumed run may not change. Only
    /// `max_epochs`, `checkpoint_every` and `output_dir` are free.
    pub fn drift_from(&self, other: &ExperimentConfig) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |name: &str, same: bool| {
            if !same {
                out.push(format!("{name} differs from the checkpointed run"));
            }
        };
        check("task", self.task == other.task);
        check("model", self.model == other.model);
        check("schedule", self.schedule == other.schedule);
        check("optimizer", self.optimizer == other.optimizer);
        check(
            "strategy",
            self.strategy == other.strategy && self.stride == other.stride,
        );
        check("batch_size", self.batch_size == other.batch_size);
        check("master_seed", self.master_seed == other.master_seed);
        check("target_accuracy", self.target_accuracy == other.target_accuracy);
        check("eval", self.eval == other.eval);
        check("hooks", self.hooks == other.hooks);
        check("probes", self.probes == other.probes);
        check("reference", self.reference == other.reference);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_sections() {
        let c = ExperimentConfig::desk(StrategyTag::Stride, 0.1, 1, "runs/x");
        assert!(c.problems().is_empty(), "{:?}", c.problems());
        assert_eq!(c.hooks.hessian, Some(10));
        assert_eq!(c.probes.counterfactual_k, 3);
        assert_eq!(c.eval.test_subset, 10_000);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut c = ExperimentConfig::desk(StrategyTag::FixedRandom, 0.05, 3, "runs/y");
        c.hooks.fourier = None;
        c.stride = None;
        let back = ExperimentConfig::from_json(&c.to_json(), Path::new("mem")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let c = ExperimentConfig::desk(StrategyTag::Random, 0.1, 1, "runs/z");
        let mut v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        v["hooks"]["attention"] = serde_json::json!(1);
        let err = ExperimentConfig::from_json(&v.to_string(), Path::new("cfg.json")).unwrap_err();
        assert!(err.to_string().contains("attention"), "{err}");
        let mut v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        v["strategy"] = serde_json::json!("sorted");
        assert!(ExperimentConfig::from_json(&v.to_string(), Path::new("cfg.json")).is_err());
    }

    #[test]
    fn every_bad_field_is_listed() {
        let mut c = ExperimentConfig::desk(StrategyTag::Random, 0.1, 1, "runs/z");
        c.batch_size = 0;
        c.target_accuracy = 1.5;
        c.hooks.norms = Some(0);
        c.stride = Some(5);
        c.model.p = 89;
        let problems = c.problems();
        assert_eq!(problems.len(), 5, "{problems:#?}");
    }

    #[test]
    fn cadence_rule() {
        let h = HookSchedule::default();
        let fired: Vec<u64> = (1..=30).filter(|&e| h.due(Hook::Counterfactual, e)).collect();
        assert_eq!(fired, vec![1, 10, 20, 30]);
        assert!(!HookSchedule::none().due(Hook::Norms, 1));
    }
}
