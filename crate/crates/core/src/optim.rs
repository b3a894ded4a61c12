//! AdamW with decoupled weight decay, the cosine learning-rate schedule,
//! and the value-isolated training snapshot.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layout, ParamVec, ParameterVector, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_epochs: u64,
}

impl ScheduleSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr_max.is_finite() && self.lr_max >= 0.0) {
            out.push(format!("schedule.lr_max: must be finite and >= 0, got {}", self.lr_max));
        }
        if !(self.lr_min.is_finite() && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            out.push(format!("schedule.lr_min: must lie in [0, lr_max], got {}", self.lr_min));
        }
        if self.total_epochs == 0 {
            out.push("schedule.total_epochs: must be >= 1".into());
        }
        out
    }
}

/// Cosine annealing evaluated once per epoch. Epochs past the end of the
/// schedule stay at `lr_min`.
pub fn cosine_lr(epoch: u64, spec: &ScheduleSpec) -> f64 {
    if epoch >= spec.total_epochs {
        return spec.lr_min;
    }
    let frac = epoch as f64 / spec.total_epochs as f64;
    spec.lr_min + 0.5 * (spec.lr_max - spec.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl AdamWConfig {
    pub fn with_weight_decay(weight_decay: f64) -> Self {
        AdamWConfig {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("optimizer.{name}: must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            out.push(format!("optimizer.eps: must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            out.push(format!(
                "optimizer.weight_decay: must be >= 0, got {}",
                self.weight_decay
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T = f32> {
    pub m: ParamVec<T>,
    pub v: ParamVec<T>,
    pub t: u64,
    pub hp: AdamWConfig,
}

impl<T: Real> AdamWState<T> {
    pub fn new(layout: Arc<Layout>, hp: AdamWConfig) -> Self {
        AdamWState {
            m: ParamVec::zeros(Arc::clone(&layout)),
            v: ParamVec::zeros(layout),
            t: 0,
            hp,
        }
    }

    fn corrections(&self) -> (f64, f64) {
        let t = self.t as i32;
        (1.0 - self.hp.beta1.powi(t), 1.0 - self.hp.beta2.powi(t))
    }

    /// One AdamW step in place. Decay is applied to the parameters first,
    /// then moments are updated and the bias-corrected adaptive term is
    /// subtracted.
    pub fn step(&mut self, params: &mut ParamVec<T>, grad: &ParamVec<T>, lr: f64) -> Result<()> {
        assert_eq!(params.len(), grad.len(), "gradient length");
        self.t += 1;
        let (bc1, bc2) = self.corrections();
        let decay = T::from_f64_lossy(1.0 - lr * self.hp.weight_decay);
        let b1 = T::from_f64_lossy(self.hp.beta1);
        let b2 = T::from_f64_lossy(self.hp.beta2);
        let one_b1 = T::from_f64_lossy(1.0 - self.hp.beta1);
        let one_b2 = T::from_f64_lossy(1.0 - self.hp.beta2);
        let step_size = T::from_f64_lossy(lr / bc1);
        let sqrt_bc2 = T::from_f64_lossy(bc2.sqrt());
        let eps = T::from_f64_lossy(self.hp.eps);
        let theta = params.as_mut_slice();
        let m = self.m.as_mut_slice();
        let v = self.v.as_mut_slice();
        for (i, &g) in grad.as_slice().iter().enumerate() {
            theta[i] *= decay;
            m[i] = b1 * m[i] + one_b1 * g;
            v[i] = b2 * v[i] + one_b2 * g * g;
            let denom = v[i].sqrt() / sqrt_bc2 + eps;
            theta[i] -= step_size * m[i] / denom;
        }
        if let Some(layer) = params.first_non_finite() {
            return Err(Error::numeric(
                layer,
                format!("non-finite parameters after step {}", self.t),
            ));
        }
        Ok(())
    }

    /// The adaptive term `lr * m_hat / (sqrt(v_hat) + eps)` for the current
    /// moments, without weight decay. Zero before the first step.
    pub fn adaptive_update(&self, lr: f64) -> ParameterVector {
        let mut out = ParamVec::<f64>::zeros(Arc::clone(self.m.layout()));
        if self.t == 0 {
            return out;
        }
        let (bc1, bc2) = self.corrections();
        for ((u, m), v) in out
            .as_mut_slice()
            .iter_mut()
            .zip(self.m.as_slice())
            .zip(self.v.as_slice())
        {
            let m_hat = m.as_f64() / bc1;
            let v_hat = v.as_f64() / bc2;
            *u = lr * m_hat / (v_hat.sqrt() + self.hp.eps);
        }
        out
    }

    /// Per-element effective learning rates `lr / (sqrt(v_hat) + eps)`.
    pub fn effective_lr(&self, lr: f64) -> Vec<f64> {
        let bc2 = if self.t == 0 { 1.0 } else { self.corrections().1 };
        self.v
            .as_slice()
            .iter()
            .map(|v| lr / ((v.as_f64() / bc2).sqrt() + self.hp.eps))
            .collect()
    }
}

/// Functional form of [`AdamWState::step`].
pub fn adamw_step<T: Real>(
    params: &ParamVec<T>,
    grad: &ParamVec<T>,
    state: &AdamWState<T>,
    lr: f64,
) -> Result<(ParamVec<T>, AdamWState<T>)> {
    let mut params = params.clone();
    let mut state = state.clone();
    state.step(&mut params, grad, lr)?;
    Ok((params, state))
}

/// Positions of the counter-based random streams. Every stream used by the
/// training loop is keyed by these two counters, so they are the whole of
/// the random state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RngCursors {
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
}

/// Deep copy of everything that determines future training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSnapshot<T = f32> {
    pub params: ParamVec<T>,
    pub adam: AdamWState<T>,
    pub cursors: RngCursors,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(n: usize) -> Arc<Layout> {
        Arc::new(Layout::new(vec![("theta".into(), vec![n])]))
    }

    fn pv(xs: &[f64]) -> ParamVec<f64> {
        ParamVec::from_vec(layout(xs.len()), xs.to_vec()).unwrap()
    }

    fn reference_schedule() -> ScheduleSpec {
        ScheduleSpec {
            lr_max: 1e-3,
            lr_min: 5e-7,
            total_epochs: 5000,
        }
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = reference_schedule();
        assert_eq!(cosine_lr(0, &s), 1e-3);
        assert_eq!(cosine_lr(5000, &s), 5e-7);
        assert_eq!(cosine_lr(7000, &s), 5e-7);
        let mid = cosine_lr(2500, &s);
        assert!((mid - (1e-3 + 5e-7) / 2.0).abs() < 1e-15);
        assert!((mid - 5.0025e-4).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_monotone() {
        let s = reference_schedule();
        let lrs: Vec<f64> = (0..=5000).map(|e| cosine_lr(e, &s)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn decay_only_step() {
        let mut theta = pv(&[1.0]);
        let mut st = AdamWState::new(Arc::clone(theta.layout()), AdamWConfig::with_weight_decay(0.1));
        st.step(&mut theta, &pv(&[0.0]), 1e-3).unwrap();
        assert!((theta.as_slice()[0] - 0.9999).abs() < 1e-15);
        assert_eq!(st.m.as_slice()[0], 0.0);
        assert_eq!(st.v.as_slice()[0], 0.0);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_is_sign_normalized() {
        let mut hp = AdamWConfig::with_weight_decay(0.0);
        hp.eps = 1e-12;
        let mut theta = pv(&[0.5, -0.5, 2.0]);
        let before = theta.clone();
        let mut st = AdamWState::new(Arc::clone(theta.layout()), hp);
        st.step(&mut theta, &pv(&[0.3, 0.3, 0.3]), 1e-3).unwrap();
        for (a, b) in theta.as_slice().iter().zip(before.as_slice()) {
            assert!((b - a - 1e-3).abs() < 1e-12);
        }
    }

    #[test]
    fn first_step_amplification_is_about_a_hundred() {
        // update = lr * g / |g| per element, so |update| / |lr g| = 1 / |g_i|
        let mut hp = AdamWConfig::with_weight_decay(0.0);
        hp.eps = 1e-12;
        let grad = pv(&[0.01, 0.01]);
        let mut theta = pv(&[0.0, 0.0]);
        let mut st = AdamWState::new(Arc::clone(theta.layout()), hp);
        let lr = 1e-3;
        st.step(&mut theta, &grad, lr).unwrap();
        let ratio = st.adaptive_update(lr).norm() / (lr * grad.norm());
        assert!((ratio - 100.0).abs() < 1e-6, "{ratio}");
        // adaptive_update matches the actual displacement when decay is off
        for (u, t) in st.adaptive_update(lr).as_slice().iter().zip(theta.as_slice()) {
            assert!((u + t).abs() < 1e-15);
        }
    }

    #[test]
    fn matches_hand_rolled_reference() {
        // independent scalar AdamW, written directly from the update rule
        let (b1, b2, eps, wd, lr) = (0.9f64, 0.999f64, 1e-8, 0.1, 3e-3);
        let grads = [0.2, -0.1, 0.05, 0.4, -0.3];
        let (mut th, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            th -= lr * wd * th;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            th -= lr * mh / (vh.sqrt() + eps);
        }
        let mut theta = pv(&[0.7]);
        let mut st = AdamWState::new(Arc::clone(theta.layout()), AdamWConfig::with_weight_decay(wd));
        for g in grads {
            st.step(&mut theta, &pv(&[g]), lr).unwrap();
        }
        assert!((theta.as_slice()[0] - th).abs() < 1e-14);
    }

    #[test]
    fn zero_gradients_decay_geometrically() {
        let mut theta = pv(&[2.0, -1.0]);
        let mut st = AdamWState::new(Arc::clone(theta.layout()), AdamWConfig::with_weight_decay(0.1));
        for _ in 0..10 {
            st.step(&mut theta, &pv(&[0.0, 0.0]), 0.01).unwrap();
        }
        let k = (1.0f64 - 0.001).powi(10);
        assert!((theta.as_slice()[0] - 2.0 * k).abs() < 1e-14);
        assert!((theta.as_slice()[1] + k).abs() < 1e-14);
        assert!(st.m.as_slice().iter().chain(st.v.as_slice()).all(|&x| x == 0.0));
    }

    #[test]
    fn functional_step_is_pure() {
        let theta = pv(&[1.0, 2.0]);
        let st = AdamWState::new(Arc::clone(theta.layout()), AdamWConfig::with_weight_decay(0.1));
        let g = pv(&[0.5, -0.5]);
        let a = adamw_step(&theta, &g, &st, 1e-2).unwrap();
        let b = adamw_step(&theta, &g, &st, 1e-2).unwrap();
        assert_eq!(a, b);
        assert_eq!(st.t, 0);
        assert_eq!(theta.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn non_finite_update_is_reported() {
        let mut theta = pv(&[1.0]);
        let mut st = AdamWState::new(Arc::clone(theta.layout()), AdamWConfig::with_weight_decay(0.0));
        let err = st.step(&mut theta, &pv(&[f64::INFINITY]), 1e-3).unwrap_err();
        assert!(matches!(err, Error::Numeric { ref layer, .. } if layer == "theta"));
    }

    #[test]
    fn uniform_second_moment_gives_uniform_effective_lr() {
        let mut theta = pv(&[1.0, 1.0, 1.0]);
        let mut st = AdamWState::new(Arc::clone(theta.layout()), AdamWConfig::with_weight_decay(0.0));
        st.step(&mut theta, &pv(&[0.5, -0.5, 0.5]), 1e-3).unwrap();
        let e = st.effective_lr(1e-3);
        assert!(e.iter().all(|&x| x == e[0]));
    }

    #[test]
    fn bad_hyperparameters_are_listed() {
        let hp = AdamWConfig {
            beta1: 1.0,
            beta2: -0.1,
            eps: 0.0,
            weight_decay: -1.0,
        };
        assert_eq!(hp.problems().len(), 4);
        let s = ScheduleSpec {
            lr_max: 1e-3,
            lr_min: 1e-2,
            total_epochs: 0,
        };
        assert_eq!(s.problems().len(), 2);
    }
}
