//! Sliding window of per-batch gradients and its temporal statistics.

use std::collections::VecDeque;

use nalgebra::DMatrix;

use super::{mean, MetricSet};
use crate::nn::ParameterVector;

pub const LAGS: [usize; 6] = [1, 2, 5, 10, 20, 50];
pub const EFFICIENCY_WINDOWS: [usize; 5] = [2, 5, 10, 20, 50];

/// Ring buffer of the most recent flattened gradients, stored as f32.
#[derive(Debug, Clone)]
pub struct GradientWindow {
    capacity: usize,
    entries: VecDeque<(u64, Vec<f32>)>,
}

impl GradientWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "window capacity");
        GradientWindow {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, step: u64, grad: &[f64]) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((step, grad.iter().map(|&x| x as f32).collect()));
    }

    pub fn push_vec(&mut self, step: u64, grad: &ParameterVector) {
        self.push(step, grad.as_slice());
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn steps(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.iter().map(|(s, _)| *s)
    }

    /// Pairwise inner products in f64, oldest entry first.
    fn gram(&self) -> DMatrix<f64> {
        let n = self.entries.len();
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = self.entries[i]
                    .1
                    .iter()
                    .zip(&self.entries[j].1)
                    .map(|(&a, &b)| f64::from(a) * f64::from(b))
                    .sum();
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }
}

fn gram_cos(g: &DMatrix<f64>, i: usize, j: usize) -> Option<f64> {
    let d = (g[(i, i)] * g[(j, j)]).sqrt();
    (d > 0.0).then(|| (g[(i, j)] / d).clamp(-1.0, 1.0))
}

/// Lag cosines, accumulation efficiencies and the singular spectrum of the
/// stacked window. Lags and windows longer than the buffer are omitted.
pub fn batch_dynamics(window: &GradientWindow) -> MetricSet {
    let mut out = MetricSet::new();
    let n = window.len();
    if n == 0 {
        return out;
    }
    let g = window.gram();

    let mut lag_means = Vec::new();
    for lag in LAGS.into_iter().filter(|&l| l < n) {
        let cos: Vec<f64> = (lag..n).filter_map(|t| gram_cos(&g, t, t - lag)).collect();
        let m = mean(&cos);
        out.put(format!("lag_{lag}"), m);
        lag_means.extend(m);
    }
    out.put("autocorrelation_mean", mean(&lag_means));

    for w in EFFICIENCY_WINDOWS.into_iter().filter(|&w| w <= n) {
        let idx = n - w..n;
        let sum_sq: f64 = idx
            .clone()
            .flat_map(|i| idx.clone().map(move |j| (i, j)))
            .map(|(i, j)| g[(i, j)])
            .sum();
        let path: f64 = idx.map(|i| g[(i, i)].sqrt()).sum();
        out.put(
            format!("efficiency_{w}"),
            (path > 0.0).then(|| sum_sq.max(0.0).sqrt() / path),
        );
    }

    let eig = g.symmetric_eigen();
    let s2: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let total: f64 = s2.iter().sum();
    if total > 0.0 {
        let h: f64 = s2
            .iter()
            .map(|s| s / total)
            .filter(|&q| q > 0.0)
            .map(|q| -q * q.ln())
            .sum();
        out.put("effective_rank", h.exp());
        out.put("top1_variance", s2.iter().cloned().fold(0.0, f64::max) / total);
    } else {
        out.put("effective_rank", None);
        out.put("top1_variance", None);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_buffer_keeps_latest() {
        let mut w = GradientWindow::new(3);
        for s in 0..5 {
            w.push(s, &[s as f64]);
        }
        assert_eq!(w.steps().collect::<Vec<_>>(), vec![2, 3, 4]);
    }

    #[test]
    fn identical_gradients() {
        let mut w = GradientWindow::new(50);
        for s in 0..50 {
            w.push(s, &[0.5, -1.0, 2.0]);
        }
        let m = batch_dynamics(&w);
        for lag in [1, 2, 5, 10, 20] {
            assert!((m.num(&format!("lag_{lag}")).unwrap() - 1.0).abs() < 1e-12);
        }
        assert!(m.get("lag_50").is_none());
        for wl in EFFICIENCY_WINDOWS {
            assert!((m.num(&format!("efficiency_{wl}")).unwrap() - 1.0).abs() < 1e-12);
        }
        assert!((m.num("effective_rank").unwrap() - 1.0).abs() < 1e-9);
        assert!((m.num("top1_variance").unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alternating_signs() {
        let mut w = GradientWindow::new(50);
        for s in 0..10 {
            let k = if s % 2 == 0 { 1.0 } else { -1.0 };
            w.push(s, &[k, 2.0 * k]);
        }
        let m = batch_dynamics(&w);
        assert!((m.num("lag_1").unwrap() + 1.0).abs() < 1e-12);
        assert!((m.num("lag_2").unwrap() - 1.0).abs() < 1e-12);
        assert!(m.num("efficiency_2").unwrap().abs() < 1e-12);
    }

    #[test]
    fn orthonormal_window() {
        let n = 20;
        let mut w = GradientWindow::new(50);
        for s in 0..n {
            let mut e = vec![0.0; n];
            e[s] = 1.0;
            w.push(s as u64, &e);
        }
        let m = batch_dynamics(&w);
        for wl in [2usize, 5, 10, 20] {
            let eff = m.num(&format!("efficiency_{wl}")).unwrap();
            assert!((eff - 1.0 / (wl as f64).sqrt()).abs() < 1e-12);
        }
        // identity stack: effective rank equals its size
        assert!((m.num("effective_rank").unwrap() - n as f64).abs() < 1e-9);
        assert_eq!(m.num("lag_1"), Some(0.0));
    }

    #[test]
    fn short_window_emits_only_computable_lags() {
        let mut w = GradientWindow::new(50);
        w.push(0, &[1.0]);
        w.push(1, &[2.0]);
        w.push(2, &[3.0]);
        let m = batch_dynamics(&w);
        assert!(m.get("lag_1").is_some());
        assert!(m.get("lag_2").is_some());
        assert!(m.get("lag_5").is_none());
        assert!(m.get("efficiency_5").is_none());
        assert!(batch_dynamics(&GradientWindow::new(4)).is_empty());
    }
}
