//! Gradient norms, consecutive alignment, parameter deltas and path length.

use serde::{Deserialize, Serialize};

use super::MetricSet;
use crate::nn::{cosine, norm, ParameterVector};

/// `total_norm`, `max_component`, `mean_component` and `norm_{layer}`.
pub fn grad_norm_metrics(g: &ParameterVector) -> MetricSet {
    let xs = g.as_slice();
    let mut out = MetricSet::new();
    out.put("total_norm", norm(xs));
    out.put("max_component", xs.iter().fold(0.0f64, |m, x| m.max(x.abs())));
    let mean = if xs.is_empty() {
        0.0
    } else {
        xs.iter().map(|x| x.abs()).sum::<f64>() / xs.len() as f64
    };
    out.put("mean_component", mean);
    for (seg, slice) in g.segments() {
        out.put(format!("norm_{}", seg.name), norm(slice));
    }
    out
}

/// Cosine and angle between consecutive gradients; nulls if either is zero.
pub fn consecutive_cossim(g_t: &ParameterVector, g_prev: &ParameterVector) -> MetricSet {
    let c = cosine(g_t.as_slice(), g_prev.as_slice());
    let mut out = MetricSet::new();
    out.put("cos_sim", c);
    out.put("angle_degrees", c.map(|c| c.acos().to_degrees()));
    out
}

pub fn parameter_delta(new: &ParameterVector, old: &ParameterVector) -> MetricSet {
    let abs = new.sub(old).norm();
    let old_norm = old.norm();
    let mut out = MetricSet::new();
    out.put("relative_delta", (old_norm > 0.0).then(|| abs / old_norm));
    out.put("absolute_delta", abs);
    out.put("param_norm", new.norm());
    out
}

/// Running path length from the initial parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PathTracker {
    pub path_length: f64,
}

impl PathTracker {
    /// Adds the step `prev -> current` and reports path metrics relative to
    /// `initial`.
    pub fn update(
        &mut self,
        initial: &ParameterVector,
        prev: &ParameterVector,
        current: &ParameterVector,
    ) -> MetricSet {
        self.path_length += current.sub(prev).norm();
        let net = current.sub(initial).norm();
        let mut out = MetricSet::new();
        out.put("path_length", self.path_length);
        out.put("net_displacement", net);
        out.put(
            "path_efficiency",
            (self.path_length > 0.0).then(|| net / self.path_length),
        );
        out
    }
}
