//! Per-hook metric families and the row type they emit.
//!
//! Every function here is pure over its inputs. Key names follow the
//! published hook tables so CSV headers line up with reference data.
//! Undefined quantities (zero-norm cosines and the like) are emitted as
//! explicit nulls.

mod adam;
mod geometry;
pub(crate) mod projection;
mod weights;
mod window;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use adam::{adam_introspect, AdamProbe};
pub use geometry::{consecutive_cossim, grad_norm_metrics, parameter_delta, PathTracker};
pub use projection::{projection_to_solution, solution_projection_metrics, ReferenceModel};
pub use weights::{singular_values, weight_tracking};
pub use window::{batch_dynamics, GradientWindow, EFFICIENCY_WINDOWS, LAGS};

/// A single metric value: a scalar, an explicit null, a list, or a
/// frequency-keyed table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricValue {
    Num(f64),
    Null,
    List(Vec<f64>),
    Table(BTreeMap<String, f64>),
}

impl MetricValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            MetricValue::Num(x) => Some(*x),
            _ => None,
        }
    }
}

impl From<f64> for MetricValue {
    fn from(x: f64) -> Self {
        if x.is_finite() {
            MetricValue::Num(x)
        } else {
            MetricValue::Null
        }
    }
}

impl From<Option<f64>> for MetricValue {
    fn from(x: Option<f64>) -> Self {
        x.map_or(MetricValue::Null, MetricValue::from)
    }
}

/// Ordered key/value pairs produced by one hook invocation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricSet(pub Vec<(String, MetricValue)>);

impl MetricSet {
    pub fn new() -> Self {
        MetricSet(Vec::new())
    }

    pub fn put(&mut self, key: impl Into<String>, value: impl Into<MetricValue>) {
        self.0.push((key.into(), value.into()));
    }

    pub fn extend(&mut self, other: MetricSet) {
        self.0.extend(other.0);
    }

    pub fn get(&self, key: &str) -> Option<&MetricValue> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    /// Scalar lookup; `None` for absent keys and nulls alike.
    pub fn num(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(MetricValue::as_f64)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}
