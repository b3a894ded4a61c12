//! Counterfactual decomposition of the epoch gradient into a content part
//! (aligned with the mean of shuffled-epoch gradients) and an orthogonal
//! ordering part, plus the leave-one-out check that K shuffles suffice.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::projection::put_solution_cosines;
use crate::metrics::{MetricSet, MetricValue};
use crate::nn::{cosine, dot, norm, ParamVec, ParameterVector};

/// Runs one epoch from a private copy of `start`, calling `step` per batch.
/// `step` must return the batch gradient captured before it applies the
/// optimizer update to the state. Returns the gradient mean over batches.
pub fn mean_epoch_gradient<S: Clone, B>(
    start: &S,
    batches: impl IntoIterator<Item = B>,
    mut step: impl FnMut(&mut S, usize, B) -> Result<ParameterVector>,
) -> Result<ParameterVector> {
    let mut state = start.clone();
    let mut sum: Option<ParameterVector> = None;
    let mut n = 0usize;
    for (i, batch) in batches.into_iter().enumerate() {
        let g = step(&mut state, i, batch)?;
        match &mut sum {
            Some(s) => s.axpy(1.0, &g),
            None => sum = Some(g),
        }
        n += 1;
    }
    let sum = sum.ok_or_else(|| Error::Degenerate("epoch with no batches".into()))?;
    Ok(sum.scaled(1.0 / n as f64))
}

/// Mean of equally weighted vectors.
pub fn mean_of(vs: &[ParameterVector]) -> Result<ParameterVector> {
    let first = vs
        .first()
        .ok_or_else(|| Error::Degenerate("mean of no vectors".into()))?;
    let mut acc = ParamVec::zeros(first.layout().clone());
    for v in vs {
        acc.axpy(1.0, v);
    }
    Ok(acc.scaled(1.0 / vs.len() as f64))
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerDecomposition {
    pub name: String,
    pub content_norm: f64,
    pub ordering_norm: f64,
    pub ordering_fraction: Option<f64>,
    pub ordering_alignment: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    pub g_actual: ParameterVector,
    /// Mean of the shuffled-epoch gradients.
    pub cf_mean: ParameterVector,
    pub g_content: ParameterVector,
    pub g_ordering: ParameterVector,
    pub ordering_fraction: f64,
    pub ordering_alignment: f64,
    /// Each layer decomposed against its own slice of the shuffled mean.
    pub layers: Vec<LayerDecomposition>,
}

/// Projects `actual` on `direction`; returns `(content, ordering)`.
fn split(actual: &[f64], direction: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let dn = norm(direction);
    if dn == 0.0 {
        return None;
    }
    let k = dot(actual, direction) / (dn * dn);
    let content: Vec<f64> = direction.iter().map(|d| k * d).collect();
    let ordering = actual.iter().zip(&content).map(|(a, c)| a - c).collect();
    Some((content, ordering))
}

/// Splits `g_actual` against the normalized mean of `shuffled`.
pub fn decompose(g_actual: &ParameterVector, shuffled: &[ParameterVector]) -> Result<Decomposition> {
    if shuffled.len() < 2 {
        return Err(Error::Input(format!(
            "decomposition needs at least 2 shuffled epochs, got {}",
            shuffled.len()
        )));
    }
    let cf_mean = mean_of(shuffled)?;
    let an = g_actual.norm();
    if an == 0.0 {
        return Err(Error::Degenerate("actual epoch gradient is zero".into()));
    }
    let (content, ordering) = split(g_actual.as_slice(), cf_mean.as_slice())
        .ok_or_else(|| Error::Degenerate("mean shuffled gradient is zero".into()))?;
    let layout = g_actual.layout().clone();
    let g_content = ParamVec::from_vec(layout.clone(), content)?;
    let g_ordering = ParamVec::from_vec(layout, ordering)?;
    let on = g_ordering.norm();

    let layers = g_actual
        .segments()
        .map(|(seg, a)| {
            let m = &cf_mean.as_slice()[seg.range()];
            let an = norm(a);
            match split(a, m) {
                Some((c, o)) => {
                    let on = norm(&o);
                    LayerDecomposition {
                        name: seg.name.clone(),
                        content_norm: norm(&c),
                        ordering_norm: on,
                        ordering_fraction: (an > 0.0).then(|| on * on / (an * an)),
                        ordering_alignment: cosine(a, m),
                    }
                }
                None => LayerDecomposition {
                    name: seg.name.clone(),
                    content_norm: 0.0,
                    ordering_norm: an,
                    ordering_fraction: (an > 0.0).then_some(1.0),
                    ordering_alignment: None,
                },
            }
        })
        .collect();

    Ok(Decomposition {
        ordering_fraction: on * on / (an * an),
        ordering_alignment: cosine(g_actual.as_slice(), cf_mean.as_slice()).unwrap_or(0.0),
        g_actual: g_actual.clone(),
        cf_mean,
        g_content,
        g_ordering,
        layers,
    })
}

impl Decomposition {
    /// `| |a|^2 - |c|^2 - |o|^2 | / |a|^2`.
    pub fn partition_residual(&self) -> f64 {
        let a2 = self.g_actual.dot(&self.g_actual);
        let c2 = self.g_content.dot(&self.g_content);
        let o2 = self.g_ordering.dot(&self.g_ordering);
        (a2 - c2 - o2).abs() / a2
    }

    /// Rows for the `counterfactual` hook; solution cosines need
    /// `delta_ref = theta_ref - theta_prev`.
    pub fn metrics(&self, delta_ref: Option<&ParameterVector>) -> MetricSet {
        let mut out = MetricSet::new();
        out.put("counterfactual_mean_norm", self.cf_mean.norm());
        out.put("content_component_norm", self.g_content.norm());
        out.put("ordering_component_norm", self.g_ordering.norm());
        out.put("ordering_fraction", self.ordering_fraction);
        out.put("ordering_alignment", self.ordering_alignment);
        let comps = [
            ("content", &self.g_content),
            ("ordering", &self.g_ordering),
            ("cf", &self.cf_mean),
        ];
        for l in &self.layers {
            out.put(format!("content_component_norm/{}", l.name), l.content_norm);
            out.put(format!("ordering_component_norm/{}", l.name), l.ordering_norm);
            out.put(format!("ordering_fraction/{}", l.name), l.ordering_fraction);
            out.put(format!("ordering_alignment/{}", l.name), l.ordering_alignment);
        }
        if let Some(d) = delta_ref {
            for (name, v) in comps {
                put_solution_cosines(&mut out, &format!("{name}_grad_cossim_to_solution"), v, d, true);
            }
        }
        out
    }
}

/// Leave-one-out comparison of K-subsets of K+1 shuffled-epoch means.
#[derive(Debug, Clone, Serialize)]
pub struct KValidation {
    pub k: usize,
    /// `|mean of subset|` for each subset omitting epoch `i`.
    pub subset_norms: Vec<f64>,
    /// `|mean of all K+1|`.
    pub full_norm: f64,
    /// `(mean(subset_norms) - full_norm) / full_norm`.
    pub norm_gap: f64,
    pub min_cosine: f64,
    pub mean_cosine: f64,
    /// `full_norm` strictly below every subset norm.
    pub monotone: bool,
    /// Projection content norms `|g_hat . g_actual|`, when `g_actual` is given.
    pub projected_subset_norms: Option<Vec<f64>>,
    pub projected_full_norm: Option<f64>,
}

impl KValidation {
    pub fn passes(&self, max_gap: f64, min_cos: f64) -> bool {
        self.norm_gap < max_gap && self.min_cosine > min_cos && self.monotone
    }

    pub fn metrics(&self) -> MetricSet {
        let mut out = MetricSet::new();
        out.put("k", self.k as f64);
        out.put("norm_gap", self.norm_gap);
        out.put("min_cosine", self.min_cosine);
        out.put("mean_cosine", self.mean_cosine);
        out.put("monotone", if self.monotone { 1.0 } else { 0.0 });
        out.put("full_norm", self.full_norm);
        out.put("subset_norms", MetricValue::List(self.subset_norms.clone()));
        out
    }
}

/// Compares every K-subset mean of `shuffled` (length K+1) with the full
/// mean.
pub fn validate_k(shuffled: &[ParameterVector], g_actual: Option<&ParameterVector>) -> Result<KValidation> {
    let n = shuffled.len();
    if n < 4 {
        return Err(Error::Input(format!(
            "K-validation needs K >= 3, i.e. at least 4 shuffled epochs, got {n}"
        )));
    }
    let full = mean_of(shuffled)?;
    let full_norm = full.norm();
    if full_norm == 0.0 {
        return Err(Error::Degenerate("mean shuffled gradient is zero".into()));
    }
    let subsets: Vec<ParameterVector> = (0..n)
        .map(|skip| {
            let rest: Vec<ParameterVector> = shuffled
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != skip)
                .map(|(_, v)| v.clone())
                .collect();
            mean_of(&rest)
        })
        .collect::<Result<_>>()?;
    let subset_norms: Vec<f64> = subsets.iter().map(|s| s.norm()).collect();
    let cosines: Vec<f64> = subsets
        .iter()
        .map(|s| cosine(s.as_slice(), full.as_slice()).unwrap_or(0.0))
        .collect();
    let mean_subset = subset_norms.iter().sum::<f64>() / n as f64;
    let projected = |v: &ParameterVector, a: &ParameterVector| {
        let vn = v.norm();
        if vn == 0.0 {
            0.0
        } else {
            v.dot(a).abs() / vn
        }
    };
    Ok(KValidation {
        k: n - 1,
        full_norm,
        norm_gap: (mean_subset - full_norm) / full_norm,
        min_cosine: cosines.iter().cloned().fold(f64::INFINITY, f64::min),
        mean_cosine: cosines.iter().sum::<f64>() / n as f64,
        monotone: subset_norms.iter().all(|&s| full_norm < s),
        projected_subset_norms: g_actual.map(|a| subsets.iter().map(|s| projected(s, a)).collect()),
        projected_full_norm: g_actual.map(|a| projected(&full, a)),
        subset_norms,
    })
}
