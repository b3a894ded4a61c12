//! Weight norms, singular spectra and gradient-weight alignment.

use nalgebra::DMatrix;

use super::{mean, MetricSet};
use crate::nn::{cosine, norm, ParameterVector};

/// Singular values of a row-major `rows x cols` matrix, descending. Computed
/// from the eigenvalues of the Gram matrix on the smaller side.
pub fn singular_values(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(data.len(), rows * cols, "matrix extent");
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let m = DMatrix::from_row_slice(rows, cols, data);
    let gram = if rows <= cols {
        &m * m.transpose()
    } else {
        m.transpose() * &m
    };
    let eig = gram.symmetric_eigen();
    let mut sv: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// `(sum s)^2 / sum s^2`; `None` for an all-zero spectrum.
fn participation_rank(sv: &[f64]) -> Option<f64> {
    let s1: f64 = sv.iter().sum();
    let s2: f64 = sv.iter().map(|s| s * s).sum();
    (s2 > 0.0).then(|| s1 * s1 / s2)
}

/// Per-layer weight tracking. Matrix segments get norms, top singular
/// value, effective rank and gradient alignment and feed the aggregates;
/// vector segments report their norm only.
pub fn weight_tracking(params: &ParameterVector, grad: &ParameterVector) -> MetricSet {
    let mut out = MetricSet::new();
    let (mut norms, mut tops, mut ranks, mut aligns) = (vec![], vec![], vec![], vec![]);
    for (seg, w) in params.segments() {
        let wn = norm(w);
        out.put(format!("weight_norm/{}", seg.name), wn);
        let Some((r, c)) = seg.matrix_dims() else { continue };
        let sv = singular_values(w, r, c);
        let top = sv.first().copied().unwrap_or(0.0);
        let rank = participation_rank(&sv);
        let align = cosine(&grad.as_slice()[seg.range()], w);
        out.put(format!("top_sv/{}", seg.name), top);
        out.put(format!("effective_rank/{}", seg.name), rank);
        out.put(format!("grad_weight_align/{}", seg.name), align);
        norms.push(wn);
        tops.push(top);
        ranks.extend(rank);
        aligns.extend(align);
    }
    out.put("total_weight_norm", norms.iter().map(|n| n * n).sum::<f64>().sqrt());
    out.put("mean_weight_norm", mean(&norms));
    out.put("mean_top_sv", mean(&tops));
    out.put("max_top_sv", tops.iter().cloned().reduce(f64::max));
    out.put("mean_effective_rank", mean(&ranks));
    out.put("mean_grad_weight_align", mean(&aligns));
    out
}
