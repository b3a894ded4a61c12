//! Introspection of the AdamW state at a training step.

use super::projection::signed_cosine;
use super::{MetricSet, ReferenceModel};
use crate::nn::{cosine, dot, norm, ParameterVector};

/// Quantities captured around one optimizer step.
#[derive(Debug, Clone)]
pub struct AdamProbe {
    /// Raw gradient fed to the step.
    pub grad: ParameterVector,
    /// First moment after the step.
    pub m: ParameterVector,
    /// Adaptive update `lr * m_hat / (sqrt(v_hat) + eps)`, decay excluded.
    pub update: ParameterVector,
    /// `lr / (sqrt(v_hat) + eps)` per element.
    pub effective_lr: Vec<f64>,
    pub lr: f64,
    /// Parameters before the step.
    pub theta: ParameterVector,
}

/// Tier-1 metrics always; Tier-2 solution cosines only with a reference.
/// Cosines against the solution use the vectors as stored (gradient sign),
/// so the optimizer amplification is a difference of like-signed cosines.
pub fn adam_introspect(probe: &AdamProbe, reference: Option<&ReferenceModel>) -> MetricSet {
    let (g, u) = (probe.grad.as_slice(), probe.update.as_slice());
    let mut out = MetricSet::new();
    out.put("momentum_grad_cossim", cosine(probe.m.as_slice(), g));

    let sgd = probe.lr.abs() * norm(g);
    out.put("amplification_ratio", (sgd > 0.0).then(|| norm(u) / sgd));

    let (gg, un) = (dot(g, g), norm(u));
    let deflection = (gg > 0.0 && un > 0.0).then(|| {
        let k = dot(u, g) / gg;
        let perp: f64 = u.iter().zip(g).map(|(a, b)| (a - k * b).powi(2)).sum::<f64>().sqrt();
        perp / un
    });
    out.put("update_deflection", deflection);

    let e = &probe.effective_lr;
    let cv = if e.is_empty() {
        None
    } else {
        let n = e.len() as f64;
        let mu = e.iter().sum::<f64>() / n;
        let var = e.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
        (mu > 0.0).then(|| var.sqrt() / mu)
    };
    out.put("effective_lr_cv", cv);

    if let Some(r) = reference {
        let delta = r.delta_from(&probe.theta);
        let d = delta.as_slice();
        let m_cos = signed_cosine(probe.m.as_slice(), d, false);
        let u_cos = signed_cosine(u, d, false);
        let g_cos = signed_cosine(g, d, false);
        out.put("momentum_solution_cossim", m_cos);
        out.put("update_solution_cossim", u_cos);
        out.put("grad_solution_cossim", g_cos);
        out.put("optimizer_solution_amplification", u_cos.zip(g_cos).map(|(a, b)| a - b));
    }
    out
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::nn::{Layout, ParamVec};

    fn pv(xs: &[f64]) -> ParameterVector {
        let layout = Arc::new(Layout::new(vec![("t".into(), vec![xs.len()])]));
        ParamVec::from_vec(layout, xs.to_vec()).unwrap()
    }

    fn probe(grad: &[f64], update: &[f64], eff: Vec<f64>) -> AdamProbe {
        AdamProbe {
            grad: pv(grad),
            m: pv(grad),
            update: pv(update),
            effective_lr: eff,
            lr: 1e-3,
            theta: pv(&vec![0.0; grad.len()]),
        }
    }

    #[test]
    fn parallel_update_has_no_deflection() {
        let m = adam_introspect(&probe(&[1.0, 2.0], &[2.0, 4.0], vec![1.0, 1.0]), None);
        assert!(m.num("update_deflection").unwrap().abs() < 1e-15);
        assert_eq!(m.num("effective_lr_cv"), Some(0.0));
        assert!((m.num("momentum_grad_cossim").unwrap() - 1.0).abs() < 1e-15);
        assert!(m.get("grad_solution_cossim").is_none());
    }

    #[test]
    fn orthogonal_update_is_fully_deflected() {
        let m = adam_introspect(&probe(&[1.0, 0.0], &[0.0, 3.0], vec![1.0, 3.0]), None);
        assert!((m.num("update_deflection").unwrap() - 1.0).abs() < 1e-15);
        assert!((m.num("effective_lr_cv").unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sign_normalized_first_step_amplifies_by_inverse_gradient() {
        // first-step update is lr * sign(g) per element
        let m = adam_introspect(&probe(&[0.01, 0.01], &[1e-3, 1e-3], vec![0.1, 0.1]), None);
        assert!((m.num("amplification_ratio").unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_gives_nulls() {
        let m = adam_introspect(&probe(&[0.0, 0.0], &[0.0, 0.0], vec![1.0, 1.0]), None);
        assert_eq!(m.num("amplification_ratio"), None);
        assert_eq!(m.num("update_deflection"), None);
        assert_eq!(m.num("momentum_grad_cossim"), None);
    }
}
