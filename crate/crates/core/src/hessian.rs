//! Finite-difference Hessian-vector products and the per-step entanglement
//! measurement `e = eta * H_B g_A`, `c = g_B_obs + e`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricSet;
use crate::nn::{cosine, norm, ParameterVector};

/// Which vector the Hessian is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntanglementVariant {
    /// `e = eta * H_B g_A` with the raw previous-batch gradient.
    #[default]
    RawGradient,
    /// `e = H_B (theta - theta')`, the actual optimizer displacement.
    Displacement,
}

/// Forward-difference HVP `(grad(theta + eps v) - grad(theta)) / eps` with
/// `eps = 1e-4 / |v|`. `base` may supply `grad(theta)` if already known.
pub fn hvp_fd(
    mut grad: impl FnMut(&ParameterVector) -> Result<ParameterVector>,
    theta: &ParameterVector,
    v: &ParameterVector,
    base: Option<&ParameterVector>,
) -> Result<ParameterVector> {
    let vn = v.norm();
    if vn == 0.0 {
        return Err(Error::Degenerate("Hessian-vector product along a zero vector".into()));
    }
    let eps = 1e-4 / vn;
    let mut shifted = theta.clone();
    shifted.axpy(eps, v);
    let g1 = grad(&shifted)?;
    let g0 = match base {
        Some(b) => b.clone(),
        None => grad(theta)?,
    };
    Ok(g1.sub(&g0).scaled(1.0 / eps))
}

/// Central-difference HVP with the same step size, for oracle checks.
pub fn hvp_central(
    mut grad: impl FnMut(&ParameterVector) -> Result<ParameterVector>,
    theta: &ParameterVector,
    v: &ParameterVector,
) -> Result<ParameterVector> {
    let vn = v.norm();
    if vn == 0.0 {
        return Err(Error::Degenerate("Hessian-vector product along a zero vector".into()));
    }
    let eps = 1e-4 / vn;
    let mut plus = theta.clone();
    plus.axpy(eps, v);
    let mut minus = theta.clone();
    minus.axpy(-eps, v);
    Ok(grad(&plus)?.sub(&grad(&minus)?).scaled(0.5 / eps))
}

#[derive(Debug, Clone)]
pub struct LayerEntanglement {
    pub name: String,
    pub entanglement_norm: f64,
    pub content_norm: f64,
    pub energy_ratio: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EntanglementStep {
    /// Entanglement term.
    pub e: ParameterVector,
    /// Reconstructed content term `g_B_obs + e`.
    pub c: ParameterVector,
    pub observed_norm: f64,
    pub entanglement_norm: f64,
    pub content_norm: f64,
    pub energy_ratio: Option<f64>,
    pub ent_content_cossim: Option<f64>,
    /// Curvature along the probed direction.
    pub rayleigh_quotient: f64,
    /// `|H d| / |d|` for the probed direction `d`.
    pub amplification_ratio: f64,
    pub edge_of_stability: f64,
    /// `cos(e_t, e_{t-1})`, absent on the first step of a burst.
    pub coherence: Option<f64>,
    pub layers: Vec<LayerEntanglement>,
}

/// Builds the entanglement measurement from the observed gradient and the
/// curvature probe `H_B d` along `direction`, with `e = scale * H_B d`.
pub fn assemble_step(
    g_b_obs: &ParameterVector,
    direction: &ParameterVector,
    h_dir: &ParameterVector,
    scale: f64,
    eta: f64,
    prev_e: Option<&ParameterVector>,
) -> EntanglementStep {
    let e = h_dir.scaled(scale);
    let c = g_b_obs.add(&e);
    let observed_norm = g_b_obs.norm();
    let entanglement_norm = e.norm();
    let dn = direction.norm();
    let amplification_ratio = h_dir.norm() / dn;
    let layers = e
        .segments()
        .map(|(seg, es)| {
            let r = seg.range();
            let gn = norm(&g_b_obs.as_slice()[r.clone()]);
            let en = norm(es);
            LayerEntanglement {
                name: seg.name.clone(),
                entanglement_norm: en,
                content_norm: norm(&c.as_slice()[r]),
                energy_ratio: (gn > 0.0).then(|| en * en / (gn * gn)),
            }
        })
        .collect();
    EntanglementStep {
        observed_norm,
        entanglement_norm,
        content_norm: c.norm(),
        energy_ratio: (observed_norm > 0.0)
            .then(|| entanglement_norm * entanglement_norm / (observed_norm * observed_norm)),
        ent_content_cossim: cosine(e.as_slice(), c.as_slice()),
        rayleigh_quotient: direction.dot(h_dir) / (dn * dn),
        amplification_ratio,
        edge_of_stability: amplification_ratio * 2.0 * eta,
        coherence: prev_e.and_then(|p| cosine(e.as_slice(), p.as_slice())),
        layers,
        e,
        c,
    }
}

/// One probe: `theta_after` are the parameters after batch A's optimizer
/// step, `grad_b` evaluates batch B's gradient (deterministically) at a
/// given point. For [`EntanglementVariant::Displacement`], `theta_before`
/// must hold the parameters before the step.
#[allow(clippy::too_many_arguments)]
pub fn entanglement_step(
    g_a: &ParameterVector,
    theta_before: Option<&ParameterVector>,
    theta_after: &ParameterVector,
    g_b_obs: &ParameterVector,
    eta: f64,
    variant: EntanglementVariant,
    prev_e: Option<&ParameterVector>,
    grad_b: impl FnMut(&ParameterVector) -> Result<ParameterVector>,
) -> Result<EntanglementStep> {
    let (direction, scale) = match variant {
        EntanglementVariant::RawGradient => (g_a.clone(), eta),
        EntanglementVariant::Displacement => {
            let before = theta_before
                .ok_or_else(|| Error::Input("displacement variant needs the pre-step parameters".into()))?;
            (before.sub(theta_after), 1.0)
        }
    };
    let h_dir = hvp_fd(grad_b, theta_after, &direction, None)?;
    Ok(assemble_step(g_b_obs, &direction, &h_dir, scale, eta, prev_e))
}

impl EntanglementStep {
    /// Rows for the `hessian` hook. `delta_ref` is `theta_ref - theta` at
    /// the probed point, when a reference model is loaded.
    pub fn metrics(&self, delta_ref: Option<&ParameterVector>) -> MetricSet {
        let mut out = MetricSet::new();
        out.put("entanglement_norm", self.entanglement_norm);
        out.put("content_norm", self.content_norm);
        out.put("observed_grad_norm", self.observed_norm);
        out.put("entanglement_energy_ratio", self.energy_ratio);
        out.put("entanglement_content_cossim", self.ent_content_cossim);
        out.put("rayleigh_quotient", self.rayleigh_quotient);
        out.put("amplification_ratio", self.amplification_ratio);
        out.put("edge_of_stability", self.edge_of_stability);
        out.put("entanglement_coherence", self.coherence);
        if let Some(d) = delta_ref {
            let neg = |v: &[f64], t: &[f64]| cosine(v, t).map(|c| -c);
            out.put("entanglement_cossim_to_solution", neg(self.e.as_slice(), d.as_slice()));
            out.put("content_cossim_to_solution", neg(self.c.as_slice(), d.as_slice()));
            for (seg, es) in self.e.segments() {
                let r = seg.range();
                out.put(
                    format!("entanglement_cossim_to_solution/{}", seg.name),
                    neg(es, &d.as_slice()[r.clone()]),
                );
                out.put(
                    format!("content_cossim_to_solution/{}", seg.name),
                    neg(&self.c.as_slice()[r.clone()], &d.as_slice()[r]),
                );
            }
        }
        for l in &self.layers {
            out.put(format!("entanglement_norm/{}", l.name), l.entanglement_norm);
            out.put(format!("content_norm/{}", l.name), l.content_norm);
            out.put(format!("entanglement_energy_ratio/{}", l.name), l.energy_ratio);
        }
        out
    }
}
