//! Alignment of gradients and displacements with a known solution.

use super::{mean, MetricSet};
use crate::error::{Error, Result};
use crate::nn::{cosine, ModelConfig, ParameterVector};

/// Parameters of a completed run used as the solution direction.
#[derive(Debug, Clone)]
pub struct ReferenceModel {
    pub params: ParameterVector,
    pub config: ModelConfig,
    /// Where the parameters came from (run directory or file).
    pub source: String,
}

impl ReferenceModel {
    pub fn check_compatible(&self, cfg: &ModelConfig) -> Result<()> {
        let same = self.config.p == cfg.p
            && self.config.d_model == cfg.d_model
            && self.config.n_heads == cfg.n_heads
            && self.config.d_ff == cfg.d_ff
            && self.config.n_layers == cfg.n_layers;
        if same {
            Ok(())
        } else {
            Err(Error::Input(format!(
                "reference model from {} has a different architecture",
                self.source
            )))
        }
    }

    /// `theta_ref - theta`.
    pub fn delta_from(&self, theta: &ParameterVector) -> ParameterVector {
        self.params.sub(theta)
    }
}

/// `cos(+-v, theta_ref - theta)`; the sign flips `v` when it is a
/// gradient-like quantity whose descent direction is `-v`.
pub fn projection_to_solution(
    v: &ParameterVector,
    theta: &ParameterVector,
    theta_ref: &ParameterVector,
    descent: bool,
) -> Option<f64> {
    let delta = theta_ref.sub(theta);
    signed_cosine(v.as_slice(), delta.as_slice(), descent)
}

pub(crate) fn signed_cosine(v: &[f64], target: &[f64], descent: bool) -> Option<f64> {
    cosine(v, target).map(|c| if descent { -c } else { c })
}

/// Emits `key` for the whole vector and `key/{layer}` per segment. Returns
/// the per-layer values that were defined.
pub(crate) fn put_solution_cosines(
    out: &mut MetricSet,
    key: &str,
    v: &ParameterVector,
    delta_ref: &ParameterVector,
    descent: bool,
) -> Vec<f64> {
    out.put(key, signed_cosine(v.as_slice(), delta_ref.as_slice(), descent));
    per_layer(out, key, v, delta_ref, descent)
}

fn per_layer(
    out: &mut MetricSet,
    key: &str,
    v: &ParameterVector,
    delta_ref: &ParameterVector,
    descent: bool,
) -> Vec<f64> {
    let mut defined = Vec::new();
    for (seg, slice) in v.segments() {
        let c = signed_cosine(slice, &delta_ref.as_slice()[seg.range()], descent);
        out.put(format!("{key}/{}", seg.name), c);
        defined.extend(c);
    }
    defined
}

/// The `gradient_projection` family: gradient and epoch displacement
/// against `theta_ref - theta_prev`.
pub fn solution_projection_metrics(
    grad: &ParameterVector,
    theta_prev: &ParameterVector,
    theta_now: &ParameterVector,
    reference: &ReferenceModel,
) -> MetricSet {
    let delta_ref = reference.delta_from(theta_prev);
    let disp = theta_now.sub(theta_prev);
    let mut out = MetricSet::new();
    let g_layers = per_layer(&mut out, "grad_cossim_to_solution", grad, &delta_ref, true);
    let d_layers = per_layer(&mut out, "disp_cossim_to_solution", &disp, &delta_ref, false);
    out.put(
        "overall_grad_cossim_to_solution",
        signed_cosine(grad.as_slice(), delta_ref.as_slice(), true),
    );
    out.put(
        "overall_disp_cossim_to_solution",
        signed_cosine(disp.as_slice(), delta_ref.as_slice(), false),
    );
    out.put("mean_layer_grad_cossim_to_solution", mean(&g_layers));
    out.put("mean_layer_disp_cossim_to_solution", mean(&d_layers));
    out.put("displacement_norm", disp.norm());
    out.put("distance_to_reference", reference.delta_from(theta_now).norm());
    out
}
