//! Affine map followed by L2 normalisation: the contrastive heads on both
//! the text and the audio side.

use crate::error::{Error, Result};
use crate::linalg::{add_outer, matvec, matvec_t, norm, normalize_backward};
use crate::params::{accumulate, Grads, ParamStore};

#[derive(Debug, Clone)]
pub(crate) struct UnitProjection {
    pub unit: Vec<f64>,
    pub raw_norm: f64,
}

pub(crate) fn project_unit(
    params: &ParamStore,
    prefix: &str,
    out_dim: usize,
    input: &[f64],
) -> Result<UnitProjection> {
    if input.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateEmbedding(format!(
            "{prefix}: pooled input is the zero vector"
        )));
    }
    let w = params.value(&format!("{prefix}.weight"), &[out_dim, input.len()])?;
    let b = params.value(&format!("{prefix}.bias"), &[out_dim])?;
    let mut raw = matvec(w, out_dim, input);
    for (r, bi) in raw.iter_mut().zip(b) {
        *r += bi;
    }
    let raw_norm = norm(&raw);
    if raw_norm == 0.0 || !raw_norm.is_finite() {
        return Err(Error::DegenerateEmbedding(format!(
            "{prefix}: projected vector has norm {raw_norm}"
        )));
    }
    let unit = raw.iter().map(|v| v / raw_norm).collect();
    Ok(UnitProjection { unit, raw_norm })
}

/// Backpropagates `grad_unit` through the head; returns the input gradient.
pub(crate) fn project_unit_backward(
    params: &ParamStore,
    prefix: &str,
    proj: &UnitProjection,
    input: &[f64],
    grad_unit: &[f64],
    grads: &mut Grads,
) -> Result<Vec<f64>> {
    let out_dim = proj.unit.len();
    let g_raw = normalize_backward(&proj.unit, proj.raw_norm, grad_unit);
    let w = params.value(&format!("{prefix}.weight"), &[out_dim, input.len()])?;
    let mut gw = vec![0.0; w.len()];
    add_outer(&mut gw, &g_raw, input);
    accumulate(grads, &format!("{prefix}.weight"), &gw);
    accumulate(grads, &format!("{prefix}.bias"), &g_raw);
    Ok(matvec_t(w, input.len(), &g_raw))
}
