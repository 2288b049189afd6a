use crate::error::{Error, Result};
use crate::model::GradientVector;

/// Below this squared norm the reference gradient is treated as zero.
const REF_NORM_SQ_EPS: f64 = 1e-12;

/// Relative slack on the conflict test, so a projected gradient whose dot
/// product is zero up to rounding is not projected again.
const CONFLICT_TOL: f64 = 1e-12;

/// A-GEM projection of `g` against the memory reference gradient `g_ref`.
///
/// When the two conflict (`g . g_ref < 0`, beyond rounding) the component of `g` along
/// `g_ref` is removed, leaving the closest vector with a nonnegative dot
/// product; otherwise `g` is returned unchanged.
pub fn agem_project(g: &GradientVector, g_ref: &GradientVector) -> Result<GradientVector> {
    if g.len() != g_ref.len() {
        return Err(Error::Input(format!(
            "gradient length {} does not match reference length {}",
            g.len(),
            g_ref.len()
        )));
    }
    let ref_sq = g_ref.norm_sq();
    if ref_sq < REF_NORM_SQ_EPS {
        return Ok(g.clone());
    }
    let dot = g.dot(g_ref);
    if dot >= -CONFLICT_TOL * (g.norm_sq() * ref_sq).sqrt() {
        return Ok(g.clone());
    }
    let scale = dot / ref_sq;
    Ok(GradientVector {
        values: g
            .values
            .iter()
            .zip(&g_ref.values)
            .map(|(a, r)| a - scale * r)
            .collect(),
    })
}
