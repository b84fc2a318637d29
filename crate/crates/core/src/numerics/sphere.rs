use crate::error::{Error, Result};

use super::tensor::{norm, Tensor2};

/// Returns `v / ‖v‖₂`.
pub fn project_to_sphere(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::NonFinite("vector norm".into()));
    }
    if n == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Projects every row of `t` onto the unit sphere in place.
pub fn normalize_rows(t: &mut Tensor2) -> Result<()> {
    for r in 0..t.rows() {
        let unit = project_to_sphere(t.row(r))?;
        t.row_mut(r).copy_from_slice(&unit);
    }
    Ok(())
}
