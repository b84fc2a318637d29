use crate::error::{Error, Result};

/// Outcome of a central finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |g_fd − g_an| / max(1, |g_fd|, |g_an|)`.
    pub max_relative_error: f64,
    pub worst_coordinate: usize,
    pub step_size: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }
}

/// Compares `analytic_grad` with central differences of `f` around `point`.
pub fn finite_diff_check<F>(f: F, analytic_grad: &[f64], point: &[f64], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> f64,
{
    if analytic_grad.len() != point.len() {
        return Err(Error::Dimension(format!(
            "gradient has {} entries, point has {}",
            analytic_grad.len(),
            point.len()
        )));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Invalid(format!("step size {step}")));
    }
    let mut probe = point.to_vec();
    let mut worst = (0.0f64, 0usize);
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let plus = f(&probe);
        probe[i] = point[i] - step;
        let minus = f(&probe);
        probe[i] = point[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at probe of coordinate {i}")));
        }
        let fd = (plus - minus) / (2.0 * step);
        let an = analytic_grad[i];
        let rel = (fd - an).abs() / 1f64.max(fd.abs()).max(an.abs());
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_coordinate: worst.1,
        step_size: step,
    })
}
