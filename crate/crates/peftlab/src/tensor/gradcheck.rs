//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side never touches the tape's backward rules: it only
//! re-evaluates the loss at perturbed parameter values, so it stays an
//! independent oracle for whatever the analytic path computes.

use super::Param;
use crate::{Error, Result};

/// Per-parameter worst relative error from a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub worst_param: Option<String>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passes(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compares analytic gradients against central finite differences.
///
/// `loss_fn(true)` must run forward + backward, leaving gradients on the
/// given params (the harness zeroes them first); `loss_fn(false)` must
/// only evaluate the loss at the params' current values. Relative error
/// per coordinate is `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check(
    mut loss_fn: impl FnMut(bool) -> Result<f64>,
    params: &[(String, Param<f64>)],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    for (_, p) in params {
        p.zero_grad();
    }
    let base = loss_fn(true)?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite: {base}")));
    }
    let analytic: Vec<Vec<f64>> = params.iter().map(|(_, p)| p.grad_vec()).collect();

    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel_err = 0.0f64;
    let mut worst_param = None;

    for ((name, p), grad) in params.iter().zip(&analytic) {
        let original = p.data_vec();
        let mut param_max = 0.0f64;
        for idx in 0..original.len() {
            let mut probe = original.clone();
            probe[idx] = original[idx] + step;
            p.set_data(&probe);
            let up = loss_fn(false)?;
            probe[idx] = original[idx] - step;
            p.set_data(&probe);
            let down = loss_fn(false)?;
            if !up.is_finite() || !down.is_finite() {
                p.set_data(&original);
                return Err(Error::Numeric(format!(
                    "perturbed loss is not finite at {name}[{idx}]"
                )));
            }
            let numeric = (up - down) / (2.0 * step);
            let rel = (grad[idx] - numeric).abs() / numeric.abs().max(1.0);
            if rel > param_max {
                param_max = rel;
            }
        }
        p.set_data(&original);
        if param_max > max_rel_err {
            max_rel_err = param_max;
            worst_param = Some(name.clone());
        }
        per_param.push((name.clone(), param_max));
    }

    Ok(GradCheckReport { per_param, max_rel_err, worst_param, tolerance })
}
