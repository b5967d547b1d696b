//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Coordinate with the largest error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Per checked coordinate: whether `x - h` or `x + h` lands on a
    /// different smooth piece than `x` (see [`Tape::branch_pattern`]).
    pub crosses_kink: Vec<bool>,
}

impl GradCheckReport {
    /// Largest error over the coordinates whose perturbations stay on one
    /// smooth piece, with the number of such coordinates.
    pub fn max_smooth_error(&self) -> (f64, usize) {
        let mut worst = 0.0f64;
        let mut n = 0;
        for ((a, num), &k) in self.analytic.iter().zip(&self.numeric).zip(&self.crosses_kink) {
            if !k {
                worst = worst.max(relative_error(*a, *num));
                n += 1;
            }
        }
        (worst, n)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of `f` at `point` against central differences
/// on every coordinate.
pub fn finite_difference_check<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.numel()).collect();
    finite_difference_check_at(f, point, step, &coords)
}

/// Same as [`finite_difference_check`], restricted to `coords`.
pub fn finite_difference_check_at<F>(
    f: F,
    point: &Tensor,
    step: f64,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(point);
    let y = f(&mut tape, x)?;
    let y0 = tape.scalar(y);
    let pattern = tape.branch_pattern();
    if !y0.is_finite() {
        return Err(Error::NonFinite(format!("function value {y0} at the check point")));
    }
    let grads = tape.backward(y)?;
    let full = grads
        .wrt(x)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; point.numel()]);

    let eval = |values: Vec<f64>| -> Result<(f64, bool)> {
        let mut tape = Tape::new();
        let x = tape.constant_from(point.shape(), values)?;
        let y = f(&mut tape, x)?;
        Ok((tape.scalar(y), tape.branch_pattern() != pattern))
    };

    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    let mut crosses_kink = Vec::with_capacity(coords.len());
    let mut worst = (0.0, coords.first().copied().unwrap_or(0));
    for &i in coords {
        let a = full[i];
        if !a.is_finite() {
            return Err(Error::NonFinite(format!("analytic gradient {a} at coordinate {i}")));
        }
        let mut plus = point.values().to_vec();
        plus[i] += step;
        let mut minus = point.values().to_vec();
        minus[i] -= step;
        let ((fp, kp), (fm, km)) = (eval(plus)?, eval(minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "perturbed values {fp}, {fm} at coordinate {i}"
            )));
        }
        let n = (fp - fm) / (2.0 * step);
        let err = relative_error(a, n);
        if err > worst.0 {
            worst = (err, i);
        }
        analytic.push(a);
        numeric.push(n);
        crosses_kink.push(kp || km);
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
        crosses_kink,
    })
}
