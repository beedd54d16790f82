//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward values; it never touches
//! the backward kernels it is checking.

use crate::autodiff::{grad, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step, in `(0, 1e-2]`.
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many evenly spaced coordinates per tensor.
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords_per_param: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordError {
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coords: Vec<CoordError>,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn coords_to_check(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => (0..m).map(|k| k * len / m).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares supplied analytic gradients against central differences of
/// `value`.
pub fn compare_gradients(
    params: &[Tensor],
    analytic: &[Tensor],
    cfg: &GradCheckConfig,
    mut value: impl FnMut(&[Tensor]) -> Result<f64>,
) -> Result<GradCheckReport> {
    assert!(cfg.step > 0.0 && cfg.step <= 1e-2, "step must lie in (0, 1e-2]");
    let mut work: Vec<Tensor> = params.to_vec();
    let mut coords = Vec::new();
    for (p, g) in analytic.iter().enumerate() {
        for c in coords_to_check(params[p].len(), cfg.max_coords_per_param) {
            let orig = params[p].data()[c];
            work[p].data_mut()[c] = orig + cfg.step;
            let up = value(&work)?;
            work[p].data_mut()[c] = orig - cfg.step;
            let down = value(&work)?;
            work[p].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let analytic = g.data()[c];
            coords.push(CoordError {
                param: p,
                coord: c,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
            });
        }
    }
    let max_rel_error = coords.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        coords,
        max_rel_error,
        passed: max_rel_error < cfg.tolerance,
    })
}

/// Records `f` on a fresh tape with `params` as differentiable leaves, takes
/// the reverse-mode gradient, and checks it against central differences of
/// the forward value of `f`.
pub fn check_gradients(
    params: &[Tensor],
    cfg: &GradCheckConfig,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let forward = |values: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = forward(params)?;
    let analytic = grad(&tape, out, &vars).grads;
    compare_gradients(params, &analytic, cfg, |values| {
        let (tape, _, out) = forward(values)?;
        Ok(tape.value(out).item())
    })
}

/// [`check_gradients`] with every coordinate checked.
pub fn finite_diff_check(
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
    params: &[Tensor],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let cfg = GradCheckConfig {
        step,
        tolerance,
        max_coords_per_param: None,
    };
    check_gradients(params, &cfg, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_nearly_exact() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        let r = finite_diff_check(
            |t, p| {
                let sq = t.mul(p[0], p[0]);
                Ok(t.sum(sq))
            },
            &[x],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(r.passed, "{}", r.max_rel_error);
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.5]).unwrap();
        // d/dx Σx² = 2x; report 2x + 0.1 instead
        let wrong = x.map(|v| 2.0 * v + 0.1);
        let r = compare_gradients(&[x], &[wrong], &GradCheckConfig::default(), |p| {
            Ok(p[0].data().iter().map(|v| v * v).sum())
        })
        .unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 1e-2);
    }

    #[test]
    fn coordinate_subsampling() {
        assert_eq!(coords_to_check(10, Some(3)), vec![0, 3, 6]);
        assert_eq!(coords_to_check(2, Some(5)), vec![0, 1]);
    }
}
