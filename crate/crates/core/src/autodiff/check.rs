//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Keeps the relative error defined when both gradients vanish.
pub const RELATIVE_ERROR_GUARD: f64 = 1e-10;

/// Worst coordinate found by a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// `(parameter index, flat coordinate)` of the worst relative error.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    fn empty() -> Self {
        Self {
            max_relative_error: 0.0,
            max_absolute_error: 0.0,
            worst: (0, 0),
            analytic: 0.0,
            numeric: 0.0,
        }
    }

    fn record(&mut self, param: usize, coord: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = relative_error(analytic, numeric);
        self.max_absolute_error = self.max_absolute_error.max(abs);
        if rel > self.max_relative_error {
            self.max_relative_error = rel;
            self.worst = (param, coord);
            self.analytic = analytic;
            self.numeric = numeric;
        }
    }
}

/// `|a - n| / (|a| + |n| + guard)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + RELATIVE_ERROR_GUARD)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
    Ok(f(&tape, &vars)?.item())
}

fn first_gradient<F>(f: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&tape, &vars)?;
    tape.grad_values(out, &vars)
}

fn perturbed(params: &[Tensor], which: usize, coord: usize, delta: f64) -> Vec<Tensor> {
    let mut out = params.to_vec();
    out[which].data_mut()[coord] += delta;
    out
}

/// Compares the tape gradient of scalar `f` against central differences at `params`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let analytic = first_gradient(&f, params)?;
    let mut report = GradCheckReport::empty();
    for (pi, p) in params.iter().enumerate() {
        for c in 0..p.numel() {
            let plus = evaluate(&f, &perturbed(params, pi, c, step))?;
            let minus = evaluate(&f, &perturbed(params, pi, c, -step))?;
            let numeric = (plus - minus) / (2.0 * step);
            report.record(pi, c, analytic[pi].data()[c], numeric);
        }
    }
    Ok(report)
}

/// Checks a double-backward Hessian-vector product against central
/// differences of the first gradient along `direction`.
pub fn hessian_vector_check<F>(
    f: F,
    params: &[Tensor],
    direction: &[Tensor],
    step: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    assert_eq!(params.len(), direction.len());
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.grad(out, &vars, true)?;
        let mut dot = tape.scalar(0.0);
        for (g, d) in grads.iter().zip(direction) {
            dot = dot.add(g.mul(tape.constant(d.clone()))?.sum()?)?;
        }
        tape.grad_values(dot, &vars)?
    };
    let shifted = |sign: f64| -> Vec<Tensor> {
        params
            .iter()
            .zip(direction)
            .map(|(p, d)| {
                let data = p.data().iter().zip(d.data()).map(|(x, v)| x + sign * step * v);
                Tensor::from_parts(p.shape().to_vec(), data.collect())
            })
            .collect()
    };
    let plus = first_gradient(&f, &shifted(1.0))?;
    let minus = first_gradient(&f, &shifted(-1.0))?;
    let mut report = GradCheckReport::empty();
    for pi in 0..params.len() {
        for c in 0..params[pi].numel() {
            let numeric = (plus[pi].data()[c] - minus[pi].data()[c]) / (2.0 * step);
            report.record(pi, c, analytic[pi].data()[c], numeric);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_matches() {
        let a = Tensor::new(vec![3, 3], vec![2.0, 0.5, -0.3, 0.5, 1.0, 0.2, -0.3, 0.2, 3.0]).unwrap();
        let x = Tensor::new(vec![3, 1], vec![0.7, -1.1, 0.4]).unwrap();
        let report = finite_diff_check(
            |tape, p| {
                let a = tape.constant(a.clone());
                p[0].transpose()?.matmul(a)?.matmul(p[0])?.sum()
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let report = finite_diff_check(|tape, _| Ok(tape.scalar(4.0)), &[x], 1e-5).unwrap();
        assert_eq!(report.max_relative_error, 0.0);
    }

    #[test]
    fn cube_second_derivative_matches_finite_differences() {
        let x = Tensor::scalar(2.0);
        let report = hessian_vector_check(
            |_, p| p[0].mul(p[0])?.mul(p[0]),
            &[x],
            &[Tensor::scalar(1.0)],
            1e-4,
        )
        .unwrap();
        assert!((report.analytic - 12.0).abs() < 1e-12);
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }
}
