//! Central finite-difference gradient checking in 64-bit precision.
//!
//! The numeric side only ever evaluates the forward pass, so it is independent
//! of the reverse sweep it checks.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Largest observed error over all checked elements.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)`
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol && self.checked > 0
    }

    pub fn merge(self, other: Self) -> Self {
        GradCheckReport {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
        }
    }
}

/// Compares reverse-mode gradients of a scalar-valued `build` against central
/// differences with step `h`, for every element of every input.
///
/// `build` receives a fresh graph with `inputs` registered as tracked leaves
/// in order and must return a scalar.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (grads[j] - numeric).abs() / numeric.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
