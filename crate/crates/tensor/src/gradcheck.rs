//! Central finite-difference gradient checks in `f64`.
//!
//! The checker only evaluates forward values; it never looks at the
//! reverse pass it is checking.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Step of the central difference.
pub const FD_STEP: f64 = 1e-3;

/// Gradient magnitudes below this are compared absolutely rather than
/// relatively, so truncation noise on near-zero entries does not dominate.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub max_rel_error: f64,
    /// (input, element) where the largest error occurred.
    pub worst: (usize, usize),
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` with central
/// differences over every element of every `requires_grad` input.
pub fn check<F>(inputs: &[Tensor<f64>], f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_with(inputs, f)
}

/// [`check`] for closures with their own error type.
pub fn check_with<F, E>(inputs: &[Tensor<f64>], f: F) -> Result<GradReport, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    check_with_step(inputs, FD_STEP, f)
}

/// [`check_with`] using central differences of half-width `step`.
pub fn check_with_step<F, E>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradReport, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |ts: &[Tensor<f64>]| -> Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.param(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out)[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let mut report = GradReport { max_rel_error: 0.0, worst: (0, 0), analytic: Vec::new(), numeric: Vec::new() };
    let mut probe = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            report.analytic.push(Vec::new());
            report.numeric.push(Vec::new());
            continue;
        }
        let analytic = g.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut numeric = Vec::with_capacity(t.numel());
        for j in 0..t.numel() {
            let orig = t.data()[j];
            probe[i].data_mut()[j] = orig + step;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let n = (up - down) / (2.0 * step);
            let e = relative_error(analytic[j], n);
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = (i, j);
            }
            numeric.push(n);
        }
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}
