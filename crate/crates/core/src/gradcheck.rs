//! Central finite-difference check of analytic gradients.
//!
//! The error metric is `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`,
//! i.e. absolute for small gradients and relative for large ones.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EPS_RANGE: (f64, f64) = (1e-7, 1e-3);

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

fn scalar_of(v: &Var) -> Result<f64> {
    let y = v.item()?;
    if !y.is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(y)
}

/// Check `f` at `input`; returns the maximum error.
pub fn grad_check(f: impl Fn(&Var) -> Result<Var>, input: &Tensor, eps: f64) -> Result<f64> {
    let report = grad_check_many(|xs| f(&xs[0]), std::slice::from_ref(input), eps)?;
    Ok(report.max_error)
}

/// Check `f` against every coordinate of every input.
pub fn grad_check_many(
    f: impl Fn(&[Var]) -> Result<Var>,
    inputs: &[Tensor],
    eps: f64,
) -> Result<GradCheckReport> {
    if !(EPS_RANGE.0..=EPS_RANGE.1).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {eps} outside [{}, {}]",
            EPS_RANGE.0, EPS_RANGE.1
        )));
    }
    let leaves: Vec<Var> = inputs.iter().map(|t| Var::leaf(t.detach())).collect();
    let y = f(&leaves)?;
    scalar_of(&y)?;
    let grads = y.backward()?;
    let analytic: Vec<Tensor> = leaves.iter().map(|v| grads.get_or_zeros(v)).collect();

    let mut probe: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
    let eval = |probe: &[Tensor]| -> Result<f64> {
        let consts: Vec<Var> = probe.iter().map(|t| Var::constant(t.clone())).collect();
        scalar_of(&f(&consts)?)
    };

    let mut report = GradCheckReport {
        max_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for k in 0..probe.len() {
        for i in 0..probe[k].numel() {
            let x0 = probe[k].data()[i];
            probe[k].data_mut()[i] = x0 + eps;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - eps;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[k].data()[i];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if report.coordinates == 1 || err > report.max_error {
                report.max_error = err;
                report.worst = (k, i);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
