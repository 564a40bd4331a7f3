use alloc::vec::Vec;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - central| / (|analytic| + |central| + 1e-12)`
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

fn eval<F>(f: &F, x: Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let out = f(&mut tape, xv)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares the tape gradient of a scalar function against central
/// differences at every coordinate of `x`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_difference_check_at(f, x, eps, &coords)
}

/// Same as [`finite_difference_check`] restricted to `coords`.
pub fn finite_difference_check_at<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_difference_check_against(&f, &f, x, eps, coords)
}

/// Tape gradient of `f` against central differences of `reference`.
///
/// For ops whose backward deliberately departs from the forward derivative
/// (blocked rows), `reference` freezes the blocked part at its value at `x`.
pub fn finite_difference_check_against<F, R>(f: F, reference: R, x: &Tensor, eps: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
    R: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    let mut grads = tape.backward(out)?;
    let analytic = grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let central = (eval(&reference, plus)? - eval(&reference, minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        if !a.is_finite() || !central.is_finite() {
            return Err(Error::NonFinite {
                context: "finite_difference_check",
                index: i,
            });
        }
        let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}
