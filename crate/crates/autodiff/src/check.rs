//! Central finite-difference verification of tape gradients.

use crate::error::AdError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the tape gradient of `f` at `point` with central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`. `f` receives
/// a fresh tape and the variable to differentiate; it must return a
/// single-element variable.
pub fn check_gradient<F, E>(f: F, point: &Tensor, step: f64) -> std::result::Result<f64, E>
where
    F: Fn(&Tape, &Var) -> std::result::Result<Var, E>,
    E: From<AdError>,
{
    Ok(gradient_errors(f, point, step)?.into_iter().fold(0.0, f64::max))
}

/// Per-coordinate relative errors used by [`check_gradient`].
pub fn gradient_errors<F, E>(f: F, point: &Tensor, step: f64) -> std::result::Result<Vec<f64>, E>
where
    F: Fn(&Tape, &Var) -> std::result::Result<Var, E>,
    E: From<AdError>,
{
    if !(step > 0.0) {
        return Err(AdError::InvalidArgument(format!("check_gradient: step must be positive, got {step}")).into());
    }
    let tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&tape, &x)?;
    if !y.item().is_finite() {
        return Err(AdError::NonFinite { context: "check_gradient at point".into() }.into());
    }
    let analytic = tape.gradients(&y, &[&x])?.remove(0);

    let eval = |p: Tensor| -> std::result::Result<f64, E> {
        let tape = Tape::new();
        let x = tape.leaf(p);
        let v = f(&tape, &x)?.item();
        if !v.is_finite() {
            return Err(AdError::NonFinite { context: "check_gradient near point".into() }.into());
        }
        Ok(v)
    };
    let mut errors = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        errors.push(err);
    }
    Ok(errors)
}
