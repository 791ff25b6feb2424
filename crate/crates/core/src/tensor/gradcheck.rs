use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared absolutely rather than
/// relatively, so round-off in near-zero partials does not dominate.
const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
    pub max_rel_deviation: f64,
    pub max_abs_deviation: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub passed: bool,
}

/// Compare the tape gradient of `f` at `x` with central differences.
///
/// `f` receives a fresh tape and the variable holding `x` and must return a
/// scalar. It is evaluated `2·len(x) + 1` times.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::contract(format!("finite-difference step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    if !tape.value(y).is_scalar() {
        return Err(Error::contract(format!(
            "checked function must return a scalar, got shape {:?}",
            tape.shape(y)
        )));
    }
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(xv)
        .expect("input was registered as trainable")
        .data()
        .to_vec();

    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(probe);
        let out = f(&mut tape, v)?;
        tape.value(out).item()
    };

    let mut report = GradCheckReport {
        max_rel_deviation: 0.0,
        max_abs_deviation: 0.0,
        worst_index: 0,
        passed: true,
    };
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        if rel > report.max_rel_deviation || !rel.is_finite() {
            report.max_rel_deviation = rel;
            report.worst_index = i;
        }
        report.max_abs_deviation = report.max_abs_deviation.max(abs);
    }
    report.passed = report.max_rel_deviation.is_finite() && report.max_rel_deviation <= tol;
    Ok(report)
}
