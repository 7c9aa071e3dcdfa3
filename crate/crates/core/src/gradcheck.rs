//! Central finite-difference checks of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Denominator floor of the relative error, so gradients that are zero up to
/// round-off compare in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

fn eval_scalar<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Probe(format!(
            "function must return a scalar, got shape {:?}",
            tape.shape(out)
        )));
    }
    let v = tape.scalar(out);
    if !v.is_finite() {
        return Err(Error::Probe(format!("non-finite loss {v}")));
    }
    Ok(v)
}

/// Compares tape gradients of `f` at `params` against central differences with
/// the given `step`, element by element.
pub fn check_gradients<F>(f: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.scalar(out).is_finite() {
        return Err(Error::Probe(format!(
            "non-finite loss {}",
            tape.scalar(out)
        )));
    }
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        tol,
        passed: true,
    };
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params[pi].shape()));
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            probe[pi].data_mut()[ei] = orig + step;
            let up = eval_scalar(&f, &probe)?;
            probe[pi].data_mut()[ei] = orig - step;
            let down = eval_scalar(&f, &probe)?;
            probe[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[ei];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((pi, ei));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
