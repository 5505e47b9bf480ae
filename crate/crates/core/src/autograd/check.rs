//! Central finite-difference verification of tape gradients.

use super::{ParamSet, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares the tape gradient of `f` against `(f(p+h) - f(p-h)) / 2h` for
/// every element of every parameter in `params`.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-8)`. Elements whose error
/// exceeds `tol` are listed in the report; they are not turned into an
/// `Err`.
pub fn grad_check<F>(params: &ParamSet, h: f64, tol: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamSet) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let grads = tape.backward(loss)?;

    let eval = |f: &mut F, ps: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, ps)?;
        tape.value(loss).item().ok_or_else(|| Error::NonScalarLoss(tape.value(loss).shape().to_vec()))
    };

    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    for id in params.ids() {
        let analytic = grads.get_or_zero(id, params);
        for k in 0..params.value(id).len() {
            let orig = params.value(id).data()[k];
            work.value_mut(id).data_mut()[k] = orig + h;
            let plus = eval(&mut f, &work)?;
            work.value_mut(id).data_mut()[k] = orig - h;
            let minus = eval(&mut f, &work)?;
            work.value_mut(id).data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if !(rel <= tol) {
                report.failures.push(GradCheckFailure {
                    param: params.get(id).name.clone(),
                    index: k,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
