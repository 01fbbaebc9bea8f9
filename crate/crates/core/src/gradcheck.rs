//! Central finite-difference gradient checking.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(1, |analytic|, |numeric|)` over all
    /// coordinates.
    pub max_rel_error: f64,
    pub coordinates: usize,
}

/// Compares tape gradients against central differences with step `h`.
///
/// `f` must build a scalar loss from the parameter handles it is given (one
/// per tensor in `params`, same order) and must be deterministic: any noise
/// has to be captured from outside.
pub fn grad_check<F>(params: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: for<'a> Fn(&mut Tape<'a>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let analytic = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        let loss = f(&mut tape, &vars)?;
        tape.backward(loss)?.params()
    };

    let mut work = params.to_vec();
    let mut max_rel_error = 0.0f64;
    let mut coordinates = 0;
    for pi in 0..params.len() {
        for ci in 0..params[pi].len() {
            let orig = params[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[ci] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[ci] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[ci];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            max_rel_error = max_rel_error.max(rel);
            coordinates += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error,
        coordinates,
    })
}
