//! Central finite differences against the tape's analytic gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Coordinates whose analytic and numeric gradients are both below this
/// magnitude are treated as agreeing. Structural zeros (e.g. a key bias
/// under softmax shift invariance) otherwise compare rounding noise
/// against rounding noise.
pub const NOISE_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffReport {
    /// Max over coordinates of `|a - n| / (|a| + |n| + 1e-12)`, skipping
    /// coordinates where `|a| + |n| < NOISE_FLOOR`.
    pub max_relative_error: f64,
    /// Same metric without the noise floor.
    pub max_raw_relative_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coordinates: usize,
}

/// Compares gradients of the scalar `f` with respect to every element of
/// every tensor in `inputs` against central differences with step `h`.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Oracle(format!("step {h} must be positive")));
    }
    let eval = |xs: &[Tensor<f64>]| -> Result<(f64, Tape<f64>, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::Oracle(format!(
                "function returned shape {:?}, expected a scalar",
                tape.shape(out)
            )));
        }
        let y = tape.value(out)[0];
        if !y.is_finite() {
            return Err(Error::Oracle(format!("non-finite evaluation {y}")));
        }
        Ok((y, tape, out, vars))
    };

    let with_grad: Vec<Tensor<f64>> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let (_, tape, out, vars) = eval(&with_grad)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.numel()], |g| g.to_vec()))
        .collect();

    let mut report = FiniteDiffReport {
        max_relative_error: 0.0,
        max_raw_relative_error: 0.0,
        worst: (0, 0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coordinates: 0,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for c in 0..grad.len() {
            let orig = probe[ti].data()[c];
            probe[ti].data_mut()[c] = orig + h;
            let (plus, ..) = eval(&probe)?;
            probe[ti].data_mut()[c] = orig - h;
            let (minus, ..) = eval(&probe)?;
            probe[ti].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad[c];
            if !a.is_finite() {
                return Err(Error::Oracle(format!("non-finite analytic gradient at {ti}:{c}")));
            }
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            report.coordinates += 1;
            report.max_raw_relative_error = report.max_raw_relative_error.max(err);
            if a.abs() + numeric.abs() >= NOISE_FLOOR && err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = (ti, c);
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
