//! Central-difference gradient verification.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Value};

/// Max relative error between an analytic gradient and a reference,
/// `max_i |a_i − r_i| / max(1, |a_i|)`.
pub fn max_rel_error(analytic: &[f64], reference: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| (a - r).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Checks the reverse-mode gradients of a scalar-valued function against
/// central finite differences at `point`.
///
/// Returns the max relative error over all coordinates of all inputs.
/// `step` must lie in `(0, 1e-3]`.
pub fn grad_check<F>(f: F, point: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Value]) -> Result<Value>,
{
    if !(step > 0.0 && step <= 1e-3) {
        return Err(Error::Parameter(format!(
            "grad_check step must be in (0, 1e-3], got {step}"
        )));
    }

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vals: Vec<Value> = tensors.iter().map(|t| tape.constant(t.clone())).collect();
        let root = f(&mut tape, &vals)?;
        tape.scalar_value(root)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vals: Vec<Value> = point.iter().map(|t| tape.var(t.clone())).collect();
    let root = f(&mut tape, &vals)?;
    if !tape.tensor(root).is_scalar() {
        return Err(Error::Contract(format!(
            "grad_check requires a scalar-valued function, got shape {:?}",
            tape.shape(root)
        )));
    }
    tape.backward(root)?;

    let mut worst = 0.0f64;
    for (ti, v) in vals.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .ok_or_else(|| Error::Contract("grad_check input received no gradient".into()))?
            .to_vec();
        for ci in 0..analytic.len() {
            let mut plus = point.to_vec();
            plus[ti].data_mut()[ci] += step;
            let mut minus = point.to_vec();
            minus[ti].data_mut()[ci] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic[ci];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
