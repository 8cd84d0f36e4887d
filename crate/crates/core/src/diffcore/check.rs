//! Finite-difference gradient verification.

use super::{DiffError, Tape, Tensor};

/// Compare the analytic gradient of a scalar-valued function against
/// central finite differences.
///
/// `f` is evaluated on a fresh tape per call, so it must build its whole
/// expression from the leaf it is given. Returns the maximum over
/// coordinates of `|analytic - numeric| / max(1, |analytic|)`.
///
/// `h` must lie in `[1e-7, 1e-3]`; outside that window the central
/// difference is dominated by either truncation or cancellation error.
pub fn grad_check<F>(f: F, x: &[f64], shape: &[usize], h: f64) -> Result<f64, DiffError>
where
    F: Fn(&Tensor) -> Result<Tensor, DiffError>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(DiffError::InvalidArgument(format!(
            "grad_check: step {h} outside [1e-7, 1e-3]"
        )));
    }

    let eval = |values: &[f64]| -> Result<f64, DiffError> {
        let tape = Tape::new();
        let leaf = tape.tensor(shape, values.to_vec(), true);
        let out = f(&leaf)?;
        let v = out.scalar_value()?;
        if !v.is_finite() {
            return Err(DiffError::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    // Analytic pass.
    let tape = Tape::new();
    let leaf = tape.tensor(shape, x.to_vec(), true);
    let out = f(&leaf)?;
    if !out.scalar_value()?.is_finite() {
        return Err(DiffError::NonFinite { op: "grad_check" });
    }
    out.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.len()]);

    let mut max_err = 0.0_f64;
    let mut probe = x.to_vec();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = eval(&probe)?;
        probe[i] = orig - h;
        let minus = eval(&probe)?;
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = (a - numeric).abs() / a.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
