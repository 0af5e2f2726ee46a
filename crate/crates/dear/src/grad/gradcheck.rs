//! Central-finite-difference gradient verification.
//!
//! The checker re-evaluates a user-supplied forward closure at perturbed
//! inputs, entirely independent of the tape's backward pass, and compares
//! the numeric Jacobian-vector products against analytic gradients.

use crate::error::Result;
use crate::grad::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Outcome of one gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
}

/// Relative error with an absolute floor so near-zero gradients compare
/// sanely: `|a - n| / max(|a|, |n|, floor)`.
fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Verify analytic gradients of a scalar-valued function of several
/// tensors against central finite differences.
///
/// `forward` must be a pure function of its inputs (freeze any randomness
/// before building the closure). `analytic` holds one gradient tensor per
/// input, shaped like that input.
pub fn check_gradients(
    inputs: &[Tensor],
    analytic: &[Tensor],
    step: f64,
    forward: &mut dyn FnMut(&[Tensor]) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_coord: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for coord in 0..grad.numel() {
            let orig = work[ti].data()[coord];
            work[ti].data_mut()[coord] = orig + step;
            let plus = forward(&work)?;
            work[ti].data_mut()[coord] = orig - step;
            let minus = forward(&work)?;
            work[ti].data_mut()[coord] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = rel_error(grad.data()[coord], numeric, 1e-6);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_input = ti;
                report.worst_coord = coord;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_checks_out() {
        // f(x) = sum(x^2), grad = 2x
        let x = Tensor::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let grad = x.map(|v| 2.0 * v);
        let report = check_gradients(
            std::slice::from_ref(&x),
            std::slice::from_ref(&grad),
            DEFAULT_STEP,
            &mut |inputs| Ok(inputs[0].data().iter().map(|v| v * v).sum()),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        let wrong = x.map(|v| 3.0 * v);
        let report = check_gradients(
            std::slice::from_ref(&x),
            std::slice::from_ref(&wrong),
            DEFAULT_STEP,
            &mut |inputs| Ok(inputs[0].data().iter().map(|v| v * v).sum()),
        )
        .unwrap();
        assert!(report.max_rel_error > 0.1);
    }
}
