use serde::Serialize;

use super::tape::{Tape, Var};
use super::tensor::NamedParams;
use crate::error::{Error, Result};

/// Below this magnitude on both sides a coordinate is judged by absolute error.
pub const SMALL_GRADIENT: f64 = 1e-6;
/// Absolute tolerance used for small-gradient coordinates.
pub const ABS_FALLBACK: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct FiniteDiffReport {
    pub max_rel_err: f64,
    pub max_abs_err_small: f64,
    /// `(parameter, flat index)` of the worst relative-error coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares the tape's reverse-mode gradient of `output` with central differences.
///
/// Every coordinate of every tensor in `params` is perturbed by `±step` and
/// the tape is replayed. Coordinates where both gradients are below
/// [`SMALL_GRADIENT`] are checked against [`ABS_FALLBACK`] instead.
pub fn finite_diff_check(
    tape: &Tape,
    output: Var,
    params: &NamedParams,
    step: f64,
    tolerance: f64,
) -> Result<FiniteDiffReport> {
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::usage(format!("finite-difference step {step} outside (0, 1e-2]")));
    }
    if tape.try_value(output)?.len() != 1 {
        return Err(Error::usage("finite-difference check needs a scalar objective"));
    }
    let analytic = tape.backward(output)?.for_params(params);

    let mut report = FiniteDiffReport {
        max_rel_err: 0.0,
        max_abs_err_small: 0.0,
        worst: None,
        coordinates: 0,
        tolerance,
        pass: true,
    };
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        let grad = analytic.get(name).expect("gradient for every param");
        for i in 0..tensor.len() {
            let x0 = tensor.values()[i];
            probe.get_mut(name).unwrap().values_mut()[i] = x0 + step;
            let up = tape.replay(&probe)?.scalar(output);
            probe.get_mut(name).unwrap().values_mut()[i] = x0 - step;
            let down = tape.replay(&probe)?.scalar(output);
            probe.get_mut(name).unwrap().values_mut()[i] = x0;

            let numeric = (up - down) / (2.0 * step);
            let exact = grad.values()[i];
            let abs = (numeric - exact).abs();
            report.coordinates += 1;
            if numeric.abs() < SMALL_GRADIENT && exact.abs() < SMALL_GRADIENT {
                report.max_abs_err_small = report.max_abs_err_small.max(abs);
                if abs > ABS_FALLBACK {
                    report.pass = false;
                }
                continue;
            }
            let rel = abs / numeric.abs().max(exact.abs());
            if rel >= report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), i));
            }
            if rel > tolerance {
                report.pass = false;
            }
        }
    }
    Ok(report)
}
