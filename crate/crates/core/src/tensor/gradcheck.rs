//! Central-difference gradient checking.
//!
//! The numeric side only ever runs forward passes, so it stays independent
//! of the backward implementations it validates.

use super::{Tape, Tensor, TensorError, Var};

/// Worst mismatch found by [`check_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error with a floor on the denominator so that gradients that are
/// essentially zero are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compare reverse-mode gradients of a scalar function against central
/// differences with step `h`, for every element of every input.
///
/// `build` must record a fresh computation on the given tape from the given
/// leaves and return the scalar loss.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, mut build: F) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();

    let mut eval = |perturbed: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let vs: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &vs)?;
        Ok(t.value(l).data()[0])
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, worst_input: 0, worst_index: 0, checked: 0 };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = rel_err(analytic[i][j], numeric);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_input = i;
                report.worst_index = j;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
