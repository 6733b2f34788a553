//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of checking one input of a function.
#[derive(Clone, Debug, PartialEq)]
pub struct InputCheck {
    pub input: usize,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub rel_error: f64,
    pub max_abs_error: f64,
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Compare the tape gradient of a scalar function against central differences.
///
/// `build` records the function on a fresh tape given one leaf per input and
/// returns a scalar; only the inputs flagged in `differentiate` are checked.
pub fn check<F>(inputs: &[Tensor<f64>], differentiate: &[bool], step: f64, build: F) -> Result<Vec<InputCheck>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(differentiate)
        .map(|(t, &d)| tape.leaf(t.clone(), d))
        .collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut report = Vec::new();
    let mut probe = inputs.to_vec();
    for (i, &d) in differentiate.iter().enumerate() {
        if !d {
            continue;
        }
        let analytic = tape.grad(vars[i]).expect("leaf gradient").to_f64_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
        let max_abs_error = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        report.push(InputCheck {
            input: i,
            rel_error: relative_error(&analytic, &numeric),
            max_abs_error,
        });
    }
    Ok(report)
}
