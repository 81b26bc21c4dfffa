//! Central finite-difference gradient oracle.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-6;

/// Largest elementwise mismatch between analytic and numeric gradients.
///
/// Each element is compared with `|a - n| <= atol + rtol * max(|a|, |n|)`; the
/// returned value is the worst ratio of mismatch to that allowance, so a result
/// `<= 1` means every element passed. `f` must build a scalar loss from leaves
/// holding `inputs`.
pub fn check<F>(inputs: &[Tensor<f64>], f: F, rtol: f64, atol: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let l = f(&mut tape, &vars)?;
        Ok(tape.value(l).data()[0])
    };
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
        for (j, &a) in analytic.iter().enumerate() {
            let x = input.data()[j];
            work[i].data_mut()[j] = x + STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = x - STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = x;
            let numeric = (plus - minus) / (2.0 * STEP);
            let allowance = atol + rtol * a.abs().max(numeric.abs());
            worst = worst.max((a - numeric).abs() / allowance);
        }
    }
    Ok(worst)
}
