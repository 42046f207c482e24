//! Central finite-difference gradient checking.
//!
//! Only forward evaluations are used on the numeric side, so the check is
//! independent of every backward rule it exercises.

use crate::graph::{Tape, Var};
use crate::tensor::Tensor;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar(inputs: &[Tensor<f64>], f: &impl for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    f(&vars).value().item()
}

/// Compares backprop gradients of the scalar `f(inputs)` with central
/// differences of step `h` for every input element. Returns the worst
/// relative error.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    f: impl for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>,
    h: f64,
) -> f64 {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&vars);
    let grads = tape.backward(out);
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval_scalar(&plus, &f) - eval_scalar(&minus, &f)) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    worst
}
