//! Central finite-difference gradient checking in 64-bit.
//!
//! The numeric side only evaluates the forward function, so it stays
//! independent of the reverse-mode path it checks.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

/// Normwise relative error `‖a − n‖₂ / max(‖a‖₂ + ‖n‖₂, tiny)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
        + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences for every input. Returns one relative error per input.
pub fn check<F>(inputs: &[Tensor<f64>], f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| grads.get(v).map(|t| t.data().to_vec()).unwrap_or_default())
        .collect();

    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::inference();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut errors = Vec::with_capacity(inputs.len());
    for (which, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        let mut probe = inputs.to_vec();
        for k in 0..input.numel() {
            let orig = input.data()[k];
            probe[which].data_mut()[k] = orig + STEP;
            let plus = eval(&probe)?;
            probe[which].data_mut()[k] = orig - STEP;
            let minus = eval(&probe)?;
            probe[which].data_mut()[k] = orig;
            numeric[k] = (plus - minus) / (2.0 * STEP);
        }
        errors.push(relative_error(&analytic[which], &numeric));
    }
    Ok(errors)
}
