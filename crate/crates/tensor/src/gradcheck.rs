//! Central-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it is checking.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient check, per input and overall.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error for each input, in input order.
    pub per_input: Vec<f64>,
    /// Largest relative error across all inputs.
    pub max_rel_err: f64,
}

/// Scale below which differences are measured absolutely rather than
/// relatively; keeps near-zero gradients from dominating the report.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences with step `h`, for every input marked `requires_grad`.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (slot, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        if !input.requires_grad() {
            per_input.push(0.0);
            continue;
        }
        let analytic = grads
            .get(*var)
            .expect("leaf gradient present")
            .data()
            .to_vec();
        let mut worst = 0.0f64;
        for (j, &a) in analytic.iter().enumerate() {
            let orig = input.data()[j];
            probe[slot].data_mut()[j] = orig + h;
            let plus = eval(&probe)?;
            probe[slot].data_mut()[j] = orig - h;
            let minus = eval(&probe)?;
            probe[slot].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(a, numeric));
        }
        per_input.push(worst);
    }
    let max_rel_err = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_input,
        max_rel_err,
    })
}
