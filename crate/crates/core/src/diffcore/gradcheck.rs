//! Central finite-difference reference for gradient checks.
//!
//! Evaluates the forward pass only, so it shares no code with the reverse
//! sweep it is used to validate.

use super::mat::Mat;
use super::tape::{Tape, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-6;

/// Central-difference gradient of a scalar function of `inputs`.
pub fn numeric_gradient<F>(inputs: &[Mat], step: f64, mut f: F) -> Result<Vec<Mat>>
where
    F: FnMut(&[Mat]) -> Result<f64>,
{
    let mut work: Vec<Mat> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Mat::zeros(inputs[k].rows(), inputs[k].cols());
        for e in 0..inputs[k].len() {
            let orig = work[k].data()[e];
            work[k].data_mut()[e] = orig + step;
            let plus = f(&work)?;
            work[k].data_mut()[e] = orig - step;
            let minus = f(&work)?;
            work[k].data_mut()[e] = orig;
            g.data_mut()[e] = (plus - minus) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor)` over the concatenation of all entries.
pub fn relative_error(analytic: &[Mat], numeric: &[Mat], floor: f64) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (x, y) in a.data().iter().zip(n.data()) {
            diff += (x - y) * (x - y);
            na += x * x;
            nn += y * y;
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(floor)
}

/// Compares the tape gradient of `build` against central differences.
///
/// `build` receives trainable leaves for `inputs` and must return a 1×1 node.
pub fn check<F>(inputs: &[Mat], build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Mat> = vars.iter().map(|v| tape.grad(*v)).collect();

    let numeric = numeric_gradient(inputs, FD_STEP, |xs| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|m| t.constant(m.clone())).collect();
        let out = build(&mut t, &vs)?;
        Ok(t.scalar(out))
    })?;
    Ok(relative_error(&analytic, &numeric, 1e-8))
}
