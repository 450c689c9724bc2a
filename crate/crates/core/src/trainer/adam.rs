use serde::{Deserialize, Serialize};

use crate::diffcore::Mat;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates per tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Mat]) -> Self {
        let zeros = || params.iter().map(|p| Mat::zeros(p.rows(), p.cols())).collect();
        OptimizerState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [Mat], grads: &[Mat], state: &mut OptimizerState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape(
                "adam_step",
                format!("tensor {i}: param {:?}, grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (k, &gk) in g.data().iter().enumerate() {
            m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
            v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.02, 1e4] {
            let mut p = vec![Mat::column(&[1.0])];
            let mut st = OptimizerState::new(&p);
            adam_step(&mut p, &[Mat::column(&[g])], &mut st, 0.001).unwrap();
            let moved = 1.0 - p[0].get(0, 0);
            assert!((moved.abs() - 0.001).abs() < 1e-8, "{moved}");
            assert_eq!(moved.signum(), g.signum());
        }
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = vec![Mat::from_rows(&[[1.0, -2.0], [0.5, 4.0]])];
        let before = p.clone();
        let mut st = OptimizerState::new(&p);
        for _ in 0..10 {
            adam_step(&mut p, &[Mat::zeros(2, 2)], &mut st, 0.1).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 10);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(x, y) = (x − 3)² + 10 (y + 1)²
        let mut p = vec![Mat::column(&[0.0, 0.0])];
        let mut st = OptimizerState::new(&p);
        for _ in 0..2000 {
            let (x, y) = (p[0].get(0, 0), p[0].get(1, 0));
            let g = Mat::column(&[2.0 * (x - 3.0), 20.0 * (y + 1.0)]);
            adam_step(&mut p, &[g], &mut st, 0.05).unwrap();
        }
        let (x, y) = (p[0].get(0, 0), p[0].get(1, 0));
        let f = (x - 3.0).powi(2) + 10.0 * (y + 1.0).powi(2);
        assert!(f < 1e-6, "f = {f}");
    }

    #[test]
    fn mismatched_shapes() {
        let mut p = vec![Mat::zeros(2, 2)];
        let mut st = OptimizerState::new(&p);
        assert!(adam_step(&mut p, &[Mat::zeros(2, 1)], &mut st, 0.1).is_err());
        assert!(adam_step(&mut p, &[], &mut st, 0.1).is_err());
        assert_eq!(st.step, 0);
    }
}
