#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrn_core::diffcore::gradcheck::{numeric_gradient, relative_error, FD_STEP};
use rrn_core::diffcore::{Mat, Tape, Var};
use rrn_core::model::{ArchConfig, BlockKind, BoundModel, Frame2D, Model};
use rrn_core::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// P=5, channels 8,4, T=2 with a small rotation network.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        points: 5,
        channels: vec![8, 4],
        recursion: 2,
        rot_layers: vec![16, 8, 6],
        block: BlockKind::Recursive,
    }
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_frame(rng: &mut ChaCha8Rng, p: usize, index: usize) -> Frame2D {
    Frame2D::visible(random_mat(rng, 2, p), index).unwrap()
}

/// Random 3×3 rotation via Gram-Schmidt on Gaussian-ish vectors.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> nalgebra::Matrix3<f64> {
    let m = nalgebra::Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let qr = m.qr();
    let mut q = qr.q();
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    q
}

pub fn rotation_rows(r: &nalgebra::Matrix3<f64>) -> Mat {
    Mat::from_fn(2, 3, |i, j| r[(i, j)])
}

/// Model for gradient trials: random weights and random biases, so
/// activations sit at generic points rather than near the zero-bias origin.
pub fn trial_model(arch: ArchConfig, seed: u64) -> Model {
    let mut model = Model::init(arch, seed).unwrap();
    let mut rng = rng(seed ^ 0x5eed);
    for (name, t) in model.params.names.iter().zip(&mut model.params.tensors) {
        if name.ends_with(".bias") {
            *t = Mat::from_fn(t.rows(), 1, |_, _| rng.random_range(-0.5..0.5));
        }
    }
    model
}

/// Finite differences are skipped when a kink lies closer than this.
pub const KINK_MARGIN: f64 = 1e-4;

/// Relative error between the tape gradient of `build` w.r.t. every model
/// tensor and central differences with everything else held fixed, or `None`
/// when the point is too close to a kink for differences to mean anything.
pub fn model_gradient_error<F>(model: &Model, build: F) -> Option<f64>
where
    F: Fn(&mut Tape, &BoundModel<'_>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let net = model.bind(&mut tape);
    let loss = build(&mut tape, &net).unwrap();
    if tape.kink_margin() < KINK_MARGIN {
        return None;
    }
    tape.backward(loss).unwrap();
    let analytic = net.grads(&tape);
    let numeric = numeric_gradient(&model.params.tensors, FD_STEP, |xs| {
        let mut m = model.clone();
        m.params.tensors = xs.to_vec();
        let mut t = Tape::new();
        let net = m.bind_frozen(&mut t);
        let out = build(&mut t, &net)?;
        Ok(t.scalar(out))
    })
    .unwrap();
    Some(relative_error(&analytic, &numeric, 1e-8))
}

/// Runs `check` for models initialized from consecutive seeds until `want`
/// of them were far enough from kinks; returns the worst error.
pub fn worst_gradient_error(want: usize, mut check: impl FnMut(u64) -> Option<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    let mut done = 0;
    for seed in 0..20 * want as u64 {
        if let Some(e) = check(seed) {
            worst = worst.max(e);
            done += 1;
            if done == want {
                return worst;
            }
        }
    }
    panic!("only {done} of {want} trials were away from kinks");
}
