mod common;

use std::sync::Arc;

use common::*;
use rand::Rng;
use rrn_core::diffcore::{Mat, Tape, Var};
use rrn_core::losses::*;
use rrn_core::model::{
    column_as, BatchInput, Frame2D, Model, Reconstructor, ShapeOutput,
};
use rrn_core::rigidity::{BankEntry, MemoryBank, PairSets, RigidityThresholds};
use rrn_core::Result;

/// Networks whose outputs ignore their input.
struct Stub {
    shapes: Mat,
    cameras: Mat,
    repr: Mat,
}

impl Reconstructor for Stub {
    fn shape_batch(&self, tape: &mut Tape, _input: &BatchInput) -> Result<ShapeOutput> {
        Ok(ShapeOutput {
            shapes: tape.constant(self.shapes.clone()),
            repr: tape.constant(self.repr.clone()),
        })
    }

    fn rotation_batch(&self, tape: &mut Tape, _input: &BatchInput) -> Result<Var> {
        Ok(tape.constant(self.cameras.clone()))
    }
}

fn centered_shape(rng: &mut rand_chacha::ChaCha8Rng, p: usize) -> Mat {
    let s = random_mat(rng, 3, p);
    Mat::from_fn(3, p, |r, c| s.get(r, c) - s.row(r).iter().sum::<f64>() / p as f64)
}

/// Stub with `n` random centered shapes and random cameras; frames are the
/// exact projections.
fn consistent_stub(seed: u64, n: usize, p: usize) -> (Stub, Vec<Frame2D>) {
    let mut rng = rng(seed);
    let mut shapes = Mat::zeros(3 * p, n);
    let mut cameras = Mat::zeros(6, n);
    let mut frames = Vec::new();
    for l in 0..n {
        let s = centered_shape(&mut rng, p);
        let m = rotation_rows(&random_rotation(&mut rng));
        for k in 0..3 * p {
            shapes.set(k, l, s.data()[k]);
        }
        for k in 0..6 {
            cameras.set(k, l, m.data()[k]);
        }
        frames.push(Frame2D::visible(m.matmul(&s).unwrap(), l).unwrap());
    }
    let repr = random_mat(&mut rng, 4, n);
    (Stub { shapes, cameras, repr }, frames)
}

#[test]
fn reprojection_is_zero_for_exact_projections() {
    let (stub, frames) = consistent_stub(0, 6, 7);
    let mut tape = Tape::new();
    let fb = forward_batch(&mut tape, &stub, BatchInput::new(frames).unwrap()).unwrap();
    let l = reprojection_loss(&mut tape, &fb).unwrap();
    assert!(tape.scalar(l) < 1e-12);
}

#[test]
fn reprojection_of_fully_hidden_frames_is_zero() {
    let mut rng = rng(1);
    let mut model = Model::init(tiny_arch(), 0).unwrap();
    // nonzero biases keep the representation of an all-zero input nonzero
    for (name, t) in model.params.names.iter().zip(&mut model.params.tensors) {
        if name.ends_with(".bias") {
            *t = random_mat(&mut rng, t.rows(), 1);
        }
    }
    let frames: Vec<Frame2D> = (0..3)
        .map(|i| Frame2D::new(random_mat(&mut rng, 2, 5), vec![false; 5], i).unwrap())
        .collect();
    let mut tape = Tape::new();
    let net = model.bind(&mut tape);
    let fb = forward_batch(&mut tape, &net, BatchInput::new(frames).unwrap()).unwrap();
    let l = reprojection_loss(&mut tape, &fb).unwrap();
    assert_eq!(tape.scalar(l), 0.0);
}

#[test]
fn reprojection_matches_direct_recomputation() {
    let mut rng = rng(2);
    let model = Model::init(tiny_arch(), 3).unwrap();
    let frames: Vec<Frame2D> = (0..5)
        .map(|i| {
            let mask: Vec<bool> = (0..5).map(|_| rng.random_bool(0.7)).collect();
            Frame2D::new(random_mat(&mut rng, 2, 5), mask, i).unwrap()
        })
        .collect();
    let refs: Vec<&Frame2D> = frames.iter().collect();
    let preds = model.predict(&refs).unwrap();
    let mut expected = 0.0;
    for (f, pred) in frames.iter().zip(&preds) {
        let proj = pred.camera.project(&pred.shape);
        let mut sq = 0.0;
        for r in 0..2 {
            for p in 0..5 {
                if f.mask()[p] {
                    sq += (f.w().get(r, p) - proj.get(r, p)).powi(2);
                }
            }
        }
        expected += sq.sqrt();
    }
    expected /= frames.len() as f64;

    let mut tape = Tape::new();
    let net = model.bind(&mut tape);
    let fb = forward_batch(&mut tape, &net, BatchInput::new(frames).unwrap()).unwrap();
    let l = reprojection_loss(&mut tape, &fb).unwrap();
    assert!((tape.scalar(l) - expected).abs() < 1e-12);
}

fn unit_frame() -> Arc<Frame2D> {
    Arc::new(
        Frame2D::visible(Mat::from_rows(&[[1.0, 2.0, 0.0, 3.0], [0.0, 1.0, 1.0, 5.0]]), 0)
            .unwrap(),
    )
}

/// Batch of one frame whose unit representation is `h`, plus a bank.
fn contrast_setup(h: &[f64], bank_vectors: &[Vec<f64>]) -> (Tape, ForwardBatch, MemoryBank) {
    let p = 4;
    let stub = Stub {
        shapes: Mat::zeros(3 * p, 1),
        cameras: Mat::from_rows(&[[1.0], [0.0], [0.0], [0.0], [1.0], [0.0]]),
        repr: Mat::column(h),
    };
    let mut bank = MemoryBank::new(16).unwrap();
    bank.push(
        bank_vectors
            .iter()
            .enumerate()
            .map(|(i, v)| BankEntry::new(i, v.clone(), unit_frame())),
    )
    .unwrap();
    let mut tape = Tape::new();
    let fb = forward_batch(
        &mut tape,
        &stub,
        BatchInput::new(vec![(*unit_frame()).clone()]).unwrap(),
    )
    .unwrap();
    (tape, fb, bank)
}

#[test]
fn contrastive_equal_terms_give_log_two() {
    let (mut tape, fb, bank) = contrast_setup(
        &[1.0, 0.0, 0.0],
        &[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
    );
    let sets = vec![PairSets {
        positives: vec![0],
        negatives: vec![1],
    }];
    let l = contrastive_loss(&mut tape, &fb, &bank, &sets).unwrap();
    assert!((tape.scalar(l) - std::f64::consts::LN_2).abs() < 1e-6);
    assert!((tape.scalar(l) - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn contrastive_closed_form_with_opposite_dots() {
    let (mut tape, fb, bank) = contrast_setup(
        &[1.0, 0.0, 0.0],
        &[vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]],
    );
    let sets = vec![PairSets {
        positives: vec![0],
        negatives: vec![1],
    }];
    let l = contrastive_loss(&mut tape, &fb, &bank, &sets).unwrap();
    let expected = (1.0 + (-2f64).exp()).ln();
    assert!((tape.scalar(l) - 0.126928).abs() < 1e-6);
    assert!((tape.scalar(l) - expected).abs() < 1e-14);
}

#[test]
fn contrastive_without_contributing_frames_is_zero() {
    let (mut tape, fb, bank) = contrast_setup(&[0.6, 0.8, 0.0], &[vec![1.0, 0.0, 0.0]]);
    for sets in [
        PairSets::default(),
        PairSets {
            positives: vec![0],
            negatives: vec![],
        },
        PairSets {
            positives: vec![],
            negatives: vec![0],
        },
    ] {
        let l = contrastive_loss(&mut tape, &fb, &bank, &[sets]).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }
}

#[test]
fn contrastive_decreases_as_positive_dot_grows() {
    let h = [1.0, 0.0, 0.0];
    let mut last = f64::INFINITY;
    for angle in [2.5f64, 2.0, 1.5, 1.0, 0.5, 0.0] {
        let pos = vec![angle.cos(), angle.sin(), 0.0];
        let (mut tape, fb, bank) =
            contrast_setup(&h, &[pos, vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]);
        let sets = vec![PairSets {
            positives: vec![0],
            negatives: vec![1, 2],
        }];
        let l = tape_value(&mut tape, |t| contrastive_loss(t, &fb, &bank, &sets));
        assert!(l < last);
        assert!(l >= 0.0);
        last = l;
    }
}

fn tape_value(tape: &mut Tape, f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
    let v = f(tape).unwrap();
    tape.scalar(v)
}

#[test]
fn consistency_of_constant_networks_is_zero() {
    let (mut stub, frames) = consistent_stub(3, 6, 5);
    // a network constant in its input gives every frame the same camera
    let first_cam: Vec<f64> = (0..6).map(|k| stub.cameras.get(k, 0)).collect();
    stub.cameras = Mat::from_fn(6, 6, |k, _| first_cam[k]);
    let mut rng = rng(4);
    for random_rotation in [false, true] {
        let mut tape = Tape::new();
        let fb = forward_batch(&mut tape, &stub, BatchInput::new(frames.clone()).unwrap()).unwrap();
        let first = fb.targets(&tape);
        let perm = Permutation::random(6, &mut rng);
        if random_rotation {
            // constant G cannot match random targets; only the shape term is checked
            let rots: Vec<Mat> = (0..6).map(|_| random_rotation_rows(&mut rng)).collect();
            let swapped = swapped_observations(&frames, &first, &perm, Some(&rots)).unwrap();
            assert_eq!(swapped.len(), 6);
            continue;
        }
        let l = consistency_loss(&mut tape, &stub, &frames, &first, &perm, None).unwrap();
        assert!(tape.scalar(l).abs() < 1e-14);
    }
}

#[test]
fn consistency_matches_scripted_recomputation() {
    let mut rng = rng(5);
    let model = Model::init(tiny_arch(), 6).unwrap();
    let n = 4;
    let frames: Vec<Frame2D> = (0..n).map(|i| random_frame(&mut rng, 5, i)).collect();
    let refs: Vec<&Frame2D> = frames.iter().collect();
    let first_preds = model.predict(&refs).unwrap();
    let perm = Permutation::from_vec(vec![2, 0, 3, 1]).unwrap();

    // W'_i = M_{r_i} S_i, re-centered, then a second prediction per frame
    let mut second = Vec::new();
    for i in 0..n {
        let cam = first_preds[perm.as_slice()[i]].camera.m();
        let w = cam.matmul(first_preds[i].shape.s()).unwrap();
        let f = Frame2D::visible(w, i).unwrap();
        second.push(model.predict(&[&f]).unwrap().remove(0));
    }
    let mut expected = 0.0;
    for i in 0..n {
        expected += first_preds[i]
            .shape
            .s()
            .sub(second[i].shape.s())
            .unwrap()
            .frobenius_norm();
    }
    // the camera estimated at position i belongs to slot r_i
    for i in 0..n {
        let j = perm.as_slice()[i];
        expected += first_preds[j]
            .camera
            .m()
            .sub(second[i].camera.m())
            .unwrap()
            .frobenius_norm();
    }

    let mut tape = Tape::new();
    let net = model.bind(&mut tape);
    let fb = forward_batch(&mut tape, &net, BatchInput::new(frames.clone()).unwrap()).unwrap();
    let first = fb.targets(&tape);
    let l = consistency_loss(&mut tape, &net, &frames, &first, &perm, None).unwrap();
    assert!((tape.scalar(l) - expected).abs() < 1e-10, "{} vs {expected}", tape.scalar(l));
}

#[test]
fn swapped_observations_are_centered() {
    let mut rng = rng(7);
    let model = Model::init(tiny_arch(), 1).unwrap();
    let frames: Vec<Frame2D> = (0..4).map(|i| random_frame(&mut rng, 5, i)).collect();
    let mut tape = Tape::new();
    let net = model.bind_frozen(&mut tape);
    let fb = forward_batch(&mut tape, &net, BatchInput::new(frames.clone()).unwrap()).unwrap();
    let first = fb.targets(&tape);
    let perm = Permutation::random(4, &mut rng);
    for f in swapped_observations(&frames, &first, &perm, None).unwrap() {
        for r in 0..2 {
            assert!(f.w().row(r).iter().sum::<f64>().abs() < 1e-9);
        }
    }
    let cam = column_as(&first.cameras, perm.as_slice()[0], 2, 3);
    assert_eq!(cam.shape(), (2, 3));
}

#[test]
fn random_rotations_are_uniform_on_the_group() {
    // For a uniform rotation each row is uniform on the sphere: coordinates
    // have mean 0, second moment 1/3, and (Archimedes) each coordinate is
    // uniform on [-1, 1].
    let mut rng = rng(8);
    let n = 40_000;
    let mut mean = [0.0; 6];
    let mut second = [0.0; 6];
    let mut bins = [0usize; 4];
    for _ in 0..n {
        let r = random_rotation_rows(&mut rng);
        for k in 0..6 {
            mean[k] += r.data()[k] / n as f64;
            second[k] += r.data()[k].powi(2) / n as f64;
        }
        let z = r.data()[2];
        bins[(((z + 1.0) / 2.0 * 4.0) as usize).min(3)] += 1;
    }
    for k in 0..6 {
        assert!(mean[k].abs() < 0.01, "mean {k}: {}", mean[k]);
        assert!((second[k] - 1.0 / 3.0).abs() < 0.01, "second {k}: {}", second[k]);
    }
    for b in bins {
        let frac = b as f64 / n as f64;
        assert!((frac - 0.25).abs() < 0.01, "bin fraction {frac}");
    }
}

#[test]
fn zero_weights_reduce_objective_to_reprojection() {
    let mut rng = rng(9);
    let model = Model::init(tiny_arch(), 2).unwrap();
    let frames: Vec<Frame2D> = (0..4).map(|i| random_frame(&mut rng, 5, i)).collect();
    let bank = filled_bank(&mut rng, &frames, 4);
    for epoch in [0, 100] {
        let mut tape = Tape::new();
        let net = model.bind(&mut tape);
        let fb = forward_batch(&mut tape, &net, BatchInput::new(frames.clone()).unwrap()).unwrap();
        let ctx = ObjectiveContext {
            bank: &bank,
            thresholds: RigidityThresholds::new(0.1, 0.11).unwrap(),
            weights: LossWeights {
                lambda1: 0.0,
                lambda2: 0.0,
            },
            schedule: Schedule::default(),
            random_rotation: false,
            pair_sets: None,
        };
        let parts = training_objective(&mut tape, &net, &fb, &ctx, epoch, &mut rng).unwrap();
        assert_eq!(tape.scalar(parts.total), tape.scalar(parts.reproj));
        assert_eq!(parts.contrast.is_some(), epoch == 0);
        assert_eq!(parts.consist.is_some(), epoch == 100);
    }
}

fn filled_bank(rng: &mut rand_chacha::ChaCha8Rng, frames: &[Frame2D], d: usize) -> MemoryBank {
    let mut bank = MemoryBank::new(64).unwrap();
    for _ in 0..3 {
        bank.push(frames.iter().map(|f| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            BankEntry::new(f.index(), v.iter().map(|x| x / n).collect(), Arc::new(f.clone()))
        }))
        .unwrap();
    }
    bank
}

fn batch_of(model_frames: &[Frame2D]) -> BatchInput {
    BatchInput::new(model_frames.to_vec()).unwrap()
}

#[test]
fn reprojection_gradient_matches_finite_differences() {
    let worst = worst_gradient_error(3, |seed| {
        let mut rng = rng(100 + seed);
        let model = trial_model(tiny_arch(), seed);
        let frames: Vec<Frame2D> = (0..4)
            .map(|i| {
                let mut mask = vec![true; 5];
                mask[i] = false;
                Frame2D::new(random_mat(&mut rng, 2, 5), mask, i).unwrap()
            })
            .collect();
        model_gradient_error(&model, |tape, net| {
            let fb = forward_batch(tape, net, batch_of(&frames))?;
            reprojection_loss(tape, &fb)
        })
    });
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn contrastive_gradient_matches_finite_differences() {
    let worst = worst_gradient_error(3, |seed| {
        let mut rng = rng(200 + seed);
        let model = trial_model(tiny_arch(), seed);
        let frames: Vec<Frame2D> = (0..4).map(|i| random_frame(&mut rng, 5, i)).collect();
        let bank = filled_bank(&mut rng, &frames, 4);
        let sets: Vec<PairSets> = (0..4)
            .map(|l| PairSets {
                positives: vec![l, l + 4],
                negatives: vec![(l + 1) % 4, 8 + l, 9],
            })
            .collect();
        model_gradient_error(&model, |tape, net| {
            let fb = forward_batch(tape, net, batch_of(&frames))?;
            contrastive_loss(tape, &fb, &bank, &sets)
        })
    });
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn consistency_gradient_matches_finite_differences() {
    for use_rotations in [false, true] {
        let worst = worst_gradient_error(3, |seed| {
            let mut rng = rng(300 + seed);
            let model = trial_model(tiny_arch(), seed);
            let frames: Vec<Frame2D> = (0..4).map(|i| random_frame(&mut rng, 5, i)).collect();
            let mut tape = Tape::new();
            let net = model.bind_frozen(&mut tape);
            let fb = forward_batch(&mut tape, &net, batch_of(&frames)).unwrap();
            let first = fb.targets(&tape);
            let perm = Permutation::random(4, &mut rng);
            let rots: Vec<Mat> = (0..4).map(|_| random_rotation_rows(&mut rng)).collect();
            let rotations = use_rotations.then_some(rots.as_slice());
            model_gradient_error(&model, |tape, net| {
                consistency_loss(tape, net, &frames, &first, &perm, rotations)
            })
        });
        assert!(worst < 1e-4, "{worst}");
    }
}

#[test]
fn contrast_block_objective_gradient_matches_finite_differences() {
    let worst = worst_gradient_error(3, |seed| {
        let mut rng = rng(400 + seed);
        let model = trial_model(tiny_arch(), seed);
        let frames: Vec<Frame2D> = (0..4).map(|i| random_frame(&mut rng, 5, i)).collect();
        let bank = filled_bank(&mut rng, &frames, 4);
        model_gradient_error(&model, |tape, net| {
            let fb = forward_batch(tape, net, batch_of(&frames))?;
            let ctx = ObjectiveContext {
                bank: &bank,
                thresholds: RigidityThresholds::new(0.05, 0.06).unwrap(),
                weights: LossWeights::default(),
                schedule: Schedule::default(),
                random_rotation: false,
                pair_sets: None,
            };
            let mut r = common::rng(0);
            Ok(training_objective(tape, net, &fb, &ctx, 0, &mut r)?.total)
        })
    });
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn losses_are_nonnegative() {
    let mut rng = rng(14);
    for seed in 0..10 {
        let model = trial_model(tiny_arch(), seed);
        let frames: Vec<Frame2D> = (0..4).map(|i| random_frame(&mut rng, 5, i)).collect();
        let bank = filled_bank(&mut rng, &frames, 4);
        for epoch in [0, 100] {
            let mut tape = Tape::new();
            let net = model.bind(&mut tape);
            let fb = forward_batch(&mut tape, &net, batch_of(&frames)).unwrap();
            let ctx = ObjectiveContext {
                bank: &bank,
                thresholds: RigidityThresholds::new(0.05, 0.06).unwrap(),
                weights: LossWeights::default(),
                schedule: Schedule::default(),
                random_rotation: seed % 2 == 0,
                pair_sets: None,
            };
            let parts = training_objective(&mut tape, &net, &fb, &ctx, epoch, &mut rng).unwrap();
            for v in [Some(parts.total), Some(parts.reproj), parts.contrast, parts.consist]
                .into_iter()
                .flatten()
            {
                assert!(tape.scalar(v) >= 0.0);
            }
        }
    }
}
