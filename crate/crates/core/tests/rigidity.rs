mod common;

use std::collections::VecDeque;
use std::sync::Arc;

use common::{random_frame, random_mat, random_rotation, rng, rotation_rows};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rrn_core::diffcore::Mat;
use rrn_core::model::Frame2D;
use rrn_core::rigidity::{
    build_pair_sets, build_pair_sets_batch, msr, BankEntry, MemoryBank, RigidityThresholds,
    MIN_COMMON_POINTS, MSR_MAX,
};
use rrn_core::Error;

/// σ₄² / Σσ² from an SVD of the re-centered 4×P′ stack of common points.
fn msr_oracle(a: &Frame2D, b: &Frame2D) -> Option<f64> {
    let common: Vec<usize> = (0..a.points()).filter(|&c| a.mask()[c] && b.mask()[c]).collect();
    if common.len() < MIN_COMMON_POINTS {
        return None;
    }
    let n = common.len();
    let mut m = DMatrix::<f64>::zeros(4, n);
    for (r, (f, row)) in [(a, 0), (a, 1), (b, 0), (b, 1)].into_iter().enumerate() {
        let vals: Vec<f64> = common.iter().map(|&c| f.w().get(row, c)).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        for (k, v) in vals.iter().enumerate() {
            m[(r, k)] = v - mean;
        }
    }
    let s = m.singular_values();
    let total: f64 = s.iter().map(|x| x * x).sum();
    if total == 0.0 {
        return Some(0.0);
    }
    let min = if n < 4 { 0.0 } else { s.iter().cloned().fold(f64::INFINITY, f64::min) };
    Some(min * min / total)
}

fn rigid_pair(rng: &mut ChaCha8Rng, p: usize) -> (Frame2D, Frame2D) {
    let s = random_mat(rng, 3, p);
    let a = rotation_rows(&random_rotation(rng)).matmul(&s).unwrap();
    let b = rotation_rows(&random_rotation(rng)).matmul(&s).unwrap();
    (Frame2D::visible(a, 0).unwrap(), Frame2D::visible(b, 1).unwrap())
}

fn masked_frame(rng: &mut ChaCha8Rng, p: usize, index: usize, hide: f64) -> Frame2D {
    let w = random_mat(rng, 2, p);
    let mask = (0..p).map(|_| rng.random::<f64>() >= hide).collect();
    Frame2D::new(w, mask, index).unwrap()
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn entry(rng: &mut ChaCha8Rng, index: usize, frame: Frame2D) -> BankEntry {
    BankEntry::new(index, unit(rng, 8), Arc::new(frame))
}

#[test]
fn rigid_pairs_have_zero_msr() {
    let mut r = rng(1);
    for _ in 0..500 {
        let p = r.random_range(4..40);
        let (a, b) = rigid_pair(&mut r, p);
        let m = msr(&a, &b).unwrap();
        assert!(m < 1e-10, "{m}");
    }
}

#[test]
fn msr_matches_svd_oracle() {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let p = r.random_range(4..30);
        let (a, b) = if i % 2 == 0 {
            (random_frame(&mut r, p, 0), random_frame(&mut r, p, 1))
        } else {
            (masked_frame(&mut r, p, 0, 0.2), masked_frame(&mut r, p, 1, 0.2))
        };
        match (msr(&a, &b), msr_oracle(&a, &b)) {
            (Ok(got), Some(want)) => worst = worst.max((got - want).abs()),
            (Err(Error::InsufficientOverlap { .. }), None) => {}
            (got, want) => panic!("disagreement: {got:?} vs {want:?}"),
        }
    }
    assert!(worst < 1e-10, "worst {worst}");
}

#[test]
fn too_few_common_points() {
    let mut r = rng(3);
    let a = random_frame(&mut r, 6, 0);
    let w = random_mat(&mut r, 2, 6);
    let b = Frame2D::new(w, vec![true, true, true, false, false, false], 1).unwrap();
    assert!(matches!(msr(&a, &b), Err(Error::InsufficientOverlap { common: 3 })));
}

#[test]
fn bank_is_fifo_against_reference_queue() {
    let mut r = rng(4);
    let frame = random_frame(&mut r, 4, 0);
    for _ in 0..10_000 {
        let cap = r.random_range(1..20);
        let mut bank = MemoryBank::new(cap).unwrap();
        let mut reference: VecDeque<usize> = VecDeque::new();
        let mut next = 0;
        for _ in 0..r.random_range(1..8) {
            let n = r.random_range(0..12);
            let batch: Vec<BankEntry> = (next..next + n).map(|i| entry(&mut r, i, frame.clone())).collect();
            next += n;
            bank.push(batch).unwrap();
            for i in next - n..next {
                reference.push_back(i);
                if reference.len() > cap {
                    reference.pop_front();
                }
            }
            let got: Vec<usize> = bank.entries().map(|e| e.index).collect();
            assert_eq!(got, Vec::from(reference.clone()));
        }
    }
}

#[test]
fn rejected_push_leaves_bank_unchanged() {
    let mut r = rng(5);
    let frame = random_frame(&mut r, 4, 0);
    let mut bank = MemoryBank::new(4).unwrap();
    bank.push((0..3).map(|i| entry(&mut r, i, frame.clone()))).unwrap();
    let before: Vec<usize> = bank.entries().map(|e| e.index).collect();
    let mut bad: Vec<BankEntry> = (3..6).map(|i| entry(&mut r, i, frame.clone())).collect();
    bad[2].h[0] += 0.5;
    assert!(bank.push(bad).is_err());
    assert_eq!(bank.entries().map(|e| e.index).collect::<Vec<_>>(), before);
}

#[test]
fn pair_sets_match_brute_force() {
    let mut r = rng(6);
    let th = RigidityThresholds::default();
    let shape = random_mat(&mut r, 3, 12);
    let mut bank = MemoryBank::new(64).unwrap();
    let mut frames = Vec::new();
    for i in 0..60 {
        // Mix rigid copies of one shape, lightly deformed ones and unrelated frames.
        let w = match i % 3 {
            0 => rotation_rows(&random_rotation(&mut r)).matmul(&shape).unwrap(),
            1 => {
                let d = random_mat(&mut r, 3, 12).scale(0.15);
                rotation_rows(&random_rotation(&mut r)).matmul(&shape.add(&d).unwrap()).unwrap()
            }
            _ => random_mat(&mut r, 2, 12),
        };
        let mask = (0..12).map(|c| i % 7 != 0 || c % 2 == 0).collect();
        frames.push(Frame2D::new(w, mask, i).unwrap());
    }
    bank.push(frames.iter().cloned().map(|f| entry(&mut r, f.index(), f))).unwrap();
    let anchors: Vec<Frame2D> = frames[..8].to_vec();
    let batch = build_pair_sets_batch(&anchors, &bank, &th);
    let (mut pos, mut neg) = (0, 0);
    for (anchor, sets) in anchors.iter().zip(&batch) {
        let mut want_pos = Vec::new();
        let mut want_neg = Vec::new();
        for (slot, e) in bank.entries().enumerate() {
            match msr_oracle(anchor, &e.frame) {
                Some(m) if m < th.tau => want_pos.push(slot),
                Some(m) if m > th.xi => want_neg.push(slot),
                _ => {}
            }
        }
        assert_eq!(sets.positives, want_pos);
        assert_eq!(sets.negatives, want_neg);
        assert_eq!(*sets, build_pair_sets(anchor, &bank, &th));
        pos += want_pos.len();
        neg += want_neg.len();
    }
    assert!(pos > 0 && neg > 0, "fixture should exercise both sets");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn msr_range_symmetry_and_scale(seed in any::<u64>(), p in 4usize..25, hide in 0.0f64..0.5,
                                    scale in 1e-3f64..1e3) {
        let mut r = rng(seed);
        let a = masked_frame(&mut r, p, 0, hide);
        let b = masked_frame(&mut r, p, 1, hide);
        match msr(&a, &b) {
            Ok(m) => {
                prop_assert!((0.0..=MSR_MAX).contains(&m));
                prop_assert!((msr(&b, &a).unwrap() - m).abs() < 1e-12);
                let scaled = |f: &Frame2D| Frame2D::new(f.w().scale(scale), f.mask().to_vec(), f.index()).unwrap();
                prop_assert!((msr(&scaled(&a), &scaled(&b)).unwrap() - m).abs() < 1e-10);
            }
            Err(e) => {
                let overlap = matches!(e, Error::InsufficientOverlap { .. });
                prop_assert!(overlap, "unexpected error {e:?}");
            }
        }
    }

    #[test]
    fn msr_survives_extreme_inputs(seed in any::<u64>(), exp in -150i32..150) {
        let mut r = rng(seed);
        let w = Mat::from_fn(2, 6, |_, _| r.random_range(-1.0..1.0) * 10f64.powi(exp));
        let a = Frame2D::visible(w, 0).unwrap();
        let b = Frame2D::visible(Mat::zeros(2, 6), 1).unwrap();
        let m = msr(&a, &b).unwrap();
        prop_assert!(m.is_finite() && (0.0..=MSR_MAX).contains(&m));
        let m = msr(&b, &b).unwrap();
        prop_assert_eq!(m, 0.0);
    }

    #[test]
    fn thresholds_validate(tau in -0.1f64..0.4, xi in -0.1f64..0.4) {
        let ok = 0.0 <= tau && tau < xi && xi <= MSR_MAX;
        prop_assert_eq!(RigidityThresholds::new(tau, xi).is_ok(), ok);
    }
}
