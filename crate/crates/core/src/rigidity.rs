//! Pairwise rigidity (msr), positive/negative sets and the representation bank.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Arc;

use nalgebra::Matrix4;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Frame2D;

/// Upper bound of msr: four equal singular values.
pub const MSR_MAX: f64 = 0.25;
pub const MIN_COMMON_POINTS: usize = 4;
/// Allowed deviation of a stored representation's norm from 1.
pub const UNIT_TOL: f64 = 1e-9;
pub const DEFAULT_BANK_CAPACITY: usize = 1024;

/// Minimal singular-value ratio `σ₄² / Σσ²` of the `4×P′` stack of two frames
/// restricted to their common visible points.
///
/// The common columns of each frame are re-centered before stacking.
pub fn msr(wi: &Frame2D, wj: &Frame2D) -> Result<f64> {
    if wi.points() != wj.points() {
        return Err(Error::shape(
            "msr",
            format!("{} vs {} points", wi.points(), wj.points()),
        ));
    }
    let common: Vec<usize> = (0..wi.points())
        .filter(|&p| wi.mask()[p] && wj.mask()[p])
        .collect();
    if common.len() < MIN_COMMON_POINTS {
        return Err(Error::InsufficientOverlap {
            common: common.len(),
        });
    }
    let mut stack: Vec<Vec<f64>> = Vec::with_capacity(4);
    for f in [wi, wj] {
        for r in 0..2 {
            let vals: Vec<f64> = common.iter().map(|&p| f.w().get(r, p)).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            stack.push(vals.into_iter().map(|v| v - mean).collect());
        }
    }
    Ok(stack_ratio(&stack))
}

/// `σ₄²/Σσ²` of a 4-row stack, from the eigenvalues of its 4×4 Gram matrix.
fn stack_ratio(stack: &[Vec<f64>]) -> f64 {
    let gram = Matrix4::from_fn(|a, b| {
        stack[a]
            .iter()
            .zip(&stack[b])
            .map(|(x, y)| x * y)
            .sum::<f64>()
    });
    let trace = gram.trace();
    if trace <= f64::MIN_POSITIVE {
        return 0.0;
    }
    let smallest = gram
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    (smallest.max(0.0) / trace).min(MSR_MAX)
}

/// Cutoffs for the positive (`msr < tau`) and negative (`msr > xi`) sets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidityThresholds {
    pub tau: f64,
    pub xi: f64,
}

impl Default for RigidityThresholds {
    fn default() -> Self {
        RigidityThresholds { tau: 0.02, xi: 0.04 }
    }
}

impl RigidityThresholds {
    pub fn new(tau: f64, xi: f64) -> Result<Self> {
        let th = RigidityThresholds { tau, xi };
        th.validate()?;
        Ok(th)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.tau && self.tau < self.xi && self.xi <= MSR_MAX) {
            return Err(Error::Config(format!(
                "thresholds need 0 <= tau < xi <= 0.25, got tau = {}, xi = {}",
                self.tau, self.xi
            )));
        }
        Ok(())
    }
}

/// One stored representation. `h` is a plain copy, never a tape node.
#[derive(Clone, Debug)]
pub struct BankEntry {
    pub index: usize,
    pub h: Vec<f64>,
    pub frame: Arc<Frame2D>,
}

impl BankEntry {
    pub fn new(index: usize, h: Vec<f64>, frame: Arc<Frame2D>) -> Self {
        BankEntry { index, h, frame }
    }
}

/// FIFO queue of unit-norm representations.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    capacity: usize,
    entries: VecDeque<BankEntry>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("memory bank capacity must be positive".into()));
        }
        Ok(MemoryBank {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries from oldest to newest.
    pub fn entries(&self) -> impl ExactSizeIterator<Item = &BankEntry> {
        self.entries.iter()
    }

    pub fn get(&self, slot: usize) -> Option<&BankEntry> {
        self.entries.get(slot)
    }

    /// Appends in order, evicting the oldest entries beyond capacity.
    ///
    /// The whole batch is checked before anything is inserted.
    pub fn push(&mut self, batch: impl IntoIterator<Item = BankEntry>) -> Result<()> {
        let batch: Vec<BankEntry> = batch.into_iter().collect();
        for e in &batch {
            let norm = e.h.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOL || !norm.is_finite() {
                return Err(Error::Contract(format!(
                    "bank entry for frame {} has norm {norm}",
                    e.index
                )));
            }
        }
        for e in batch {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(e);
        }
        Ok(())
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Bank slots (positions, oldest first) on either side of the thresholds.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairSets {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl PairSets {
    pub fn is_usable(&self) -> bool {
        !self.positives.is_empty() && !self.negatives.is_empty()
    }
}

/// Classifies every bank entry against `frame`.
///
/// Entries sharing fewer than four visible points with the frame have no
/// defined msr and join neither set.
pub fn build_pair_sets(frame: &Frame2D, bank: &MemoryBank, th: &RigidityThresholds) -> PairSets {
    classify(bank.entries().map(|e| msr(frame, &e.frame).ok()), th)
}

/// Pair sets from per-slot msr values (`None` joins neither set).
pub fn classify(values: impl IntoIterator<Item = Option<f64>>, th: &RigidityThresholds) -> PairSets {
    let mut sets = PairSets::default();
    for (slot, v) in values.into_iter().enumerate() {
        match v {
            Some(v) if v < th.tau => sets.positives.push(slot),
            Some(v) if v > th.xi => sets.negatives.push(slot),
            _ => {}
        }
    }
    sets
}

/// [`build_pair_sets`] for several frames, in parallel, results in input order.
pub fn build_pair_sets_batch(
    frames: &[Frame2D],
    bank: &MemoryBank,
    th: &RigidityThresholds,
) -> Vec<PairSets> {
    frames
        .par_iter()
        .map(|f| build_pair_sets(f, bank, th))
        .collect()
}

/// Memoized msr between frames of one dataset, keyed by `(anchor, entry)`
/// frame index. Only valid while indices identify frames uniquely.
#[derive(Debug, Default)]
pub struct MsrCache {
    values: HashMap<(usize, usize), Option<f64>>,
}

impl MsrCache {
    pub fn new() -> Self {
        MsrCache::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same result as [`build_pair_sets_batch`]; missing pairs are computed
    /// in parallel and stored.
    pub fn pair_sets(
        &mut self,
        frames: &[Frame2D],
        bank: &MemoryBank,
        th: &RigidityThresholds,
    ) -> Vec<PairSets> {
        let mut missing: Vec<(&Frame2D, &Frame2D)> = Vec::new();
        let mut seen = HashSet::new();
        for f in frames {
            for e in bank.entries() {
                let key = (f.index(), e.frame.index());
                if !self.values.contains_key(&key) && seen.insert(key) {
                    missing.push((f, &e.frame));
                }
            }
        }
        let computed: Vec<((usize, usize), Option<f64>)> = missing
            .par_iter()
            .map(|(a, b)| ((a.index(), b.index()), msr(a, b).ok()))
            .collect();
        self.values.extend(computed);
        frames
            .iter()
            .map(|f| {
                classify(
                    bank.entries().map(|e| self.values[&(f.index(), e.frame.index())]),
                    th,
                )
            })
            .collect()
    }
}
