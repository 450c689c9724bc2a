//! Reprojection, contrastive and consistency losses and their schedule.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Mat, Tape, Var};
use crate::error::{Error, Result};
pub use crate::model::random_rotation_rows;
use crate::model::{column_as, column_index, BatchInput, Frame2D, Reconstructor};
use crate::rigidity::{build_pair_sets_batch, MemoryBank, PairSets, RigidityThresholds};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.1,
            lambda2: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative, got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        Ok(())
    }
}

/// Outputs of both networks for one batch, on a shared tape.
#[derive(Clone, Debug)]
pub struct ForwardBatch {
    pub input: BatchInput,
    /// `3P × L`, column `l` row-major `3×P`.
    pub shapes: Var,
    pub repr: Var,
    /// `repr` with unit-norm columns.
    pub unit: Var,
    /// `6 × L`, column `l` row-major `2×3`.
    pub cameras: Var,
}

impl ForwardBatch {
    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }

    pub fn shape_of(&self, tape: &mut Tape, l: usize) -> Result<Var> {
        let (p, n) = (self.input.points(), self.len());
        tape.gather(self.shapes, column_index(3, p, n, l), 3, p)
    }

    pub fn camera_of(&self, tape: &mut Tape, l: usize) -> Result<Var> {
        tape.gather(self.cameras, column_index(2, 3, self.len(), l), 2, 3)
    }

    /// Detached values of the first pass, used as consistency targets.
    pub fn targets(&self, tape: &Tape) -> FirstPass {
        FirstPass {
            shapes: tape.value(self.shapes).clone(),
            cameras: tape.value(self.cameras).clone(),
        }
    }
}

pub fn forward_batch<R: Reconstructor>(
    tape: &mut Tape,
    net: &R,
    input: BatchInput,
) -> Result<ForwardBatch> {
    let out = net.shape_batch(tape, &input)?;
    let unit = tape.l2_normalize_cols(out.repr)?;
    let cameras = net.rotation_batch(tape, &input)?;
    Ok(ForwardBatch {
        input,
        shapes: out.shapes,
        repr: out.repr,
        unit,
        cameras,
    })
}

/// Mean over the batch of `‖mask ⊙ (W − M̂Ŝ)‖_F`.
pub fn reprojection_loss(tape: &mut Tape, batch: &ForwardBatch) -> Result<Var> {
    let n = batch.len();
    let mut terms = Vec::with_capacity(n);
    for l in 0..n {
        let frame = &batch.input.frames()[l];
        if frame.visible_count() == 0 {
            log::warn!("frame {} has no visible points; reprojection term is 0", frame.index());
        }
        let s = batch.shape_of(tape, l)?;
        let m = batch.camera_of(tape, l)?;
        let proj = tape.matmul(m, s)?;
        let w = tape.constant(frame.w().clone());
        let diff = tape.sub(w, proj)?;
        let masked = tape.mul_const(diff, frame.mask_matrix(2))?;
        terms.push(tape.frobenius(masked));
    }
    let total = tape.add_n(&terms)?;
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// Pair sets of every batch frame against the bank.
pub fn batch_pair_sets(
    batch: &ForwardBatch,
    bank: &MemoryBank,
    th: &RigidityThresholds,
) -> Vec<PairSets> {
    build_pair_sets_batch(batch.input.frames(), bank, th)
}

/// `−log(Σ_pos e^{h·h_j} / Σ_{pos∪neg} e^{h·h_k})` averaged over frames whose
/// positive and negative sets are both nonempty; 0 when there are none.
///
/// Bank vectors enter as constants.
pub fn contrastive_loss(
    tape: &mut Tape,
    batch: &ForwardBatch,
    bank: &MemoryBank,
    sets: &[PairSets],
) -> Result<Var> {
    let n = batch.len();
    if sets.len() != n {
        return Err(Error::shape(
            "contrastive_loss",
            format!("{} pair sets for {n} frames", sets.len()),
        ));
    }
    let contributing: Vec<usize> = (0..n).filter(|&l| sets[l].is_usable()).collect();
    if contributing.is_empty() {
        return Ok(tape.constant(Mat::zeros(1, 1)));
    }
    let d = tape.value(batch.unit).rows();
    let mut hb = Mat::zeros(bank.len(), d);
    for (slot, e) in bank.entries().enumerate() {
        if e.h.len() != d {
            return Err(Error::shape(
                "contrastive_loss",
                format!("bank vector of {} for representation of {d}", e.h.len()),
            ));
        }
        hb.data_mut()[slot * d..(slot + 1) * d].copy_from_slice(&e.h);
    }
    let hb = tape.constant(hb);
    // dots[slot, l] = h_slot · h_l
    let dots = tape.matmul(hb, batch.unit)?;
    let mut terms = Vec::with_capacity(contributing.len());
    for &l in &contributing {
        let s = &sets[l];
        let pos_idx: Vec<usize> = s.positives.iter().map(|&j| j * n + l).collect();
        let all_idx: Vec<usize> = s
            .positives
            .iter()
            .chain(&s.negatives)
            .map(|&j| j * n + l)
            .collect();
        let (np, na) = (pos_idx.len(), all_idx.len());
        let pos = tape.gather(dots, pos_idx, np, 1)?;
        let all = tape.gather(dots, all_idx, na, 1)?;
        let lse_all = tape.logsumexp(all)?;
        let lse_pos = tape.logsumexp(pos)?;
        terms.push(tape.sub(lse_all, lse_pos)?);
    }
    let total = tape.add_n(&terms)?;
    Ok(tape.scale(total, 1.0 / terms.len() as f64))
}

/// A bijection of `0..n`; position `i` draws from `map[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation {
            map: (0..n).collect(),
        }
    }

    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut map: Vec<usize> = (0..n).collect();
        map.shuffle(rng);
        Permutation { map }
    }

    pub fn from_vec(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &m in &map {
            if m >= map.len() || std::mem::replace(&mut seen[m], true) {
                return Err(Error::Contract(format!("{map:?} is not a permutation")));
            }
        }
        Ok(Permutation { map })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.map.len()];
        for (i, &r) in self.map.iter().enumerate() {
            inv[r] = i;
        }
        Permutation { map: inv }
    }

    /// Puts the item found at position `i` back at slot `map[i]`.
    pub fn rearrange<T: Clone>(&self, by_position: &[T]) -> Vec<T> {
        let inv = self.inverse();
        inv.map.iter().map(|&i| by_position[i].clone()).collect()
    }
}

/// First-pass values that the consistency loss treats as fixed targets.
#[derive(Clone, Debug)]
pub struct FirstPass {
    pub shapes: Mat,
    pub cameras: Mat,
}

/// Reprojected observations `W′_i = C_i·Ŝ_i` with the cameras `C_i` either
/// permuted first-pass cameras or the supplied rotations, re-centered over
/// each frame's visible points.
pub fn swapped_observations(
    frames: &[Frame2D],
    first: &FirstPass,
    perm: &Permutation,
    rotations: Option<&[Mat]>,
) -> Result<Vec<Frame2D>> {
    let n = frames.len();
    if perm.len() != n || first.cameras.cols() != n || first.shapes.cols() != n {
        return Err(Error::shape(
            "consistency_loss",
            format!("batch of {n} with permutation of {}", perm.len()),
        ));
    }
    if let Some(r) = rotations {
        if r.len() != n {
            return Err(Error::shape(
                "consistency_loss",
                format!("{} rotations for {n} frames", r.len()),
            ));
        }
    }
    let p = first.shapes.rows() / 3;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let cam = match rotations {
                Some(r) => r[i].clone(),
                None => column_as(&first.cameras, perm.as_slice()[i], 2, 3),
            };
            let s = column_as(&first.shapes, i, 3, p);
            Frame2D::new(cam.matmul(&s)?, f.mask().to_vec(), f.index())
        })
        .collect()
}

/// `Σ_i ‖Ŝ_i − Ŝ′_i‖_F + ‖M̂_i − M̂′_i‖_F` from a second forward pass on the
/// swapped observations. With `rotations`, the camera targets are the
/// rotations themselves and no permutation is involved.
pub fn consistency_loss<R: Reconstructor>(
    tape: &mut Tape,
    net: &R,
    frames: &[Frame2D],
    first: &FirstPass,
    perm: &Permutation,
    rotations: Option<&[Mat]>,
) -> Result<Var> {
    let swapped = swapped_observations(frames, first, perm, rotations)?;
    let n = swapped.len();
    let p = first.shapes.rows() / 3;
    let input = BatchInput::new(swapped)?;
    let second = net.shape_batch(tape, &input)?;
    let cams = net.rotation_batch(tape, &input)?;

    let (cam_order, cam_target) = match rotations {
        Some(r) => {
            let target = Mat::from_fn(6, n, |k, i| r[i].data()[k]);
            (Permutation::identity(n), target)
        }
        None => (perm.clone(), first.cameras.clone()),
    };
    // column j of the rearranged node is the camera that estimates M̂_j
    let inv = cam_order.inverse();
    let index: Vec<usize> = (0..6)
        .flat_map(|k| inv.as_slice().iter().map(move |&i| k * n + i))
        .collect();
    let cams = tape.gather(cams, index, 6, n)?;

    let shape_target = tape.constant(first.shapes.clone());
    let cam_target = tape.constant(cam_target);
    let ds = tape.sub(second.shapes, shape_target)?;
    let dm = tape.sub(cams, cam_target)?;
    let mut terms = Vec::with_capacity(2 * n);
    for i in 0..n {
        let s = tape.gather(ds, column_index(3, p, n, i), 3 * p, 1)?;
        let m = tape.gather(dm, column_index(2, 3, n, i), 6, 1)?;
        terms.push(tape.frobenius(s));
        terms.push(tape.frobenius(m));
    }
    tape.add_n(&terms)
}

/// Which regularizer is active at a given epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub contrast: bool,
    pub consist: bool,
    /// Both regularizers every epoch instead of alternating blocks.
    pub joint: bool,
    pub block: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            contrast: true,
            consist: true,
            joint: false,
            block: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ActiveTerms {
    pub contrast: bool,
    pub consist: bool,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.block == 0 {
            return Err(Error::Config("alternation block must be positive".into()));
        }
        Ok(())
    }

    /// Blocks alternate starting with contrast when both terms are enabled;
    /// a single enabled term runs every epoch.
    pub fn active(&self, epoch: usize) -> ActiveTerms {
        match (self.contrast, self.consist) {
            (true, true) if !self.joint => {
                let contrast_block = (epoch / self.block).is_multiple_of(2);
                ActiveTerms {
                    contrast: contrast_block,
                    consist: !contrast_block,
                }
            }
            (contrast, consist) => ActiveTerms { contrast, consist },
        }
    }
}

/// Everything the objective needs besides the networks and the batch.
pub struct ObjectiveContext<'a> {
    pub bank: &'a MemoryBank,
    pub thresholds: RigidityThresholds,
    pub weights: LossWeights,
    pub schedule: Schedule,
    pub random_rotation: bool,
    /// Precomputed pair sets of the batch; built from the bank when `None`.
    pub pair_sets: Option<&'a [PairSets]>,
}

/// The objective node and its parts (inactive parts are `None`).
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveParts {
    pub total: Var,
    pub reproj: Var,
    pub contrast: Option<Var>,
    pub consist: Option<Var>,
}

/// `L_reproj + λ₁·L_contrast` in contrast blocks, `L_reproj + λ₂·L_consist`
/// in consistency blocks.
pub fn training_objective<R: Reconstructor, G: Rng + ?Sized>(
    tape: &mut Tape,
    net: &R,
    batch: &ForwardBatch,
    ctx: &ObjectiveContext<'_>,
    epoch: usize,
    rng: &mut G,
) -> Result<ObjectiveParts> {
    let reproj = reprojection_loss(tape, batch)?;
    let active = ctx.schedule.active(epoch);
    let mut total = reproj;
    let mut contrast = None;
    let mut consist = None;
    if active.contrast {
        let built;
        let sets = match ctx.pair_sets {
            Some(s) => s,
            None => {
                built = batch_pair_sets(batch, ctx.bank, &ctx.thresholds);
                &built
            }
        };
        let c = contrastive_loss(tape, batch, ctx.bank, sets)?;
        let weighted = tape.scale(c, ctx.weights.lambda1);
        total = tape.add(total, weighted)?;
        contrast = Some(c);
    }
    if active.consist {
        let n = batch.len();
        let perm = Permutation::random(n, rng);
        let rotations: Option<Vec<Mat>> = ctx
            .random_rotation
            .then(|| (0..n).map(|_| random_rotation_rows(rng)).collect());
        let first = batch.targets(tape);
        let c = consistency_loss(
            tape,
            net,
            batch.input.frames(),
            &first,
            &perm,
            rotations.as_deref(),
        )?;
        let weighted = tape.scale(c, ctx.weights.lambda2);
        total = tape.add(total, weighted)?;
        consist = Some(c);
    }
    Ok(ObjectiveParts {
        total,
        reproj,
        contrast,
        consist,
    })
}
