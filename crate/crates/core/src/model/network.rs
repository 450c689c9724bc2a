//! Forward passes of the shape network `F` and the rotation network `G`.
//!
//! Frames are processed as a batch. The shape network sees each frame as a
//! `P`-channel feature with two spatial positions; a batch of `L` frames is
//! laid out as a `C × 2L` matrix whose columns `2l` and `2l+1` hold frame
//! `l`, so every 1×1 convolution is a single matrix product.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::arch::{ArchConfig, BlockKind, Layout, LinearIdx, Params};
use super::types::{Camera, Frame2D, Representation, Shape3D};
use crate::diffcore::polar::{gram_eigen, SIGMA_EPS};
use crate::diffcore::{Mat, Tape, Var, LEAKY_SLOPE};
use crate::error::{Error, Result};

/// Standard deviation of the retry perturbation for degenerate rotations.
pub const DEGENERACY_JITTER: f64 = 1e-6;

/// Network inputs for a batch of frames.
#[derive(Clone, Debug)]
pub struct BatchInput {
    frames: Vec<Frame2D>,
    shape_input: Mat,
    rotation_input: Mat,
}

impl BatchInput {
    pub fn new(frames: Vec<Frame2D>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let p = first.points();
        let l = frames.len();
        let mut shape_input = Mat::zeros(p, 2 * l);
        let mut rotation_input = Mat::zeros(2 * p, l);
        for (col, f) in frames.iter().enumerate() {
            if f.points() != p {
                return Err(Error::shape(
                    "BatchInput::new",
                    format!("frame {} has {} points, expected {p}", f.index(), f.points()),
                ));
            }
            let w = f.w();
            for pos in 0..2 {
                for k in 0..p {
                    shape_input.set(k, 2 * col + pos, w.get(pos, k));
                    rotation_input.set(pos * p + k, col, w.get(pos, k));
                }
            }
        }
        Ok(BatchInput {
            frames,
            shape_input,
            rotation_input,
        })
    }

    pub fn from_refs(frames: &[&Frame2D]) -> Result<Self> {
        BatchInput::new(frames.iter().map(|f| (*f).clone()).collect())
    }

    pub fn frames(&self) -> &[Frame2D] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn points(&self) -> usize {
        self.shape_input.rows()
    }

    /// `P × 2L` input of the shape network.
    pub fn shape_input(&self) -> &Mat {
        &self.shape_input
    }

    /// `2P × L` input of the rotation network.
    pub fn rotation_input(&self) -> &Mat {
        &self.rotation_input
    }
}

/// Shape-network outputs for a batch: `shapes` is `3P × L` (column `l` is
/// frame `l`'s shape, row `r·P + p`), `repr` is `d × L`.
#[derive(Clone, Copy, Debug)]
pub struct ShapeOutput {
    pub shapes: Var,
    pub repr: Var,
}

/// A pair of networks mapping observations to shapes and cameras.
pub trait Reconstructor {
    fn shape_batch(&self, tape: &mut Tape, input: &BatchInput) -> Result<ShapeOutput>;

    /// Returns a `6 × L` node; column `l` is the row-major orthonormal camera.
    fn rotation_batch(&self, tape: &mut Tape, input: &BatchInput) -> Result<Var>;
}

/// Architecture plus parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: ArchConfig,
    pub params: Params,
}

impl Model {
    pub fn new(arch: ArchConfig, params: Params) -> Result<Self> {
        arch.validate()?;
        params.check(&arch)?;
        Ok(Model { arch, params })
    }

    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        let params = super::arch::init_params(&arch, seed)?;
        Ok(Model { arch, params })
    }

    /// Records every tensor as a trainable leaf.
    pub fn bind<'m>(&'m self, tape: &mut Tape) -> BoundModel<'m> {
        let vars = self.params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        BoundModel {
            model: self,
            layout: Layout::new(&self.arch),
            vars,
        }
    }

    /// Records every tensor as a constant (evaluation).
    pub fn bind_frozen<'m>(&'m self, tape: &mut Tape) -> BoundModel<'m> {
        let vars = self.params.tensors.iter().map(|t| tape.constant(t.clone())).collect();
        BoundModel {
            model: self,
            layout: Layout::new(&self.arch),
            vars,
        }
    }

    /// Shape, representation and camera for each frame, with frozen parameters.
    pub fn predict(&self, frames: &[&Frame2D]) -> Result<Vec<Prediction>> {
        let input = BatchInput::from_refs(frames)?;
        let mut tape = Tape::new();
        let net = self.bind_frozen(&mut tape);
        let out = net.shape_batch(&mut tape, &input)?;
        let rot = net.rotation_batch(&mut tape, &input)?;
        let p = self.arch.points;
        (0..frames.len())
            .map(|l| {
                Ok(Prediction {
                    shape: Shape3D::new(column_as(tape.value(out.shapes), l, 3, p))?,
                    camera: Camera::new(column_as(tape.value(rot), l, 2, 3))?,
                    repr: Representation::new(column_values(tape.value(out.repr), l))?,
                })
            })
            .collect()
    }
}

/// Per-frame network output.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub shape: Shape3D,
    pub camera: Camera,
    pub repr: Representation,
}

/// Parameters of a [`Model`] recorded on a specific tape.
pub struct BoundModel<'m> {
    model: &'m Model,
    layout: Layout,
    vars: Vec<Var>,
}

impl BoundModel<'_> {
    pub fn arch(&self) -> &ArchConfig {
        &self.model.arch
    }

    /// Tape handles of the tensors, in [`Params`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn lin(&self, idx: LinearIdx) -> (Var, Var) {
        (self.vars[idx.weight], self.vars[idx.bias])
    }

    /// Gradients of every tensor after a backward pass, in [`Params`] order.
    pub fn grads(&self, tape: &Tape) -> Vec<Mat> {
        self.vars.iter().map(|v| tape.grad(*v)).collect()
    }
}

impl Reconstructor for BoundModel<'_> {
    fn shape_batch(&self, tape: &mut Tape, input: &BatchInput) -> Result<ShapeOutput> {
        let arch = self.arch();
        if input.points() != arch.points {
            return Err(Error::Incompatible(format!(
                "model expects {} points, batch has {}",
                arch.points,
                input.points()
            )));
        }
        let l = input.len();
        let lay = &self.layout;
        let x0 = tape.constant(input.shape_input().clone());
        let mut x = dense(tape, self.lin(lay.embed), x0, true)?;
        for k in 0..arch.modules() {
            x = rr_module(
                tape,
                x,
                self.lin(lay.recursive[k]),
                self.lin(lay.halve[k]),
                arch.recursion,
                arch.block,
            )?;
        }
        let bottleneck = tape.value(x).rows();
        let flat = flatten_positions(tape, x, bottleneck, l)?;
        let repr = dense(tape, self.lin(lay.middle_encode), flat, false)?;
        let up = dense(tape, self.lin(lay.middle_decode), repr, true)?;
        let mut y = unflatten_positions(tape, up, bottleneck, l)?;
        for k in (0..arch.modules()).rev() {
            y = inverse_rr_module(
                tape,
                y,
                self.lin(lay.double[k]),
                self.lin(lay.inverse_recursive(k)),
                arch.recursion,
                arch.block,
            )?;
        }
        let width = tape.value(y).rows();
        let flat = flatten_positions(tape, y, width, l)?;
        let shapes = dense(tape, self.lin(lay.head), flat, false)?;
        Ok(ShapeOutput { shapes, repr })
    }

    fn rotation_batch(&self, tape: &mut Tape, input: &BatchInput) -> Result<Var> {
        let arch = self.arch();
        if input.points() != arch.points {
            return Err(Error::Incompatible(format!(
                "model expects {} points, batch has {}",
                arch.points,
                input.points()
            )));
        }
        let mut x = tape.constant(input.rotation_input().clone());
        let last = self.layout.rotation.len() - 1;
        for (j, idx) in self.layout.rotation.iter().enumerate() {
            x = dense(tape, self.lin(*idx), x, j != last)?;
        }
        orthogonalize_with_retry(tape, x, input)
    }
}

/// `act(W·x + b)` (or without activation when `activate` is false).
pub fn dense(tape: &mut Tape, (w, b): (Var, Var), x: Var, activate: bool) -> Result<Var> {
    let y = tape.matmul(w, x)?;
    let y = tape.add_bias(y, b)?;
    Ok(if activate {
        tape.leaky_relu(y, LEAKY_SLOPE)
    } else {
        y
    })
}

/// Residual-recursive module: `y ← act(W_r·y + b_r) + y` repeated `recursion`
/// times with the same weights, then a channel-halving layer.
pub fn rr_module(
    tape: &mut Tape,
    x: Var,
    recursive: (Var, Var),
    halve: (Var, Var),
    recursion: usize,
    block: BlockKind,
) -> Result<Var> {
    let y = recursive_block(tape, x, recursive, recursion, block)?;
    dense(tape, halve, y, true)
}

/// Decoder counterpart of [`rr_module`]: a channel-doubling layer followed
/// by the recursive layer shared with the mirrored encoder module.
pub fn inverse_rr_module(
    tape: &mut Tape,
    x: Var,
    double: (Var, Var),
    recursive: (Var, Var),
    recursion: usize,
    block: BlockKind,
) -> Result<Var> {
    let y = dense(tape, double, x, true)?;
    recursive_block(tape, y, recursive, recursion, block)
}

fn recursive_block(
    tape: &mut Tape,
    x: Var,
    layer: (Var, Var),
    recursion: usize,
    block: BlockKind,
) -> Result<Var> {
    match block {
        BlockKind::Recursive => {
            let mut y = x;
            for _ in 0..recursion {
                let z = dense(tape, layer, y, true)?;
                y = tape.add(z, y)?;
            }
            Ok(y)
        }
        BlockKind::Plain => dense(tape, layer, x, true),
    }
}

/// `C × 2L` (two positions per frame) to `2C × L` (one column per frame).
fn flatten_positions(tape: &mut Tape, x: Var, channels: usize, frames: usize) -> Result<Var> {
    let mut index = Vec::with_capacity(2 * channels * frames);
    for pos in 0..2 {
        for c in 0..channels {
            for l in 0..frames {
                index.push(c * 2 * frames + 2 * l + pos);
            }
        }
    }
    tape.gather(x, index, 2 * channels, frames)
}

/// Inverse of [`flatten_positions`].
fn unflatten_positions(tape: &mut Tape, x: Var, channels: usize, frames: usize) -> Result<Var> {
    let mut index = Vec::with_capacity(2 * channels * frames);
    for c in 0..channels {
        for l in 0..frames {
            for pos in 0..2 {
                index.push((pos * channels + c) * frames + l);
            }
        }
    }
    tape.gather(x, index, channels, 2 * frames)
}

fn orthogonalize_with_retry(tape: &mut Tape, raw: Var, input: &BatchInput) -> Result<Var> {
    match tape.svd_orthogonalize_cols(raw) {
        Ok(v) => Ok(v),
        Err(Error::Degenerate(_)) => {
            let value = tape.value(raw);
            let seed = value
                .data()
                .iter()
                .fold(0u64, |acc, v| acc.rotate_left(7) ^ v.to_bits());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Mat::from_fn(value.rows(), value.cols(), |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                DEGENERACY_JITTER * z
            });
            let noise = tape.constant(noise);
            let perturbed = tape.add(raw, noise)?;
            tape.svd_orthogonalize_cols(perturbed).map_err(|err| {
                let value = tape.value(perturbed);
                let column = (0..value.cols())
                    .find(|&c| {
                        let m = [
                            [value.get(0, c), value.get(1, c), value.get(2, c)],
                            [value.get(3, c), value.get(4, c), value.get(5, c)],
                        ];
                        gram_eigen(&m).0[1].max(0.0).sqrt() <= SIGMA_EPS
                            || !m.iter().flatten().all(|v| v.is_finite())
                    })
                    .unwrap_or(0);
                Error::Training {
                    frame: input.frames()[column].index(),
                    source: Box::new(err),
                }
            })
        }
        Err(other) => Err(other),
    }
}

/// Column `l` of `m` reshaped row-major to `rows × cols`.
pub fn column_as(m: &Mat, l: usize, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |r, c| m.get(r * cols + c, l))
}

pub fn column_values(m: &Mat, l: usize) -> Vec<f64> {
    (0..m.rows()).map(|r| m.get(r, l)).collect()
}

/// Row-major gather indices selecting column `l` of a `(rows·cols) × L` node
/// as a `rows × cols` matrix.
pub fn column_index(rows: usize, cols: usize, frames: usize, l: usize) -> Vec<usize> {
    (0..rows * cols).map(|k| k * frames + l).collect()
}

/// Single-frame feature: the `P × 2` matrix `Wᵀ`.
pub fn embed_input(tape: &mut Tape, frame: &Frame2D) -> Var {
    tape.constant(frame.w().transpose())
}

/// Shape network on one frame: `(Ŝ as 3×P, h as d×1)` on `tape`.
pub fn shape_forward(
    tape: &mut Tape,
    net: &BoundModel<'_>,
    frame: &Frame2D,
) -> Result<(Var, Var)> {
    let input = BatchInput::from_refs(&[frame])?;
    let out = net.shape_batch(tape, &input)?;
    let p = net.arch().points;
    let s = tape.gather(out.shapes, column_index(3, p, 1, 0), 3, p)?;
    Ok((s, out.repr))
}

/// Rotation network on one frame: orthonormal `2×3` camera on `tape`.
pub fn rotation_forward(tape: &mut Tape, net: &BoundModel<'_>, frame: &Frame2D) -> Result<Var> {
    let input = BatchInput::from_refs(&[frame])?;
    let m = net.rotation_batch(tape, &input)?;
    tape.gather(m, column_index(2, 3, 1, 0), 2, 3)
}
