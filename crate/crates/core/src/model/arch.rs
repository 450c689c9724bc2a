use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Mat;
use crate::error::{Error, Result};

/// How the per-module hidden layer is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    /// Shared layer applied `recursion` times with a residual connection.
    #[default]
    Recursive,
    /// The same layer applied once, without residual connection.
    Plain,
}

/// Network shape.
///
/// Encoder module `k` runs its recursive layer at width `channels[k]` and then
/// halves the width; the representation has `channels[n-1]` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub points: usize,
    pub channels: Vec<usize>,
    pub recursion: usize,
    pub rot_layers: Vec<usize>,
    #[serde(default)]
    pub block: BlockKind,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            points: 31,
            channels: vec![128, 64, 32, 16, 8],
            recursion: 3,
            rot_layers: vec![128, 32, 8, 6],
            block: BlockKind::Recursive,
        }
    }
}

impl ArchConfig {
    pub fn with_points(points: usize) -> Self {
        ArchConfig {
            points,
            ..ArchConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points < 4 {
            return Err(Error::Config(format!("points = {} (need at least 4)", self.points)));
        }
        if self.channels.is_empty() {
            return Err(Error::Config("channels must not be empty".into()));
        }
        for (k, &c) in self.channels.iter().enumerate() {
            if c < 2 || c % 2 != 0 {
                return Err(Error::Config(format!("channels[{k}] = {c} must be even and >= 2")));
            }
            if k > 0 && c * 2 != self.channels[k - 1] {
                return Err(Error::Config(format!(
                    "channels must halve per module: {} then {c}",
                    self.channels[k - 1]
                )));
            }
        }
        if self.recursion == 0 {
            return Err(Error::Config("recursion must be at least 1".into()));
        }
        match self.rot_layers.last() {
            Some(6) => {}
            _ => return Err(Error::Config("rot_layers must end with a 6-wide layer".into())),
        }
        if self.rot_layers.contains(&0) {
            return Err(Error::Config("rot_layers widths must be positive".into()));
        }
        Ok(())
    }

    pub fn modules(&self) -> usize {
        self.channels.len()
    }

    pub fn repr_dim(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    /// Width of the innermost encoder feature (after the last halving).
    fn bottleneck(&self) -> usize {
        self.repr_dim() / 2
    }

    /// `(name, rows, cols)` of every tensor in storage order.
    pub fn tensor_shapes(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut linear = |name: String, out_dim: usize, in_dim: usize| {
            out.push((format!("{name}.weight"), out_dim, in_dim));
            out.push((format!("{name}.bias"), out_dim, 1));
        };
        let c0 = self.channels[0];
        linear("shape.embed".into(), c0, self.points);
        for (k, &c) in self.channels.iter().enumerate() {
            linear(format!("shape.rr{k}.recursive"), c, c);
            linear(format!("shape.rr{k}.halve"), c / 2, c);
        }
        let flat = 2 * self.bottleneck();
        linear("shape.middle.encode".into(), self.repr_dim(), flat);
        linear("shape.middle.decode".into(), flat, self.repr_dim());
        for (k, &c) in self.channels.iter().enumerate() {
            linear(format!("shape.inv{k}.double"), c, c / 2);
        }
        linear("shape.head".into(), 3 * self.points, 2 * c0);
        let mut fan_in = 2 * self.points;
        for (j, &w) in self.rot_layers.iter().enumerate() {
            linear(format!("rotation.fc{j}"), w, fan_in);
            fan_in = w;
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensor_shapes().iter().map(|(_, r, c)| r * c).sum()
    }
}

/// Indices of a linear layer's tensors in [`Params::tensors`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearIdx {
    pub weight: usize,
    pub bias: usize,
}

/// Where each layer lives in the flat tensor list.
///
/// Inverse modules have no recursive layer of their own: they reuse the
/// encoder module's `recursive` indices, so the tied weights have exactly one
/// storage location.
#[derive(Clone, Debug)]
pub struct Layout {
    pub embed: LinearIdx,
    pub recursive: Vec<LinearIdx>,
    pub halve: Vec<LinearIdx>,
    pub middle_encode: LinearIdx,
    pub middle_decode: LinearIdx,
    pub double: Vec<LinearIdx>,
    pub head: LinearIdx,
    pub rotation: Vec<LinearIdx>,
}

impl Layout {
    pub fn new(arch: &ArchConfig) -> Self {
        let mut next = 0;
        let mut take = || {
            let l = LinearIdx {
                weight: next,
                bias: next + 1,
            };
            next += 2;
            l
        };
        let n = arch.modules();
        let embed = take();
        let mut recursive = Vec::with_capacity(n);
        let mut halve = Vec::with_capacity(n);
        for _ in 0..n {
            recursive.push(take());
            halve.push(take());
        }
        let middle_encode = take();
        let middle_decode = take();
        let double = (0..n).map(|_| take()).collect();
        let head = take();
        let rotation = arch.rot_layers.iter().map(|_| take()).collect();
        Layout {
            embed,
            recursive,
            halve,
            middle_encode,
            middle_decode,
            double,
            head,
            rotation,
        }
    }

    /// Recursive layer used by inverse module `k` (tied to encoder module `k`).
    pub fn inverse_recursive(&self, k: usize) -> LinearIdx {
        self.recursive[k]
    }
}

/// All trainable tensors, named, in the order given by
/// [`ArchConfig::tensor_shapes`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub names: Vec<String>,
    pub tensors: Vec<Mat>,
}

impl Params {
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    /// Checks names and shapes against `arch`.
    pub fn check(&self, arch: &ArchConfig) -> Result<()> {
        let shapes = arch.tensor_shapes();
        if shapes.len() != self.tensors.len() || self.names.len() != self.tensors.len() {
            return Err(Error::Incompatible(format!(
                "{} tensors stored, architecture needs {}",
                self.tensors.len(),
                shapes.len()
            )));
        }
        for ((name, r, c), (stored, t)) in shapes.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != stored || t.shape() != (*r, *c) {
                return Err(Error::Incompatible(format!(
                    "tensor {stored} {}x{} does not match {name} {r}x{c}",
                    t.rows(),
                    t.cols()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Degenerate(format!("tensor {stored} has non-finite entries")));
            }
        }
        Ok(())
    }
}

/// Uniform `(-1/√fan_in, 1/√fan_in)` weights, zero biases.
pub fn init_params(arch: &ArchConfig, seed: u64) -> Result<Params> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, rows, cols) in arch.tensor_shapes() {
        let t = if name.ends_with(".bias") {
            Mat::zeros(rows, cols)
        } else {
            let bound = (1.0 / cols as f64).sqrt();
            Mat::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
        };
        names.push(name);
        tensors.push(t);
    }
    Ok(Params { names, tensors })
}
