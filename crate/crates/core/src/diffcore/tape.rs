use super::mat::Mat;
use super::polar::{polar_backward, polar_forward, PolarCache, M23};
use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Mat),
    AddBias(Var, Var),
    LeakyRelu(Var, f64),
    L2NormalizeCols(Var, Vec<f64>),
    Polar {
        input: Var,
        caches: Vec<PolarCache>,
        columnwise: bool,
    },
    Frobenius(Var),
    LogSumExp(Var),
    Gather(Var, Vec<usize>),
    AddN(Vec<Var>),
    SumAll(Var),
    ConcatRows(Vec<Var>),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::LeakyRelu(a, _)
            | Op::L2NormalizeCols(a, _)
            | Op::Frobenius(a)
            | Op::LogSumExp(a)
            | Op::Gather(a, _)
            | Op::SumAll(a) => vec![*a],
            Op::Polar { input, .. } => vec![*input],
            Op::AddN(vs) | Op::ConcatRows(vs) => vs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
    grad: Option<Mat>,
}

/// Records a computation in execution order and replays it backwards.
///
/// Leaves are either trainable (`leaf`) or constant (`constant`). Gradients
/// are computed only along paths that reach a trainable leaf, and leaf
/// gradients accumulate across [`Tape::backward`] calls until
/// [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the current value of `v` into a new constant node.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Accumulated gradient of a leaf (zeros if none has reached it).
    pub fn grad(&self, v: Var) -> Mat {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Mat::zeros(node.value.rows(), node.value.cols()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Distance of the recorded computation from its non-differentiable
    /// points: the smallest `|x|` fed to a leaky ReLU and the smallest norm
    /// fed to a Frobenius node. Finite differences are only meaningful when
    /// this is well above the step.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match node.op {
                Op::LeakyRelu(a, _) => {
                    for v in self.value(a).data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::Frobenius(_) => margin = margin.min(node.value.data()[0]),
                _ => {}
            }
        }
        margin
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c))
    }

    /// Elementwise product with a constant matrix (used for visibility masks).
    pub fn mul_const(&mut self, a: Var, m: Mat) -> Result<Var> {
        let value = self.value(a).hadamard(&m)?;
        Ok(self.push(value, Op::MulConst(a, m)))
    }

    /// `x + b·1ᵀ` for `x: C×N` and a column `b: C×1`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        if bv.cols() != 1 || bv.rows() != xv.rows() {
            return Err(Error::shape(
                "add_bias",
                format!(
                    "bias {}x{} for input {}x{}",
                    bv.rows(),
                    bv.cols(),
                    xv.rows(),
                    xv.cols()
                ),
            ));
        }
        let mut value = xv.clone();
        let cols = value.cols();
        for (r, &bias) in bv.data().iter().enumerate() {
            for v in &mut value.data_mut()[r * cols..(r + 1) * cols] {
                *v += bias;
            }
        }
        Ok(self.push(value, Op::AddBias(x, b)))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu(a, slope))
    }

    /// Scales a `d×1` vector to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        if self.value(a).cols() != 1 {
            return Err(Error::shape("l2_normalize", "expected a column vector"));
        }
        self.l2_normalize_cols(a)
    }

    /// Scales every column of `a` to unit Euclidean norm.
    pub fn l2_normalize_cols(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = x.shape();
        let mut norms = vec![0.0; cols];
        for r in 0..rows {
            for (c, n) in norms.iter_mut().enumerate() {
                *n += x.get(r, c) * x.get(r, c);
            }
        }
        for (c, n) in norms.iter_mut().enumerate() {
            *n = n.sqrt();
            if *n <= NORM_EPS {
                return Err(Error::Degenerate(format!(
                    "cannot normalize column {c} with norm {n:.3e}"
                )));
            }
        }
        let value = Mat::from_fn(rows, cols, |r, c| x.get(r, c) / norms[c]);
        Ok(self.push(value, Op::L2NormalizeCols(a, norms)))
    }

    /// Replaces a 2×3 matrix by its nearest row-orthonormal matrix `UVᵀ`.
    pub fn svd_orthogonalize(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != (2, 3) {
            return Err(Error::shape(
                "svd_orthogonalize",
                format!("expected 2x3, got {}x{}", x.rows(), x.cols()),
            ));
        }
        let m = to_m23(x.data().iter().copied());
        let (r, cache) = polar_forward(&m)?;
        let value = Mat::from_vec(2, 3, r.iter().flatten().copied().collect())?;
        Ok(self.push(
            value,
            Op::Polar {
                input: a,
                caches: vec![cache],
                columnwise: false,
            },
        ))
    }

    /// Column-wise [`Tape::svd_orthogonalize`] on a `6×N` matrix whose columns
    /// are row-major 2×3 matrices.
    pub fn svd_orthogonalize_cols(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != 6 {
            return Err(Error::shape(
                "svd_orthogonalize_cols",
                format!("expected 6 rows, got {}", x.rows()),
            ));
        }
        let n = x.cols();
        let mut value = Mat::zeros(6, n);
        let mut caches = Vec::with_capacity(n);
        for c in 0..n {
            let m = to_m23((0..6).map(|r| x.get(r, c)));
            let (r, cache) = polar_forward(&m).map_err(|e| match e {
                Error::Degenerate(msg) => Error::Degenerate(format!("column {c}: {msg}")),
                other => other,
            })?;
            for (k, v) in r.iter().flatten().enumerate() {
                value.set(k, c, *v);
            }
            caches.push(cache);
        }
        Ok(self.push(
            value,
            Op::Polar {
                input: a,
                caches,
                columnwise: true,
            },
        ))
    }

    /// `√Σx²` as a 1×1 node.
    pub fn frobenius(&mut self, a: Var) -> Var {
        let value = Mat::column(&[self.value(a).frobenius_norm()]);
        self.push(value, Op::Frobenius(a))
    }

    /// Max-shifted `log Σ exp(vᵢ)` over all entries.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::shape("logsumexp", "empty input"));
        }
        let value = Mat::column(&[logsumexp_slice(x.data())]);
        Ok(self.push(value, Op::LogSumExp(a)))
    }

    /// Builds a `rows×cols` matrix whose k-th row-major entry is `a.data[index[k]]`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, rows: usize, cols: usize) -> Result<Var> {
        let x = self.value(a);
        if index.len() != rows * cols {
            return Err(Error::shape(
                "gather",
                format!("{} indices for {rows}x{cols}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range {}", x.len()),
            ));
        }
        let data = index.iter().map(|&i| x.data()[i]).collect();
        let value = Mat::from_vec(rows, cols, data)?;
        Ok(self.push(value, Op::Gather(a, index)))
    }

    /// Sum of equally shaped nodes.
    pub fn add_n(&mut self, vs: &[Var]) -> Result<Var> {
        let first = vs
            .first()
            .ok_or_else(|| Error::shape("add_n", "no operands"))?;
        let mut value = self.value(*first).clone();
        for v in &vs[1..] {
            value.add_assign(self.value(*v))?;
        }
        Ok(self.push(value, Op::AddN(vs.to_vec())))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::column(&[self.value(a).sum()]);
        self.push(value, Op::SumAll(a))
    }

    /// Stacks nodes with equal column counts vertically.
    pub fn concat_rows(&mut self, vs: &[Var]) -> Result<Var> {
        let first = vs
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no operands"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for v in vs {
            let x = self.value(*v);
            if x.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{} columns vs {cols}", x.cols()),
                ));
            }
            rows += x.rows();
            data.extend_from_slice(x.data());
        }
        let value = Mat::from_vec(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(vs.to_vec())))
    }

    /// Reverse sweep from a scalar `loss`; adds `∂loss/∂leaf` into every
    /// trainable leaf's gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {r}x{c}"),
            ));
        }
        let mut adj: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Mat::column(&[1.0]));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut adj)?;
        }

        for (i, a) in adj.into_iter().enumerate() {
            if let Some(g) = a {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g)?,
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Mat, adj: &mut [Option<Mat>]) -> Result<()> {
        let node = &self.nodes[i];
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(a) {
                    let ga = g.matmul_bt(self.value(*b))?;
                    accumulate(adj, *a, ga)?;
                }
                if needs(b) {
                    let gb = self.value(*a).matmul_at(g)?;
                    accumulate(adj, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    accumulate(adj, *a, g.clone())?;
                }
                if needs(b) {
                    accumulate(adj, *b, g.clone())?;
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    accumulate(adj, *a, g.clone())?;
                }
                if needs(b) {
                    accumulate(adj, *b, g.scale(-1.0))?;
                }
            }
            Op::Scale(a, c) => accumulate(adj, *a, g.scale(*c))?,
            Op::MulConst(a, m) => accumulate(adj, *a, g.hadamard(m)?)?,
            Op::AddBias(x, b) => {
                if needs(x) {
                    accumulate(adj, *x, g.clone())?;
                }
                if needs(b) {
                    let sums: Vec<f64> = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
                    accumulate(adj, *b, Mat::column(&sums))?;
                }
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                for (gv, &xv) in ga.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *gv *= slope;
                    }
                }
                accumulate(adj, *a, ga)?;
            }
            Op::L2NormalizeCols(a, norms) => {
                let y = &node.value;
                let (rows, cols) = y.shape();
                let mut proj = vec![0.0; cols];
                for r in 0..rows {
                    for (c, p) in proj.iter_mut().enumerate() {
                        *p += y.get(r, c) * g.get(r, c);
                    }
                }
                let ga = Mat::from_fn(rows, cols, |r, c| {
                    (g.get(r, c) - y.get(r, c) * proj[c]) / norms[c]
                });
                accumulate(adj, *a, ga)?;
            }
            Op::Polar {
                input,
                caches,
                columnwise,
            } => {
                let ga = if *columnwise {
                    let mut ga = Mat::zeros(6, caches.len());
                    for (c, cache) in caches.iter().enumerate() {
                        let gc = to_m23((0..6).map(|r| g.get(r, c)));
                        let gi = polar_backward(cache, &gc);
                        for (k, v) in gi.iter().flatten().enumerate() {
                            ga.set(k, c, *v);
                        }
                    }
                    ga
                } else {
                    let gi = polar_backward(&caches[0], &to_m23(g.data().iter().copied()));
                    Mat::from_vec(2, 3, gi.iter().flatten().copied().collect())?
                };
                accumulate(adj, *input, ga)?;
            }
            Op::Frobenius(a) => {
                let norm = node.value.data()[0];
                let x = self.value(*a);
                let ga = if norm < NORM_EPS {
                    Mat::zeros(x.rows(), x.cols())
                } else {
                    x.scale(g.data()[0] / norm)
                };
                accumulate(adj, *a, ga)?;
            }
            Op::LogSumExp(a) => {
                let lse = node.value.data()[0];
                let gs = g.data()[0];
                let ga = self.value(*a).map(|v| gs * (v - lse).exp());
                accumulate(adj, *a, ga)?;
            }
            Op::Gather(a, index) => {
                let x = self.value(*a);
                let mut ga = Mat::zeros(x.rows(), x.cols());
                let buf = ga.data_mut();
                for (&src, &gv) in index.iter().zip(g.data()) {
                    buf[src] += gv;
                }
                accumulate(adj, *a, ga)?;
            }
            Op::AddN(vs) => {
                for v in vs {
                    if needs(v) {
                        accumulate(adj, *v, g.clone())?;
                    }
                }
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                let ga = Mat::from_vec(x.rows(), x.cols(), vec![g.data()[0]; x.len()])?;
                accumulate(adj, *a, ga)?;
            }
            Op::ConcatRows(vs) => {
                let cols = g.cols();
                let mut offset = 0;
                for v in vs {
                    let rows = self.value(*v).rows();
                    if needs(v) {
                        let part = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        accumulate(adj, *v, Mat::from_vec(rows, cols, part)?)?;
                    }
                    offset += rows;
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Mat>], v: Var, g: Mat) -> Result<()> {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn to_m23(mut it: impl Iterator<Item = f64>) -> M23 {
    let mut m = [[0.0; 3]; 2];
    for v in m.iter_mut().flatten() {
        *v = it.next().unwrap_or(0.0);
    }
    m
}

/// Numerically stable `log Σ exp(xᵢ)`.
pub fn logsumexp_slice(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
