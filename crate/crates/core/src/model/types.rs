use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Mat;
use crate::error::{Error, Result};

/// Tolerance for the zero-centering invariant of observations.
pub const CENTERING_TOL: f64 = 1e-9;

/// One 2D observation of `P` keypoints with its visibility mask.
///
/// Construction zero-centers the visible points and zeroes the hidden ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame2D {
    w: Mat,
    mask: Vec<bool>,
    index: usize,
}

impl Frame2D {
    pub fn new(w: Mat, mask: Vec<bool>, index: usize) -> Result<Self> {
        if w.rows() != 2 {
            return Err(Error::shape("Frame2D::new", format!("expected 2 rows, got {}", w.rows())));
        }
        if mask.len() != w.cols() {
            return Err(Error::shape(
                "Frame2D::new",
                format!("mask of {} for {} points", mask.len(), w.cols()),
            ));
        }
        if !w.is_finite() {
            return Err(Error::Format(format!("frame {index} has non-finite coordinates")));
        }
        let w = center_visible(&w, &mask);
        Ok(Frame2D { w, mask, index })
    }

    /// Fully visible frame.
    pub fn visible(w: Mat, index: usize) -> Result<Self> {
        let p = w.cols();
        Frame2D::new(w, vec![true; p], index)
    }

    pub fn w(&self) -> &Mat {
        &self.w
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn points(&self) -> usize {
        self.w.cols()
    }

    pub fn visible_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn with_index(mut self, index: usize) -> Self {
        self.index = index;
        self
    }

    /// `2×P` matrix of ones on visible columns and zeros elsewhere.
    pub fn mask_matrix(&self, rows: usize) -> Mat {
        Mat::from_fn(rows, self.points(), |_, p| if self.mask[p] { 1.0 } else { 0.0 })
    }
}

/// Subtracts the per-row mean of the visible columns and zeroes hidden ones.
///
/// A row whose mean is already at round-off level is left untouched, so
/// centering is idempotent and stored data reloads bit for bit.
pub fn center_visible(w: &Mat, mask: &[bool]) -> Mat {
    let visible = mask.iter().filter(|&&m| m).count();
    let mut out = Mat::zeros(w.rows(), w.cols());
    if visible == 0 {
        return out;
    }
    for r in 0..w.rows() {
        let mean: f64 = (0..w.cols())
            .filter(|&p| mask[p])
            .map(|p| w.get(r, p))
            .sum::<f64>()
            / visible as f64;
        let scale = (0..w.cols())
            .filter(|&p| mask[p])
            .fold(0.0f64, |m, p| m.max(w.get(r, p).abs()));
        let mean = if is_roundoff(mean, scale) { 0.0 } else { mean };
        for p in 0..w.cols() {
            if mask[p] {
                out.set(r, p, w.get(r, p) - mean);
            }
        }
    }
    out
}

/// True when `mean` is indistinguishable from summation error on values of
/// magnitude `scale`.
pub(crate) fn is_roundoff(mean: f64, scale: f64) -> bool {
    mean.abs() <= 1e-13 * scale
}

/// Estimated or ground-truth 3D shape, `3×P`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape3D {
    s: Mat,
}

impl Shape3D {
    pub fn new(s: Mat) -> Result<Self> {
        if s.rows() != 3 {
            return Err(Error::shape("Shape3D::new", format!("expected 3 rows, got {}", s.rows())));
        }
        if !s.is_finite() {
            return Err(Error::Degenerate("shape has non-finite entries".into()));
        }
        Ok(Shape3D { s })
    }

    pub fn s(&self) -> &Mat {
        &self.s
    }

    pub fn points(&self) -> usize {
        self.s.cols()
    }

    pub fn into_mat(self) -> Mat {
        self.s
    }
}

/// Orthographic camera: `2×3` with orthonormal rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    m: Mat,
}

impl Camera {
    pub const TOL: f64 = 1e-8;

    pub fn new(m: Mat) -> Result<Self> {
        if m.shape() != (2, 3) {
            return Err(Error::shape("Camera::new", "expected 2x3"));
        }
        let err = orthonormality_error(&m);
        if err > Self::TOL {
            return Err(Error::Contract(format!(
                "camera rows not orthonormal (|MMᵀ - I| = {err:.3e})"
            )));
        }
        Ok(Camera { m })
    }

    pub fn m(&self) -> &Mat {
        &self.m
    }

    pub fn project(&self, shape: &Shape3D) -> Mat {
        self.m.matmul(shape.s()).expect("3xP shape")
    }
}

/// `‖M·Mᵀ − I‖_F` for a matrix with two rows.
pub fn orthonormality_error(m: &Mat) -> f64 {
    let g = m.matmul_bt(m).expect("same matrix");
    g.sub(&Mat::identity(g.rows()))
        .expect("square")
        .frobenius_norm()
}

/// First two rows of a rotation drawn uniformly from the rotation group
/// (Gram-Schmidt on Gaussian vectors).
pub fn random_rotation_rows<R: Rng + ?Sized>(rng: &mut R) -> Mat {
    loop {
        let g: Vec<f64> = (0..6).map(|_| StandardNormal.sample(rng)).collect();
        let (a, b) = (&g[0..3], &g[3..6]);
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na < 1e-12 {
            continue;
        }
        let r0: Vec<f64> = a.iter().map(|v| v / na).collect();
        let dot: f64 = r0.iter().zip(b).map(|(x, y)| x * y).sum();
        let rest: Vec<f64> = b.iter().zip(&r0).map(|(y, x)| y - dot * x).collect();
        let nb = rest.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nb < 1e-12 {
            continue;
        }
        let mut data = r0;
        data.extend(rest.iter().map(|v| v / nb));
        return Mat::from_vec(2, 3, data).expect("2x3");
    }
}

/// Middle-layer output of the shape network and its unit-norm copy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Representation {
    pub raw: Vec<f64>,
    pub unit: Vec<f64>,
}

impl Representation {
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= crate::diffcore::NORM_EPS {
            return Err(Error::Degenerate("representation has zero norm".into()));
        }
        let unit = raw.iter().map(|v| v / norm).collect();
        Ok(Representation { raw, unit })
    }

    pub fn dim(&self) -> usize {
        self.raw.len()
    }
}
