//! Procrustes-aligned 3D error, rank diagnostics and rigid factorization.

use nalgebra::{DMatrix, Matrix3, Matrix6, SymmetricEigen, Vector6};
use serde::{Deserialize, Serialize};

use crate::data::{center_rows, Dataset};
use crate::diffcore::Mat;
use crate::error::{Error, Result};
use crate::linalg::{singular_values, svd};
use crate::model::{Camera, Shape3D};

/// Which transforms the alignment may use besides rotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignOptions {
    pub reflection: bool,
    pub scale: bool,
}

impl Default for AlignOptions {
    fn default() -> Self {
        AlignOptions {
            reflection: true,
            scale: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    /// `s·R·pred`, with `pred` centered first.
    pub aligned: Shape3D,
    pub rotation: Mat,
    pub scale: f64,
    pub reflection: bool,
}

fn to_na(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn from_na(m: &DMatrix<f64>) -> Mat {
    Mat::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
}

/// Orthogonal `R` (and optional scale) minimizing `‖gt − s·R·pred‖_F`.
///
/// `R` comes from the SVD of `gt·predᵀ`. The identity is also tried and kept
/// when it is at least as good, so an already aligned prediction is returned
/// bit for bit and the aligned error never exceeds the unaligned one.
pub fn procrustes_align(pred: &Shape3D, gt: &Shape3D, opts: AlignOptions) -> Result<Alignment> {
    if pred.points() != gt.points() {
        return Err(Error::shape(
            "procrustes_align",
            format!("{} predicted points vs {} ground-truth points", pred.points(), gt.points()),
        ));
    }
    let p = center_rows(pred.s());
    let g = gt.s();
    let (pn, gn) = (p.frobenius_norm(), g.frobenius_norm());
    if pn == 0.0 || gn == 0.0 {
        return Err(Error::Degenerate("cannot align an all-zero shape".into()));
    }
    let cross = g.matmul_bt(&p)?;
    let dec = svd(&to_na(&cross));
    let u = Matrix3::from_fn(|i, j| dec.u[(i, j)]);
    let v_t = Matrix3::from_fn(|i, j| dec.v_t[(i, j)]);
    let mut r = u * v_t;
    let mut sv = dec.s;
    if r.determinant() < 0.0 && !opts.reflection {
        // Flip the axis of the smallest singular value (sorted last).
        let k = 2;
        let mut d = Matrix3::identity();
        d[(k, k)] = -1.0;
        r = u * d * v_t;
        sv[k] = -sv[k];
    }
    let scale = if opts.scale { sv.iter().sum::<f64>() / (pn * pn) } else { 1.0 };
    let rotation = Mat::from_fn(3, 3, |i, j| r[(i, j)]);
    let rotated = rotation.matmul(&p)?.scale(scale);

    let identity_scale = if opts.scale {
        (g.hadamard(&p)?.sum() / (pn * pn)).max(0.0)
    } else {
        1.0
    };
    let unaligned = p.scale(identity_scale);
    let (aligned, rotation, scale) = if g.sub(&unaligned)?.frobenius_norm() <= g.sub(&rotated)?.frobenius_norm() {
        (unaligned, Mat::identity(3), identity_scale)
    } else {
        (rotated, rotation, scale)
    };
    let reflection = det3(&rotation) < 0.0;
    Ok(Alignment {
        aligned: Shape3D::new(aligned)?,
        rotation,
        scale,
        reflection,
    })
}

fn det3(m: &Mat) -> f64 {
    Matrix3::from_row_slice(m.data()).determinant()
}

/// Per-frame aligned errors `‖gt − aligned‖_F / ‖gt‖_F` and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_frame: Vec<f64>,
    pub reflections: Vec<bool>,
    pub mean: f64,
    pub count: usize,
}

impl EvalReport {
    pub fn from_errors(per_frame: Vec<f64>, reflections: Vec<bool>) -> Self {
        let count = per_frame.len();
        let mean = if count == 0 {
            0.0
        } else {
            per_frame.iter().sum::<f64>() / count as f64
        };
        EvalReport {
            per_frame,
            reflections,
            mean,
            count,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn e3d(preds: &[Shape3D], gts: &[Shape3D]) -> Result<EvalReport> {
    e3d_with(preds, gts, AlignOptions::default())
}

pub fn e3d_with(preds: &[Shape3D], gts: &[Shape3D], opts: AlignOptions) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::shape(
            "e3d",
            format!("{} predictions for {} ground-truth shapes", preds.len(), gts.len()),
        ));
    }
    let mut errors = Vec::with_capacity(preds.len());
    let mut reflections = Vec::with_capacity(preds.len());
    for (i, (pred, gt)) in preds.iter().zip(gts).enumerate() {
        let norm = gt.s().frobenius_norm();
        if norm == 0.0 {
            return Err(Error::Degenerate(format!("ground truth of frame {i} is all zero")));
        }
        let a = procrustes_align(pred, gt, opts)?;
        errors.push(gt.s().sub(a.aligned.s())?.frobenius_norm() / norm);
        reflections.push(a.reflection);
    }
    Ok(EvalReport::from_errors(errors, reflections))
}

/// Singular values of the stacked `2F×P` observation matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankProfile {
    /// Largest first, at most 8.
    pub singular_values: Vec<f64>,
    /// `σ₄/σ₃`; 0 with fewer than four singular values or `σ₃ = 0`.
    pub ratio_4_3: f64,
}

pub fn rank_profile(ds: &Dataset) -> RankProfile {
    let mut s = singular_values(&to_na(&ds.stacked()));
    let ratio_4_3 = if s.len() >= 4 && s[2] > 0.0 { s[3] / s[2] } else { 0.0 };
    s.truncate(8);
    RankProfile {
        singular_values: s,
        ratio_4_3,
    }
}

/// Relative size of `σ₃` below which the stack counts as rank deficient.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct RigidFactorization {
    pub shape: Shape3D,
    pub cameras: Vec<Camera>,
}

/// Orthographic factorization of a fully visible sequence as one rigid shape.
///
/// Rank-3 truncated SVD `W ≈ M̂Ŝ`, then the metric upgrade `Q` with
/// `G = QQᵀ` solving `m_a G m_aᵀ = m_b G m_bᵀ = 1`, `m_a G m_bᵀ = 0` per frame
/// in least squares. Cameras are projected to the nearest orthonormal rows.
pub fn rigid_factorize(ds: &Dataset) -> Result<RigidFactorization> {
    if ds.len() < 2 {
        return Err(Error::Format(format!("rigid factorization needs 2 frames, got {}", ds.len())));
    }
    if !ds.fully_visible() {
        return Err(Error::Format("rigid factorization needs fully visible frames".into()));
    }
    let dec = svd(&to_na(&ds.stacked()));
    if dec.s.len() < 3 || dec.s[2] <= RANK_TOL * dec.s[0] {
        return Err(Error::Degenerate("observation matrix has rank below 3".into()));
    }
    let f = ds.len();
    let p = ds.points();
    let sigma: Vec<f64> = dec.s[..3].iter().map(|v| v.sqrt()).collect();
    let m_hat = DMatrix::from_fn(2 * f, 3, |r, c| dec.u[(r, c)] * sigma[c]);
    let s_hat = DMatrix::from_fn(3, p, |r, c| dec.v_t[(r, c)] * sigma[r]);

    let q = metric_upgrade(&m_hat)?;
    let q_inv = q
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("metric upgrade is singular".into()))?;
    let q_dyn = DMatrix::from_fn(3, 3, |r, c| q[(r, c)]);
    let q_inv_dyn = DMatrix::from_fn(3, 3, |r, c| q_inv[(r, c)]);
    let m = &m_hat * q_dyn;
    let s = q_inv_dyn * s_hat;

    let mut cameras = Vec::with_capacity(f);
    for i in 0..f {
        let block = DMatrix::from_fn(2, 3, |r, c| m[(2 * i + r, c)]);
        let dec = svd(&block);
        let polar = &dec.u * &dec.v_t;
        cameras.push(Camera::new(Mat::from_fn(2, 3, |r, c| polar[(r, c)]))?);
    }
    Ok(RigidFactorization {
        shape: Shape3D::new(center_rows(&from_na(&s)))?,
        cameras,
    })
}

/// Symmetric `G` parameterized by its upper triangle `(g00,g01,g02,g11,g12,g22)`.
fn constraint_row(a: [f64; 3], b: [f64; 3]) -> Vector6<f64> {
    Vector6::new(
        a[0] * b[0],
        a[0] * b[1] + a[1] * b[0],
        a[0] * b[2] + a[2] * b[0],
        a[1] * b[1],
        a[1] * b[2] + a[2] * b[1],
        a[2] * b[2],
    )
}

/// `Q` with `QQᵀ = G` from the normal equations of the orthonormality
/// constraints. Falls back to clipping negative eigenvalues of `G`.
fn metric_upgrade(m_hat: &DMatrix<f64>) -> Result<Matrix3<f64>> {
    let mut ata = Matrix6::zeros();
    let mut atb = Vector6::zeros();
    let row = |r: usize| [m_hat[(r, 0)], m_hat[(r, 1)], m_hat[(r, 2)]];
    for i in 0..m_hat.nrows() / 2 {
        let (a, b) = (row(2 * i), row(2 * i + 1));
        for (k, target) in [(constraint_row(a, a), 1.0), (constraint_row(b, b), 1.0), (constraint_row(a, b), 0.0)] {
            ata += k * k.transpose();
            atb += k * target;
        }
    }
    let x = ata
        .cholesky()
        .map(|c| c.solve(&atb))
        .or_else(|| ata.lu().solve(&atb))
        .ok_or_else(|| Error::Degenerate("metric upgrade system is singular".into()))?;
    let g = Matrix3::new(x[0], x[1], x[2], x[1], x[3], x[4], x[2], x[4], x[5]);
    if let Some(chol) = g.cholesky() {
        return Ok(chol.l());
    }
    log::warn!("metric upgrade Gram matrix is indefinite; clipping eigenvalues");
    let eig = SymmetricEigen::new(g);
    let top = eig.eigenvalues.max();
    if top <= 0.0 {
        return Err(Error::Degenerate("metric upgrade Gram matrix has no positive eigenvalue".into()));
    }
    let floor = top * 1e-12;
    let d = Matrix3::from_diagonal(&eig.eigenvalues.map(|l| l.max(floor).sqrt()));
    Ok(eig.eigenvectors * d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(seed: f64) -> Shape3D {
        // Full-rank 3×6 fixture (rows of sin(k·a) alone would span only 2 dimensions).
        let m = Mat::from_fn(3, 6, |r, c| ((r * 6 + c) as f64 * seed).sin() + ((r * c * c) as f64).cos());
        Shape3D::new(center_rows(&m)).unwrap()
    }

    #[test]
    fn identical_shapes_align_to_zero() {
        let g = shape(1.3);
        let a = procrustes_align(&g, &g, AlignOptions::default()).unwrap();
        assert_eq!(a.aligned, g);
        assert!(!a.reflection);
        let report = e3d(std::slice::from_ref(&g), std::slice::from_ref(&g)).unwrap();
        assert_eq!(report.mean, 0.0);
        assert_eq!(report.count, 1);
    }

    #[test]
    fn mirrored_prediction_needs_reflection() {
        let g = shape(0.7);
        let mirrored = Shape3D::new(Mat::from_fn(3, 6, |r, c| {
            if r == 2 {
                -g.s().get(r, c)
            } else {
                g.s().get(r, c)
            }
        }))
        .unwrap();
        let a = procrustes_align(&mirrored, &g, AlignOptions::default()).unwrap();
        assert!(a.reflection);
        assert!(a.aligned.s().max_abs_diff(g.s()) < 1e-12);
        let proper = AlignOptions {
            reflection: false,
            scale: false,
        };
        let a = procrustes_align(&mirrored, &g, proper).unwrap();
        assert!(!a.reflection);
        assert!(det3(&a.rotation) > 0.0);
    }

    #[test]
    fn scale_option_recovers_scale() {
        let g = shape(0.9);
        let half = Shape3D::new(g.s().scale(0.5)).unwrap();
        let opts = AlignOptions {
            reflection: true,
            scale: true,
        };
        let a = procrustes_align(&half, &g, opts).unwrap();
        assert!((a.scale - 2.0).abs() < 1e-12);
        let report = e3d_with(std::slice::from_ref(&half), std::slice::from_ref(&g), opts).unwrap();
        assert!(report.mean < 1e-12);
        assert!(e3d(&[half], &[g]).unwrap().mean > 0.4);
    }

    #[test]
    fn degenerate_inputs() {
        let g = shape(1.1);
        let zero = Shape3D::new(Mat::zeros(3, 6)).unwrap();
        assert!(matches!(procrustes_align(&zero, &g, AlignOptions::default()), Err(Error::Degenerate(_))));
        assert!(matches!(e3d(std::slice::from_ref(&g), &[zero]), Err(Error::Degenerate(_))));
        assert!(e3d(&[g.clone(), g.clone()], &[g]).is_err());
    }
}
