//! Verified thin SVD.
//!
//! nalgebra's bidiagonal SVD occasionally returns factors that do not
//! reconstruct rank-deficient inputs (tall stacks of rigid observations are a
//! reliable trigger). Every result here is checked; failures are retried on
//! the transpose and finally computed with one-sided Jacobi rotations.

use nalgebra::DMatrix;

/// Relative tolerance of the reconstruction and orthonormality checks.
pub const SVD_CHECK_TOL: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 100;

/// `M = U·diag(s)·Vᵀ` with `k = min(m, n)`: `U` is `m×k`, `Vᵀ` is `k×n`,
/// singular values descending.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub s: Vec<f64>,
    pub v_t: DMatrix<f64>,
}

impl Svd {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (j, s) in self.s.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * &self.v_t
    }

    fn transpose(self) -> Svd {
        Svd {
            u: self.v_t.transpose(),
            s: self.s,
            v_t: self.u.transpose(),
        }
    }

    fn sorted(self) -> Svd {
        let k = self.s.len();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| self.s[b].total_cmp(&self.s[a]));
        Svd {
            u: DMatrix::from_fn(self.u.nrows(), k, |r, c| self.u[(r, order[c])]),
            s: order.iter().map(|&j| self.s[j]).collect(),
            v_t: DMatrix::from_fn(k, self.v_t.ncols(), |r, c| self.v_t[(order[r], c)]),
        }
    }

    fn is_valid_for(&self, m: &DMatrix<f64>) -> bool {
        let scale = m.norm().max(f64::MIN_POSITIVE);
        let k = self.s.len();
        let eye = DMatrix::<f64>::identity(k, k);
        self.s.iter().all(|s| s.is_finite() && *s >= 0.0)
            && (self.reconstruct() - m).norm() <= SVD_CHECK_TOL * scale
            && (self.u.transpose() * &self.u - &eye).norm() <= SVD_CHECK_TOL * k as f64
            && (&self.v_t * self.v_t.transpose() - &eye).norm() <= SVD_CHECK_TOL * k as f64
    }
}

pub fn svd(m: &DMatrix<f64>) -> Svd {
    if let Some(s) = library_svd(m).filter(|s| s.is_valid_for(m)) {
        return s;
    }
    let t = m.transpose();
    if let Some(s) = library_svd(&t).filter(|s| s.is_valid_for(&t)) {
        return s.transpose();
    }
    log::debug!("library SVD failed verification on a {}×{} matrix; using Jacobi", m.nrows(), m.ncols());
    jacobi_svd(m)
}

/// Singular values only, descending.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    svd(m).s
}

fn library_svd(m: &DMatrix<f64>) -> Option<Svd> {
    let raw = m.clone().try_svd(true, true, f64::EPSILON, 0)?;
    Some(
        Svd {
            u: raw.u?,
            s: raw.singular_values.iter().copied().collect(),
            v_t: raw.v_t?,
        }
        .sorted(),
    )
}

/// One-sided (Hestenes) Jacobi SVD.
pub fn jacobi_svd(m: &DMatrix<f64>) -> Svd {
    if m.nrows() < m.ncols() {
        return jacobi_svd(&m.transpose()).transpose();
    }
    let n = m.ncols();
    let mut a = m.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = a.column(p).norm_squared();
                let beta = a.column(q).norm_squared();
                let gamma = a.column(p).dot(&a.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut a, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let s: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    let top = s.iter().copied().fold(0.0, f64::max);
    let mut u = DMatrix::<f64>::zeros(m.nrows(), n);
    let mut missing = Vec::new();
    for j in 0..n {
        if s[j] > top * f64::EPSILON * n as f64 && s[j] > 0.0 {
            u.set_column(j, &(a.column(j) / s[j]));
        } else {
            missing.push(j);
        }
    }
    complete_orthonormal(&mut u, &missing);
    Svd {
        u,
        s,
        v_t: v.transpose(),
    }
    .sorted()
}

fn rotate_columns(a: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for r in 0..a.nrows() {
        let (x, y) = (a[(r, p)], a[(r, q)]);
        a[(r, p)] = c * x - s * y;
        a[(r, q)] = s * x + c * y;
    }
}

/// Fills the `missing` columns of `u` with unit vectors orthogonal to the
/// others (Gram-Schmidt over the standard basis).
fn complete_orthonormal(u: &mut DMatrix<f64>, missing: &[usize]) {
    let rows = u.nrows();
    let mut filled: Vec<usize> = (0..u.ncols()).filter(|j| !missing.contains(j)).collect();
    let mut basis = 0;
    for &j in missing {
        while basis < rows {
            let mut e = nalgebra::DVector::<f64>::zeros(rows);
            e[basis] = 1.0;
            basis += 1;
            for _ in 0..2 {
                for &k in &filled {
                    let d = u.column(k).dot(&e);
                    e -= u.column(k) * d;
                }
            }
            let n = e.norm();
            if n > 1e-8 {
                u.set_column(j, &(e / n));
                filled.push(j);
                break;
            }
        }
    }
}
