//! Nearest row-orthonormal matrix of a 2×3 input and its analytic gradient.
//!
//! For `A = UΣVᵀ` the orthonormal factor `UVᵀ` equals `(AAᵀ)^{-1/2} A`. The
//! 2×2 Gram matrix `G = AAᵀ` is diagonalized in closed form (one Jacobi
//! rotation), so no general SVD routine is involved. The backward pass
//! differentiates through `S = G^{1/2}` with the Sylvester relation
//! `S·dS + dS·S = dG`, whose solution in the eigenbasis divides by
//! `σᵢ + σⱼ`. Only a vanishing singular value makes it singular.

use crate::error::{Error, Result};

/// Smallest admissible singular value.
pub const SIGMA_EPS: f64 = 1e-8;

pub type M23 = [[f64; 3]; 2];
type M22 = [[f64; 2]; 2];

/// Forward quantities kept for the backward pass.
#[derive(Clone, Debug)]
pub struct PolarCache {
    input: M23,
    /// Eigenvectors of `AAᵀ` as columns.
    q: M22,
    /// Singular values of `A`, descending.
    sigma: [f64; 2],
}

impl PolarCache {
    pub fn singular_values(&self) -> [f64; 2] {
        self.sigma
    }
}

/// Closed-form eigendecomposition of the Gram matrix of a 2×3 matrix.
/// Returns eigenvalues (descending) and eigenvectors as columns.
pub fn gram_eigen(a: &M23) -> ([f64; 2], M22) {
    let g00 = dot3(&a[0], &a[0]);
    let g11 = dot3(&a[1], &a[1]);
    let g01 = dot3(&a[0], &a[1]);
    let theta = 0.5 * (2.0 * g01).atan2(g00 - g11);
    let (sn, cs) = theta.sin_cos();
    // Rotating by theta diagonalizes G with the larger eigenvalue first.
    let half = 0.5 * (g00 - g11);
    let radius = half.hypot(g01);
    let big = 0.5 * (g00 + g11) + radius;
    // det(AAᵀ) = |a₀ × a₁|², free of the cancellation in `mean - radius`.
    let cross = [
        a[0][1] * a[1][2] - a[0][2] * a[1][1],
        a[0][2] * a[1][0] - a[0][0] * a[1][2],
        a[0][0] * a[1][1] - a[0][1] * a[1][0],
    ];
    let det = dot3(&cross, &cross);
    let small = if big > 0.0 { det / big } else { 0.0 };
    ([big, small], [[cs, -sn], [sn, cs]])
}

/// Returns `UVᵀ` for the SVD `A = UΣVᵀ`, and the cache for [`polar_backward`].
pub fn polar_forward(a: &M23) -> Result<(M23, PolarCache)> {
    if !a.iter().flatten().all(|v| v.is_finite()) {
        return Err(Error::Degenerate("non-finite input to orthogonalization".into()));
    }
    let (lambda, q) = gram_eigen(a);
    let sigma = [lambda[0].max(0.0).sqrt(), lambda[1].max(0.0).sqrt()];
    if sigma[1] <= SIGMA_EPS {
        return Err(Error::Degenerate(format!(
            "2x3 matrix is rank deficient (singular values {:.3e}, {:.3e})",
            sigma[0], sigma[1]
        )));
    }
    let s_inv = sym_from_eigen(&q, [1.0 / sigma[0], 1.0 / sigma[1]]);
    let r = mul22_23(&s_inv, a);
    Ok((
        r,
        PolarCache {
            input: *a,
            q,
            sigma,
        },
    ))
}

/// Vector-Jacobian product: maps `∂L/∂R` to `∂L/∂A`.
pub fn polar_backward(cache: &PolarCache, grad_out: &M23) -> M23 {
    let a = &cache.input;
    let q = &cache.q;
    let s = cache.sigma;
    let s_inv = sym_from_eigen(q, [1.0 / s[0], 1.0 / s[1]]);

    // R = S⁻¹A: direct path.
    let mut grad_a = mul22_23(&s_inv, grad_out);

    // Path through S⁻¹, then S, then G = AAᵀ.
    let mut xbar = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            xbar[i][j] = dot3(&grad_out[i], &a[j]);
        }
    }
    let sbar = neg(&mul22(&mul22(&s_inv, &xbar), &s_inv));
    let sbar_eig = mul22(&mul22(&transpose22(q), &sbar), q);
    let mut gbar_eig = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            gbar_eig[i][j] = sbar_eig[i][j] / (s[i] + s[j]);
        }
    }
    let gbar = mul22(&mul22(q, &gbar_eig), &transpose22(q));
    let sym = [
        [2.0 * gbar[0][0], gbar[0][1] + gbar[1][0]],
        [gbar[0][1] + gbar[1][0], 2.0 * gbar[1][1]],
    ];
    let extra = mul22_23(&sym, a);
    for i in 0..2 {
        for j in 0..3 {
            grad_a[i][j] += extra[i][j];
        }
    }
    grad_a
}

#[inline]
fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sym_from_eigen(q: &M22, d: [f64; 2]) -> M22 {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = q[i][0] * d[0] * q[j][0] + q[i][1] * d[1] * q[j][1];
        }
    }
    out
}

fn mul22(a: &M22, b: &M22) -> M22 {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

fn mul22_23(a: &M22, b: &M23) -> M23 {
    let mut out = [[0.0; 3]; 2];
    for i in 0..2 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

fn transpose22(a: &M22) -> M22 {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

fn neg(a: &M22) -> M22 {
    [[-a[0][0], -a[0][1]], [-a[1][0], -a[1][1]]]
}
