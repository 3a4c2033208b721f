//! Dense reference computations: symmetric eigendecomposition, square root,
//! spectral bounds and operator-norm estimates.
//!
//! Everything here is `O(N^3)` and meant for validation only.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use faer::{Mat, Side};
use serde::Serialize;

use crate::dense::{dot, norm2, DenseSymMatrix};
use crate::error::{Error, Result};
use crate::linop::{Difference, LinearOperator};

/// Eigenpairs of a symmetric matrix. `vectors` is row-major with the
/// eigenvectors stored as columns, in ascending eigenvalue order.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Vec<f64>,
}

fn to_faer(m: &DenseSymMatrix) -> Mat<f64> {
    let n = m.n();
    let data = m.data();
    Mat::from_fn(n, n, |i, j| data[i * n + j])
}

/// Symmetric eigendecomposition (blocked tridiagonalisation and
/// divide-and-conquer, from `faer`).
pub fn sym_eig(m: &DenseSymMatrix) -> Result<SymEig> {
    if !m.is_symmetric() {
        return Err(Error::LinearAlgebra("eigensolver requires a symmetric matrix".into()));
    }
    let n = m.n();
    if n == 0 {
        return Ok(SymEig {
            values: vec![],
            vectors: vec![],
        });
    }
    let evd = to_faer(m)
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::LinearAlgebra(format!("dense eigensolver failed: {e:?}")))?;
    let (s, u) = (evd.S(), evd.U());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[i].total_cmp(&s[j]));
    let values = order.iter().map(|&k| s[k]).collect();
    let mut vectors = vec![0.0; n * n];
    for i in 0..n {
        for (col, &k) in order.iter().enumerate() {
            vectors[i * n + col] = u[(i, k)];
        }
    }
    Ok(SymEig { values, vectors })
}

/// `V f(Lambda) V^T` from an eigendecomposition.
pub fn apply_spectral_fn(eig: &SymEig, f: impl Fn(f64) -> f64) -> DenseSymMatrix {
    let n = eig.values.len();
    let v = Mat::from_fn(n, n, |i, j| eig.vectors[i * n + j]);
    let fl: Vec<f64> = eig.values.iter().map(|&l| f(l)).collect();
    let scaled = Mat::from_fn(n, n, |i, j| eig.vectors[i * n + j] * fl[j]);
    let prod = &scaled * v.transpose();
    // the product is symmetric up to rounding; keep the lower triangle
    DenseSymMatrix::from_lower_fn(n, |i, j| prod[(i, j)])
}

/// `V f(Lambda) V^T x` without forming the matrix.
pub fn apply_spectral_fn_vec(eig: &SymEig, f: impl Fn(f64) -> f64, x: &[f64]) -> Vec<f64> {
    let n = eig.values.len();
    let mut c = vec![0.0; n];
    for (i, xi) in x.iter().enumerate() {
        let row = &eig.vectors[i * n..(i + 1) * n];
        for (ck, vk) in c.iter_mut().zip(row) {
            *ck += xi * vk;
        }
    }
    for (ck, &l) in c.iter_mut().zip(&eig.values) {
        *ck *= f(l);
    }
    (0..n).map(|i| dot(&eig.vectors[i * n..(i + 1) * n], &c)).collect()
}

/// Symmetric square root of a numerically positive semidefinite matrix.
///
/// Eigenvalues in `[-1e-8 lambda_max, 0)` are treated as roundoff and set to
/// zero; anything more negative is an error.
pub fn dense_sqrt(m: &DenseSymMatrix) -> Result<DenseSymMatrix> {
    let eig = sym_eig(m)?;
    let lmax = eig.values.last().copied().unwrap_or(0.0);
    let lmin = eig.values.first().copied().unwrap_or(0.0);
    if lmin < -1e-8 * lmax.abs() {
        return Err(Error::NotPositiveDefinite(format!(
            "lambda_min = {lmin:e} with lambda_max = {lmax:e}"
        )));
    }
    Ok(apply_spectral_fn(&eig, |l| l.max(0.0).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralBounds {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// `lambda_max / max(lambda_min, 1e-300)`.
    pub cond: f64,
}

pub fn spectral_bounds(m: &DenseSymMatrix) -> Result<SpectralBounds> {
    let eig = sym_eig(m)?;
    let (lambda_min, lambda_max) = match (eig.values.first(), eig.values.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(Error::EmptyPointSet),
    };
    Ok(SpectralBounds {
        lambda_min,
        lambda_max,
        // not positive definite: the 2-norm condition number is meaningless
        cond: if lambda_min > 0.0 { lambda_max / lambda_min } else { f64::INFINITY },
    })
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn spectral_norm(m: &DenseSymMatrix) -> Result<f64> {
    let b = spectral_bounds(m)?;
    Ok(b.lambda_max.abs().max(b.lambda_min.abs()))
}

/// Largest singular value of a general square matrix, via `A^T A`.
pub fn spectral_norm_general(m: &DenseSymMatrix) -> Result<f64> {
    let mut ata = m.transpose().matmul(m);
    ata.symmetrize();
    Ok(spectral_norm(&ata)?.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormEstimate {
    pub value: f64,
    /// `|D v - theta v| / theta` at the final iterate; zero when `theta = 0`.
    pub residual: f64,
    pub iterations: usize,
}

/// Estimates `||A - B||_2` for symmetric `A`, `B` by power iteration on the
/// difference. Each probe starts from a fixed-seed random vector; the largest
/// estimate wins.
pub fn op_norm_diff<A, B>(a: &A, b: &B, probes: usize, iters: usize, seed: u64) -> Result<NormEstimate>
where
    A: LinearOperator + ?Sized,
    B: LinearOperator + ?Sized,
{
    let n = a.dim();
    if b.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: b.dim(),
        });
    }
    let diff = Difference { a, b };
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut best = NormEstimate {
        value: 0.0,
        residual: 0.0,
        iterations: 0,
    };
    let mut w = vec![0.0; n];
    for _ in 0..probes.max(1) {
        let mut v: Vec<f64> = (0..n)
            .map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 0.5)
            .collect();
        let nv = norm2(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        let mut theta = 0.0;
        let mut residual = 0.0;
        let mut it = 0;
        while it < iters {
            it += 1;
            diff.apply(&v, &mut w);
            let nw = norm2(&w);
            if nw == 0.0 {
                theta = 0.0;
                residual = 0.0;
                break;
            }
            // |D v| is a lower bound on ||D||_2 for unit v
            theta = nw;
            let rq = dot(&v, &w);
            residual = w
                .iter()
                .zip(&v)
                .map(|(wi, vi)| (wi - rq * vi).powi(2))
                .sum::<f64>()
                .sqrt()
                / nw;
            for (vi, wi) in v.iter_mut().zip(&w) {
                *vi = wi / nw;
            }
            if residual < 1e-10 {
                break;
            }
        }
        if theta > best.value {
            best = NormEstimate {
                value: theta,
                residual,
                iterations: it,
            };
        }
    }
    Ok(best)
}
