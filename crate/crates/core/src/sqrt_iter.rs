//! Matrix-free application of `M^{1/2}` for symmetric positive definite `M`.
//!
//! [`sqrt_apply_krylov`] builds an orthonormal basis `Q_k` of
//! `span{z, Mz, ..., M^{k-1} z}` column by column and returns
//! `Q_k (Q_k^T M Q_k)^{1/2} Q_k^T z`. The result is exact once the Krylov space
//! becomes invariant (breakdown).
//!
//! [`sqrt_apply_schulz`] runs the coupled iteration
//! `A_{k+1} = A_k (3I - B_k A_k) / 2`, `B_{k+1} = B_k (3I - A_k B_k) / 2`,
//! `A_0 = sM`, `B_0 = I`, for which `A_k -> (sM)^{1/2}`, applied to a vector by
//! mutual recursion with one scratch vector per level. It uses no inner
//! products but needs `O(3^k)` products with `M`.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::dense::{dot, norm2, DenseSymMatrix};
use crate::error::{Error, Result};
use crate::linop::{LinearOperator, Shifted};
use crate::oracle::{apply_spectral_fn, SymEig};

pub const DEFAULT_K_MAX: usize = 200;
pub const DEFAULT_SCHULZ_K: usize = 10;
pub const MAX_SCHULZ_K: usize = 14;
pub const DEFAULT_BREAKDOWN_TOL: f64 = 1e-12;
/// Largest Krylov projection handled by [`sqrt_dense_small`].
pub const MAX_SMALL_DIM: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralEstimate {
    pub lambda_max_est: f64,
    pub lambda_min_est: Option<f64>,
    pub iterations_used: usize,
    /// `|A v - theta v| / theta` at the last iterate.
    pub residual: f64,
}

fn random_unit(n: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n)
        .map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 0.5)
        .collect();
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    v
}

/// Power iteration returning `(theta, residual, iterations)`. The Rayleigh
/// quotient `theta = v^T A v` never exceeds `lambda_max` for symmetric `A`.
fn power_iteration<A: LinearOperator + ?Sized>(
    op: &A,
    iters: usize,
    seed: u64,
) -> Result<(f64, f64, usize)> {
    let n = op.dim();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut w = vec![0.0; n];
    for attempt in 0..2 {
        let mut v = random_unit(n, &mut rng);
        let (mut theta, mut residual) = (0.0, f64::INFINITY);
        let mut it = 0;
        let mut degenerate = false;
        while it < iters.max(1) {
            it += 1;
            op.apply(&v, &mut w);
            theta = dot(&v, &w);
            let nw = norm2(&w);
            if nw == 0.0 || !nw.is_finite() {
                degenerate = true;
                break;
            }
            residual = w
                .iter()
                .zip(&v)
                .map(|(wi, vi)| (wi - theta * vi).powi(2))
                .sum::<f64>()
                .sqrt()
                / theta.abs().max(f64::MIN_POSITIVE);
            for (vi, wi) in v.iter_mut().zip(&w) {
                *vi = wi / nw;
            }
            if residual < 1e-13 {
                break;
            }
        }
        if !degenerate {
            return Ok((theta, residual, it));
        }
        if attempt == 0 {
            log::warn!("power iteration hit a null vector; reseeding once");
        } else if theta == 0.0 {
            // A v = 0 twice: treat as the zero operator
            return Ok((0.0, 0.0, it));
        }
    }
    Err(Error::LinearAlgebra(
        "power iteration produced a non-finite iterate".into(),
    ))
}

/// Estimates `lambda_max` by power iteration with a fixed seed.
pub fn estimate_lambda_max<A: LinearOperator + ?Sized>(
    op: &A,
    iters: usize,
    seed: u64,
) -> Result<SpectralEstimate> {
    let (theta, residual, it) = power_iteration(op, iters, seed)?;
    if !(theta > 0.0) {
        return Err(Error::NotPositiveDefinite(format!(
            "largest eigenvalue estimate {theta:e} is not positive"
        )));
    }
    Ok(SpectralEstimate {
        lambda_max_est: theta,
        lambda_min_est: None,
        iterations_used: it,
        residual,
    })
}

/// Adds a best-effort `lambda_min` estimate from power iteration on
/// `lambda_max I - M`.
pub fn estimate_lambda_min<A: LinearOperator + ?Sized>(
    op: &A,
    est: SpectralEstimate,
    iters: usize,
    seed: u64,
) -> Result<SpectralEstimate> {
    let shifted = Shifted {
        inner: op,
        shift: est.lambda_max_est,
    };
    let (theta, _, it) = power_iteration(&shifted, iters, seed.wrapping_add(1))?;
    let lmin = (est.lambda_max_est - theta).min(est.lambda_max_est);
    Ok(SpectralEstimate {
        lambda_min_est: Some(lmin),
        iterations_used: est.iterations_used + it,
        ..est
    })
}

/// Cyclic Jacobi eigendecomposition; eigenvectors as columns, ascending.
fn jacobi_eig(m: &DenseSymMatrix) -> Result<SymEig> {
    const MAX_SWEEPS: usize = 100;
    let n = m.n();
    let mut a = m.data().to_vec();
    let mut v = DenseSymMatrix::identity(n).data().to_vec();
    let tiny = 1e-300_f64.max(1e-18 * m.max_abs());
    let mut sweeps = 0;
    // a sweep that rotates nothing means every off-diagonal entry is
    // negligible relative to its diagonal pair
    loop {
        sweeps += 1;
        if sweeps > MAX_SWEEPS {
            return Err(Error::NoConvergence { iterations: MAX_SWEEPS });
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                let (app, aqq) = (a[p * n + p], a[q * n + q]);
                if apq.abs() <= f64::EPSILON * (app * aqq).abs().sqrt() || apq.abs() <= tiny {
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    continue;
                }
                rotated = true;
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + theta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (new, &old) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + new] = v[k * n + old];
        }
    }
    Ok(SymEig { values, vectors })
}

/// Square root of a small symmetric positive definite matrix via Jacobi
/// eigendecomposition. Eigenvalues below `1e-14 lambda_max` are clamped to
/// that floor; eigenvalues below `-1e-8 lambda_max` are an error.
pub fn sqrt_dense_small(u: &DenseSymMatrix) -> Result<DenseSymMatrix> {
    if u.n() > MAX_SMALL_DIM {
        return Err(Error::Size {
            what: "small dense square root dimension",
            got: u.n(),
            limit: MAX_SMALL_DIM,
        });
    }
    let eig = jacobi_eig(u)?;
    let lmax = eig.values.last().copied().unwrap_or(0.0);
    let lmin = eig.values.first().copied().unwrap_or(0.0);
    if lmin < -1e-8 * lmax.abs() {
        return Err(Error::NotPositiveDefinite(format!(
            "projected matrix has eigenvalue {lmin:e} (lambda_max {lmax:e})"
        )));
    }
    let floor = 1e-14 * lmax;
    Ok(apply_spectral_fn(&eig, |l| l.max(floor).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KrylovOptions {
    pub k_max: usize,
    /// Breakdown is declared when the new QR diagonal entry falls below
    /// `breakdown_tol * |M q_{j-1}|`.
    pub breakdown_tol: f64,
    /// Optional early stop: every `check_every` steps the current iterate is
    /// formed and iteration ends once it moves by less than `tol` relative.
    pub tol: Option<f64>,
    pub check_every: usize,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        Self {
            k_max: DEFAULT_K_MAX,
            breakdown_tol: DEFAULT_BREAKDOWN_TOL,
            tol: None,
            check_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KrylovDiagnostics {
    pub k0: usize,
    pub breakdown: bool,
    /// Last QR diagonal entry computed (zero if only one column was built).
    pub last_r: f64,
    /// `max |Q^T Q - I|`.
    pub orthogonality_defect: f64,
    pub matvecs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrylovOutput {
    pub y: Vec<f64>,
    pub diagnostics: KrylovDiagnostics,
}

/// Orthonormal Krylov basis with the projected operator.
///
/// `h[b][a] = q_a^T M q_b`, as accumulated by the Gram-Schmidt passes, for
/// `a <= b + 1`; entries further below the diagonal vanish. `h` has one
/// column per product with `M`, so it may be one column shorter than `q`.
pub struct KrylovBasis {
    pub q: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    pub znorm: f64,
    pub breakdown: bool,
    pub last_r: f64,
    pub orthogonality_defect: f64,
}

impl KrylovBasis {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// `Q_j (Q_j^T M Q_j)^{1/2} Q_j^T z` from the first `j` columns.
    /// Requires `j <= h.len()`.
    pub fn iterate(&self, j: usize, z: &[f64]) -> Result<Vec<f64>> {
        let q = &self.q[..j];
        let h = |a: usize, b: usize| self.h[b].get(a).copied().unwrap_or(0.0);
        let u = DenseSymMatrix::from_lower_fn(j, |a, b| 0.5 * (h(a, b) + h(b, a)));
        let su = sqrt_dense_small(&u).map_err(|e| match e {
            Error::NotPositiveDefinite(msg) => Error::NotPositiveDefinite(format!(
                "{msg}; the compressed covariance is likely indefinite, increase p"
            )),
            other => other,
        })?;
        let qz: Vec<f64> = q.iter().map(|col| dot(col, z)).collect();
        let c = su.matvec(&qz);
        let mut y = vec![0.0; z.len()];
        for (col, &cj) in q.iter().zip(&c) {
            for (yi, qi) in y.iter_mut().zip(col) {
                *yi += cj * qi;
            }
        }
        Ok(y)
    }
}

/// Orthogonalises `v` against `q` by modified Gram-Schmidt, twice. Returns
/// the summed coefficients of both passes, `q^T v` for the input `v`.
fn mgs_twice(q: &[Vec<f64>], v: &mut [f64]) -> Vec<f64> {
    let mut coef = vec![0.0; q.len()];
    for _ in 0..2 {
        for (col, c) in q.iter().zip(coef.iter_mut()) {
            let h = dot(col, v);
            *c += h;
            for (vi, ci) in v.iter_mut().zip(col) {
                *vi -= h * ci;
            }
        }
    }
    coef
}

/// Builds up to `k_max` Krylov columns. `stop` is consulted after each new
/// column and may end the iteration early.
pub fn krylov_basis<A: LinearOperator + ?Sized>(
    op: &A,
    z: &[f64],
    k_max: usize,
    breakdown_tol: f64,
    mut stop: impl FnMut(&KrylovBasis) -> Result<bool>,
) -> Result<KrylovBasis> {
    let n = op.dim();
    if z.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: z.len(),
        });
    }
    if k_max == 0 {
        return Err(Error::Config("k_max must be at least 1".into()));
    }
    let znorm = norm2(z);
    if !(znorm > 0.0) || !znorm.is_finite() {
        return Err(Error::Config("Krylov start vector must be nonzero and finite".into()));
    }
    let mut basis = KrylovBasis {
        q: vec![z.iter().map(|v| v / znorm).collect()],
        h: Vec::new(),
        znorm,
        breakdown: false,
        last_r: 0.0,
        orthogonality_defect: 0.0,
    };
    let mut mq = vec![0.0; n];
    for _ in 2..=k_max {
        op.apply(basis.q.last().expect("nonempty"), &mut mq);
        let scale = norm2(&mq);
        if !scale.is_finite() {
            return Err(Error::Divergence("operator produced non-finite values".into()));
        }
        let mut coef = mgs_twice(&basis.q, &mut mq);
        let r = norm2(&mq);
        basis.last_r = r;
        if r <= breakdown_tol * scale {
            basis.h.push(coef);
            basis.breakdown = true;
            break;
        }
        coef.push(r);
        basis.h.push(coef);
        let v: Vec<f64> = mq.iter().map(|x| x / r).collect();
        for col in &basis.q {
            basis.orthogonality_defect = basis.orthogonality_defect.max(dot(col, &v).abs());
        }
        basis.orthogonality_defect = basis.orthogonality_defect.max((dot(&v, &v) - 1.0).abs());
        basis.q.push(v);
        if stop(&basis)? {
            break;
        }
    }
    if basis.h.len() < basis.q.len() {
        op.apply(basis.q.last().expect("nonempty"), &mut mq);
        basis.h.push(basis.q.iter().map(|col| dot(col, &mq)).collect());
    }
    Ok(basis)
}

/// Approximates `M^{1/2} z` by projection onto a Krylov space of dimension at
/// most `k_max`.
pub fn sqrt_apply_krylov<A: LinearOperator + ?Sized>(
    op: &A,
    z: &[f64],
    opts: &KrylovOptions,
) -> Result<KrylovOutput> {
    let mut prev: Option<Vec<f64>> = None;
    let basis = krylov_basis(op, z, opts.k_max, opts.breakdown_tol, |b| {
        let Some(tol) = opts.tol else { return Ok(false) };
        let j = b.len();
        if j % opts.check_every.max(1) != 0 {
            return Ok(false);
        }
        // the last column has no product with M yet; compare iterates of size j - 1
        let y = b.iterate(j - 1, z)?;
        let done = prev.as_ref().is_some_and(|p| {
            let diff: f64 = p.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            diff <= tol * norm2(&y)
        });
        prev = Some(y);
        Ok(done)
    })?;
    let k0 = basis.len();
    let y = basis.iterate(k0, z)?;
    Ok(KrylovOutput {
        y,
        diagnostics: KrylovDiagnostics {
            k0,
            breakdown: basis.breakdown,
            last_r: basis.last_r,
            orthogonality_defect: basis.orthogonality_defect,
            matvecs: basis.h.len(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingPolicy {
    Safe,
    Optimal,
}

impl std::str::FromStr for ScalingPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "safe" => Ok(Self::Safe),
            "optimal" => Ok(Self::Optimal),
            _ => Err(Error::Config(format!("unknown scaling policy '{s}' (safe|optimal)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scaling {
    pub s: f64,
    /// `max(|1 - s lambda_max|, |1 - s lambda_min|)` when `lambda_min` is known.
    pub kappa: Option<f64>,
    pub policy: ScalingPolicy,
}

pub fn choose_scaling(est: &SpectralEstimate, policy: ScalingPolicy) -> Result<Scaling> {
    let lmax = est.lambda_max_est;
    if !(lmax > 0.0 && lmax.is_finite()) {
        return Err(Error::Config(format!("lambda_max estimate must be positive, got {lmax}")));
    }
    let kappa = |s: f64| {
        est.lambda_min_est
            .map(|lmin| (1.0 - s * lmax).abs().max((1.0 - s * lmin).abs()))
    };
    match (policy, est.lambda_min_est) {
        (ScalingPolicy::Optimal, Some(lmin)) if lmin > 0.0 => {
            let s = 2.0 / (lmin + lmax);
            Ok(Scaling {
                s,
                kappa: kappa(s),
                policy,
            })
        }
        (ScalingPolicy::Optimal, _) => {
            log::warn!("no positive lambda_min estimate; falling back to safe scaling");
            let s = 1.0 / lmax;
            Ok(Scaling {
                s,
                kappa: kappa(s),
                policy: ScalingPolicy::Safe,
            })
        }
        (ScalingPolicy::Safe, _) => {
            let s = 1.0 / lmax;
            Ok(Scaling {
                s,
                kappa: kappa(s),
                policy,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchulzOutput {
    #[serde(skip)]
    pub y: Vec<f64>,
    pub s: f64,
    pub k: usize,
    pub matvecs: usize,
}

struct Schulz<'a, A: ?Sized> {
    op: &'a A,
    s: f64,
    matvecs: usize,
}

impl<A: LinearOperator + ?Sized> Schulz<'_, A> {
    /// `x <- A_k x`. `scratch[0]` holds matrix products, `scratch[j]` is the
    /// level-`j` temporary.
    fn part_a(&mut self, x: &mut [f64], scratch: &mut [Vec<f64>], k: usize) {
        let (lower, upper) = scratch.split_at_mut(k.max(1));
        if k == 0 {
            let tmp = &mut lower[0];
            self.op.apply(x, tmp);
            self.matvecs += 1;
            for (xi, ti) in x.iter_mut().zip(tmp.iter()) {
                *xi = self.s * ti;
            }
            return;
        }
        let zk = &mut upper[0];
        zk.copy_from_slice(x);
        self.part_a(zk, lower, k - 1);
        self.part_b(zk, lower, k - 1);
        for (xi, zi) in x.iter_mut().zip(zk.iter()) {
            *xi = 3.0 * *xi - zi;
        }
        self.part_a(x, lower, k - 1);
        x.iter_mut().for_each(|v| *v *= 0.5);
    }

    /// `x <- B_k x`.
    fn part_b(&mut self, x: &mut [f64], scratch: &mut [Vec<f64>], k: usize) {
        if k == 0 {
            return;
        }
        let (lower, upper) = scratch.split_at_mut(k);
        let zk = &mut upper[0];
        zk.copy_from_slice(x);
        self.part_b(zk, lower, k - 1);
        self.part_a(zk, lower, k - 1);
        for (xi, zi) in x.iter_mut().zip(zk.iter()) {
            *xi = 3.0 * *xi - zi;
        }
        self.part_b(x, lower, k - 1);
        x.iter_mut().for_each(|v| *v *= 0.5);
    }
}

/// Approximates `M^{1/2} z` by `k` levels of the coupled Schulz recursion on
/// `sM`. Requires `0 < s < 2 / lambda_max(M)`; this is not checked.
pub fn sqrt_apply_schulz<A: LinearOperator + ?Sized>(
    op: &A,
    z: &[f64],
    k: usize,
    s: f64,
) -> Result<SchulzOutput> {
    let n = op.dim();
    if z.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: z.len(),
        });
    }
    if k > MAX_SCHULZ_K {
        return Err(Error::Size {
            what: "Schulz depth k (cost grows like 3^k)",
            got: k,
            limit: MAX_SCHULZ_K,
        });
    }
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Config(format!("Schulz scaling s must be positive, got {s}")));
    }
    let mut scratch = vec![vec![0.0; n]; k + 1];
    let mut y = z.to_vec();
    let mut run = Schulz { op, s, matvecs: 0 };
    run.part_a(&mut y, &mut scratch, k);
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence(format!(
            "Schulz iteration produced non-finite values; s = {s:e} is probably above 2 / lambda_max"
        )));
    }
    let inv = 1.0 / s.sqrt();
    y.iter_mut().for_each(|v| *v *= inv);
    Ok(SchulzOutput {
        y,
        s,
        k,
        matvecs: run.matvecs,
    })
}

/// Bound on the Krylov error after `k` columns for spectrum
/// `[lambda_min, lambda_max]` and `|z| = 1`:
/// `sqrt(2 lambda_max) 4 r^2 / (r - 1) r^{-k}` with
/// `r = (lambda_max + lambda_min) / (lambda_max - lambda_min)`.
pub fn krylov_error_bound(lambda_min: f64, lambda_max: f64, k: usize) -> f64 {
    let r = (lambda_max + lambda_min) / (lambda_max - lambda_min);
    (2.0 * lambda_max).sqrt() * 4.0 * r * r / (r - 1.0) * r.powi(-(k as i32))
}
