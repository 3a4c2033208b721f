//! Covariance functions.
//!
//! Three families are supported:
//!
//! * Matérn kernels with smoothness `mu` in `{1/2, 3/2, 5/2, inf}`, evaluated
//!   through their closed forms in the `p`-norm distance `r = |x - y|_p`;
//! * the non-stationary anisotropic kernel
//!   `sigma^2 det(S_x)^{1/4} det(S_y)^{1/4} / (sqrt(2) det(S_x + S_y)^{1/2})
//!   times exp(-(x - y)^T (S_x + S_y)^{-1} (x - y) / 2)` for a field `x -> S_x` of
//!   symmetric positive definite matrices;
//! * caller-supplied symmetric callbacks.
//!
//! Note that the anisotropic kernel is not normalised to `sigma^2` on the
//! diagonal: with `S_x = S_y` its value at `x = y` is
//! `sigma^2 / (sqrt(2) 2^{d/2})`.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dense::DenseSymMatrix;
use crate::error::{Error, Result};
use crate::pointset::PointSet;

/// Default upper bound on `N` for dense assembly.
pub const DEFAULT_DENSE_CAP: usize = 4096;

/// Floor applied to `|x|^2` by [`example_anisotropy`].
pub const EPS_ANISO: f64 = 1e-8;

/// Supported Matérn smoothness values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Smoothness {
    Half,
    ThreeHalves,
    FiveHalves,
    Infinite,
}

impl Smoothness {
    pub fn from_value(mu: f64) -> Result<Self> {
        match mu {
            0.5 => Ok(Self::Half),
            1.5 => Ok(Self::ThreeHalves),
            2.5 => Ok(Self::FiveHalves),
            f64::INFINITY => Ok(Self::Infinite),
            _ => Err(Error::Config(format!(
                "unsupported Matern smoothness mu = {mu}; supported values are 0.5, 1.5, 2.5, inf"
            ))),
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Self::Half => 0.5,
            Self::ThreeHalves => 1.5,
            Self::FiveHalves => 2.5,
            Self::Infinite => f64::INFINITY,
        }
    }

    /// Correlation at scaled distance `t = r / lambda`.
    fn correlation(self, t: f64) -> f64 {
        match self {
            Self::Half => (-t).exp(),
            Self::ThreeHalves => {
                let a = 3f64.sqrt() * t;
                (1.0 + a) * (-a).exp()
            }
            Self::FiveHalves => {
                let a = 5f64.sqrt() * t;
                (1.0 + a + 5.0 * t * t / 3.0) * (-a).exp()
            }
            Self::Infinite => (-0.5 * t * t).exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct MaternParams {
    pub sigma: f64,
    pub lambda: f64,
    pub mu: Smoothness,
    pub pnorm: u32,
}

impl MaternParams {
    pub fn new(sigma: f64, lambda: f64, mu: f64, pnorm: u32) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
        }
        if pnorm == 0 {
            return Err(Error::Config("pnorm must be a positive integer".into()));
        }
        Ok(Self {
            sigma,
            lambda,
            mu: Smoothness::from_value(mu)?,
            pnorm,
        })
    }
}

/// Map from a point to a row-major `d x d` symmetric positive definite matrix.
pub type AnisotropyMap = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub struct AnisotropyField {
    pub sigma: f64,
    pub dim: usize,
    pub map: AnisotropyMap,
}

impl fmt::Debug for AnisotropyField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AnisotropyField")
            .field("sigma", &self.sigma)
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

pub type CustomFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum KernelKind {
    Matern(MaternParams),
    NonStationary(AnisotropyField),
    Custom { dim: usize, f: CustomFn },
}

impl fmt::Debug for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Matern(p) => f.debug_tuple("Matern").field(p).finish(),
            Self::NonStationary(a) => f.debug_tuple("NonStationary").field(a).finish(),
            Self::Custom { dim, .. } => f.debug_struct("Custom").field("dim", dim).finish(),
        }
    }
}

/// A symmetric covariance function `rho(x, y)`.
#[derive(Clone, Debug)]
pub struct Kernel {
    pub kind: KernelKind,
    /// Smoothness scale `c_2` of the derivative bound, when known.
    pub smoothness_scale_c2: Option<f64>,
}

impl Kernel {
    pub fn matern(params: MaternParams) -> Self {
        Self {
            kind: KernelKind::Matern(params),
            smoothness_scale_c2: None,
        }
    }

    pub fn nonstationary(field: AnisotropyField) -> Result<Self> {
        if !(field.sigma > 0.0 && field.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", field.sigma)));
        }
        // spot-check the map on a few points of the unit cube
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for _ in 0..8 {
            let x: Vec<f64> = (0..field.dim).map(|_| unit_f64(&mut rng)).collect();
            let s = (field.map)(&x);
            check_spd(&s, field.dim).map_err(|e| {
                Error::Config(format!("anisotropy map is not SPD at {x:?}: {e}"))
            })?;
        }
        Ok(Self {
            kind: KernelKind::NonStationary(field),
            smoothness_scale_c2: None,
        })
    }

    /// The anisotropic kernel with `S_x = |x|^2 I`.
    pub fn example_nonstationary(sigma: f64, dim: usize) -> Result<Self> {
        Self::nonstationary(AnisotropyField {
            sigma,
            dim,
            map: Arc::new(|x| example_anisotropy(x).0),
        })
    }

    /// Registers a user kernel. The callback must be symmetric; this is
    /// spot-checked on 32 pseudo-random pairs from the unit cube.
    pub fn custom(dim: usize, f: CustomFn) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0xc0ffee);
        for _ in 0..32 {
            let x: Vec<f64> = (0..dim).map(|_| unit_f64(&mut rng)).collect();
            let y: Vec<f64> = (0..dim).map(|_| unit_f64(&mut rng)).collect();
            let (a, b) = (f(&x, &y), f(&y, &x));
            let scale = a.abs().max(b.abs()).max(f(&x, &x).abs()).max(f64::MIN_POSITIVE);
            if !a.is_finite() || (a - b).abs() > 1e-12 * scale {
                return Err(Error::Config(format!(
                    "custom kernel is not symmetric: k(x,y) = {a}, k(y,x) = {b}"
                )));
            }
        }
        Ok(Self {
            kind: KernelKind::Custom { dim, f },
            smoothness_scale_c2: None,
        })
    }

    pub fn with_c2(mut self, c2: f64) -> Self {
        self.smoothness_scale_c2 = Some(c2);
        self
    }

    /// `rho(x + t, y + t) = rho(x, y)` for all shifts `t`. Custom kernels are
    /// conservatively treated as not invariant.
    pub fn is_translation_invariant(&self) -> bool {
        matches!(self.kind, KernelKind::Matern(_))
    }

    pub fn sigma(&self) -> Option<f64> {
        match &self.kind {
            KernelKind::Matern(p) => Some(p.sigma),
            KernelKind::NonStationary(a) => Some(a.sigma),
            KernelKind::Custom { .. } => None,
        }
    }

    /// Copy of the kernel with `sigma` multiplied by `factor`.
    pub fn scale_sigma(&self, factor: f64) -> Result<Self> {
        let mut k = self.clone();
        match &mut k.kind {
            KernelKind::Matern(p) => p.sigma *= factor,
            KernelKind::NonStationary(a) => a.sigma *= factor,
            KernelKind::Custom { .. } => {
                return Err(Error::Config("custom kernels have no sigma".into()))
            }
        }
        Ok(k)
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        match &self.kind {
            KernelKind::Matern(p) => Ok(p.sigma * p.sigma
                * p.mu.correlation(pnorm_dist(x, y, p.pnorm) / p.lambda)),
            KernelKind::NonStationary(a) => eval_nonstationary(a, x, y),
            KernelKind::Custom { f, .. } => Ok(f(x, y)),
        }
    }

    /// Warning text when the admissibility parameter cannot be checked
    /// against `eta < 4 c_2`, or violates it.
    pub fn admissibility_guidance(&self, eta: f64) -> Option<String> {
        match self.smoothness_scale_c2 {
            None => Some(format!(
                "kernel smoothness scale c2 unknown; eta = {eta} not checked against eta < 4 c2"
            )),
            Some(c2) if eta >= 4.0 * c2 => Some(format!(
                "eta = {eta} >= 4 c2 = {}; interpolation may not converge in p",
                4.0 * c2
            )),
            Some(_) => None,
        }
    }
}

fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn pnorm_dist(x: &[f64], y: &[f64], p: u32) -> f64 {
    match p {
        1 => x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum(),
        2 => x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
        _ => x
            .iter()
            .zip(y)
            .map(|(a, b)| (a - b).abs().powi(p as i32))
            .sum::<f64>()
            .powf(1.0 / p as f64),
    }
}

/// In-place Cholesky of a row-major `d x d` matrix; returns `log det`.
fn cholesky_in_place(a: &mut [f64], d: usize) -> Result<f64> {
    let mut logdet = 0.0;
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= a[j * d + k] * a[j * d + k];
        }
        if !(s > 0.0) {
            return Err(Error::LinearAlgebra(format!(
                "non-positive pivot {s:e} in {d}x{d} Cholesky"
            )));
        }
        let l = s.sqrt();
        a[j * d + j] = l;
        logdet += 2.0 * l.ln();
        for i in j + 1..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = s / l;
        }
    }
    Ok(logdet)
}

fn check_spd(s: &[f64], d: usize) -> Result<()> {
    if s.len() != d * d {
        return Err(Error::DimensionMismatch {
            expected: d * d,
            got: s.len(),
        });
    }
    for i in 0..d {
        for j in 0..i {
            let (a, b) = (s[i * d + j], s[j * d + i]);
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                return Err(Error::LinearAlgebra("matrix not symmetric".into()));
            }
        }
    }
    cholesky_in_place(&mut s.to_vec(), d).map(|_| ())
}

fn eval_nonstationary(a: &AnisotropyField, x: &[f64], y: &[f64]) -> Result<f64> {
    let d = a.dim;
    let sx = (a.map)(x);
    let sy = (a.map)(y);
    let mut sum: Vec<f64> = sx.iter().zip(&sy).map(|(p, q)| p + q).collect();
    let logdet_x = cholesky_in_place(&mut sx.clone(), d)?;
    let logdet_y = cholesky_in_place(&mut sy.clone(), d)?;
    let logdet_sum = cholesky_in_place(&mut sum, d).map_err(|e| {
        Error::LinearAlgebra(format!("S_x + S_y singular at x = {x:?}, y = {y:?}: {e}"))
    })?;
    // forward solve L w = x - y, quadratic form = |w|^2
    let mut w: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
    for i in 0..d {
        let mut s = w[i];
        for k in 0..i {
            s -= sum[i * d + k] * w[k];
        }
        w[i] = s / sum[i * d + i];
    }
    let quad: f64 = w.iter().map(|v| v * v).sum();
    let prefactor =
        (0.25 * logdet_x + 0.25 * logdet_y - 0.5 * logdet_sum).exp() / std::f64::consts::SQRT_2;
    Ok(a.sigma * a.sigma * prefactor * (-0.5 * quad).exp())
}

static ANISO_CLAMP_WARNED: AtomicBool = AtomicBool::new(false);

/// `S_x = |x|^2 I`, with `|x|^2` floored at [`EPS_ANISO`]. The flag reports
/// whether the floor was applied.
pub fn example_anisotropy(x: &[f64]) -> (Vec<f64>, bool) {
    let d = x.len();
    let r2: f64 = x.iter().map(|v| v * v).sum();
    let clamped = r2 < EPS_ANISO;
    if clamped && !ANISO_CLAMP_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("anisotropy |x|^2 = {r2:e} below floor at x = {x:?}; clamped to {EPS_ANISO:e}");
    }
    let v = r2.max(EPS_ANISO);
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = v;
    }
    (m, clamped)
}

/// Dense covariance matrix `C_ij = rho(x_i, x_j)`, refusing `N` above
/// [`DEFAULT_DENSE_CAP`].
pub fn assemble_dense(k: &Kernel, ps: &PointSet) -> Result<DenseSymMatrix> {
    assemble_dense_capped(k, ps, DEFAULT_DENSE_CAP)
}

pub fn assemble_dense_capped(k: &Kernel, ps: &PointSet, cap: usize) -> Result<DenseSymMatrix> {
    let n = ps.len();
    if n > cap {
        return Err(Error::Size {
            what: "dense matrix size N",
            got: n,
            limit: cap,
        });
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..=i).map(|j| k.eval(ps.point(i), ps.point(j))).collect())
        .collect::<Result<_>>()?;
    Ok(DenseSymMatrix::from_lower_fn(n, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::pointset::{generate_grid, BBox};

    fn matern(sigma: f64, lambda: f64, mu: f64) -> Kernel {
        Kernel::matern(MaternParams::new(sigma, lambda, mu, 2).unwrap())
    }

    #[test]
    fn matern_zero_lag_is_variance() {
        assert_eq!(matern(1.0, 1.0, 0.5).eval(&[0.3], &[0.3]).unwrap(), 1.0);
        assert_eq!(matern(2.0, 1.0, f64::INFINITY).eval(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 4.0);
    }

    #[test]
    fn matern_half_unit_lag() {
        let v = matern(1.0, 1.0, 0.5).eval(&[0.0, 0.0], &[0.6, 0.8]).unwrap();
        assert!((v - 0.367_879_441_171_442_3).abs() < 1e-15);
    }

    #[test]
    fn matern_closed_forms_at_unit_lag() {
        // e^{-sqrt3}(1 + sqrt3), e^{-sqrt5}(1 + sqrt5 + 5/3), e^{-1/2}
        let cases = [
            (1.5, 0.483_357_724_596_507_7),
            (2.5, 0.523_994_108_831_820_3),
            (f64::INFINITY, 0.606_530_659_712_633_4),
        ];
        for (mu, want) in cases {
            let v = matern(1.0, 1.0, mu).eval(&[0.0], &[1.0]).unwrap();
            assert!((v - want).abs() < 1e-15, "mu={mu}: {v}");
        }
    }

    #[test]
    fn rejects_unsupported_mu() {
        let err = MaternParams::new(1.0, 1.0, 0.7, 2).unwrap_err();
        assert!(err.to_string().contains("0.5, 1.5, 2.5, inf"));
        assert!(MaternParams::new(0.0, 1.0, 0.5, 2).is_err());
        assert!(MaternParams::new(1.0, -1.0, 0.5, 2).is_err());
    }

    #[test]
    fn pnorm_one_uses_manhattan_distance() {
        let k = Kernel::matern(MaternParams::new(1.0, 1.0, 0.5, 1).unwrap());
        let v = k.eval(&[0.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn nonstationary_identity_diagonal() {
        let field = AnisotropyField {
            sigma: 1.0,
            dim: 2,
            map: Arc::new(|_| vec![1.0, 0.0, 0.0, 1.0]),
        };
        let k = Kernel::nonstationary(field).unwrap();
        let v = k.eval(&[0.2, 0.4], &[0.2, 0.4]).unwrap();
        // det(I)^{1/2} / (sqrt2 det(2I)^{1/2}) = 1 / (2 sqrt2)
        assert!((v - 0.353_553_390_593_273_8).abs() < 1e-15, "{v}");
    }

    #[test]
    fn nonstationary_singular_sum_is_error() {
        let field = AnisotropyField {
            sigma: 1.0,
            dim: 1,
            map: Arc::new(|x: &[f64]| vec![if x[0] > 2.0 { 0.0 } else { 1.0 }]),
        };
        let k = Kernel::nonstationary(field).unwrap();
        assert!(matches!(k.eval(&[3.0], &[4.0]), Err(Error::LinearAlgebra(_))));
    }

    #[test]
    fn example_anisotropy_values() {
        assert_eq!(example_anisotropy(&[1.0, 0.0]), (vec![1.0, 0.0, 0.0, 1.0], false));
        assert_eq!(example_anisotropy(&[3.0, 4.0]).0, vec![25.0, 0.0, 0.0, 25.0]);
        let (m, clamped) = example_anisotropy(&[0.0, 0.0]);
        assert!(clamped);
        assert_eq!(m, vec![EPS_ANISO, 0.0, 0.0, EPS_ANISO]);
    }

    #[test]
    fn custom_kernel_symmetry_check() {
        assert!(Kernel::custom(1, Arc::new(|x: &[f64], y: &[f64]| x[0] * y[0])).is_ok());
        assert!(Kernel::custom(1, Arc::new(|x: &[f64], y: &[f64]| x[0] - y[0])).is_err());
    }

    #[test]
    fn dense_small_cases() {
        let k = matern(1.0, 1.0, 0.5);
        let one = PointSet::new(2, vec![0.5, 0.5]).unwrap();
        let c = assemble_dense(&k, &one).unwrap();
        assert_eq!(c.data(), &[1.0]);
        let two = PointSet::new(2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let c = assemble_dense(&k, &two).unwrap();
        let e = (-1.0f64).exp();
        assert_eq!(c.data(), &[1.0, e, e, 1.0]);
        assert_eq!(c.asymmetry(), 0.0);
    }

    #[test]
    fn dense_cap_enforced() {
        let ps = generate_grid(10, 2, &BBox::unit(2)).unwrap();
        let err = assemble_dense_capped(&matern(1.0, 1.0, 0.5), &ps, 50).unwrap_err();
        assert!(matches!(err, Error::Size { got: 100, limit: 50, .. }));
    }

    #[test]
    fn dense_matrices_are_psd() {
        let ps = generate_grid(6, 2, &BBox::unit(2)).unwrap();
        let n = ps.len() as f64;
        for mu in [0.5, 1.5, 2.5, f64::INFINITY] {
            let c = assemble_dense(&matern(1.0, 0.5, mu), &ps).unwrap();
            let b = oracle::spectral_bounds(&c).unwrap();
            assert!(b.lambda_min > -1e-8 * n, "mu={mu}: {}", b.lambda_min);
            if mu == 0.5 {
                assert!(b.lambda_min > 0.0);
            }
        }
        let c = assemble_dense(&Kernel::example_nonstationary(1.0, 2).unwrap(), &ps).unwrap();
        assert!(oracle::spectral_bounds(&c).unwrap().lambda_min > -1e-8 * n);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn mu_strategy() -> impl Strategy<Value = f64> {
            prop_oneof![Just(0.5), Just(1.5), Just(2.5), Just(f64::INFINITY)]
        }

        proptest! {
            #[test]
            fn symmetric(x in prop::array::uniform2(-2.0..2.0f64), y in prop::array::uniform2(-2.0..2.0f64),
                         mu in mu_strategy(), lambda in 0.05..5.0f64, p in 1u32..4) {
                let k = Kernel::matern(MaternParams::new(1.3, lambda, mu, p).unwrap());
                let a = k.eval(&x, &y).unwrap();
                let b = k.eval(&y, &x).unwrap();
                prop_assert!((a - b).abs() <= 1e-15 * k.eval(&x, &x).unwrap());
                let ns = Kernel::example_nonstationary(1.0, 2).unwrap();
                let a = ns.eval(&x, &y).unwrap();
                let b = ns.eval(&y, &x).unwrap();
                prop_assert!((a - b).abs() <= 1e-15 * ns.eval(&x, &x).unwrap().max(a.abs()));
            }

            #[test]
            fn monotone_in_distance(r1 in 0.0..10.0f64, dr in 0.0..10.0f64, mu in mu_strategy()) {
                let k = Kernel::matern(MaternParams::new(1.0, 0.7, mu, 2).unwrap());
                let a = k.eval(&[0.0], &[r1]).unwrap();
                let b = k.eval(&[0.0], &[r1 + dr]).unwrap();
                prop_assert!(a >= b);
            }

            #[test]
            fn sigma_scaling(s in 0.1..10.0f64, x in prop::array::uniform2(0.0..1.0f64),
                             y in prop::array::uniform2(0.0..1.0f64), mu in mu_strategy()) {
                let base = Kernel::matern(MaternParams::new(1.0, 0.3, mu, 2).unwrap());
                let scaled = base.scale_sigma(s).unwrap();
                let a = scaled.eval(&x, &y).unwrap();
                let b = s * s * base.eval(&x, &y).unwrap();
                prop_assert!((a - b).abs() <= 1e-15 * a.abs().max(1e-300) * 4.0);
            }
        }
    }
}
