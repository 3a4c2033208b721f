//! End-to-end field sampling: `z ~ N(0, I)` from a per-sample stream, then
//! `y = mean + C_p^{1/2} z`, optionally exponentiated.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::cluster::{build_block_tree, build_cluster_tree};
use crate::error::{Error, Result};
use crate::h2::{H2Matrix, TreeOrder};
use crate::kernels::{assemble_dense_capped, Kernel, DEFAULT_DENSE_CAP};
use crate::pointset::PointSet;
use crate::rng::draw_normal;
use crate::sqrt_iter::{
    choose_scaling, estimate_lambda_max, estimate_lambda_min, sqrt_apply_krylov, sqrt_apply_schulz,
    KrylovDiagnostics, KrylovOptions, Scaling, ScalingPolicy, DEFAULT_SCHULZ_K,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Method {
    Krylov(KrylovOptions),
    Schulz {
        k: usize,
        scaling: ScalingPolicy,
        power_iters: usize,
    },
}

impl Default for Method {
    fn default() -> Self {
        Method::Krylov(KrylovOptions::default())
    }
}

impl Method {
    pub fn schulz(k: usize, scaling: ScalingPolicy) -> Self {
        Method::Schulz {
            k,
            scaling,
            power_iters: 200,
        }
    }

    pub fn default_schulz() -> Self {
        Self::schulz(DEFAULT_SCHULZ_K, ScalingPolicy::Safe)
    }
}

#[derive(Debug, Clone)]
pub struct SampleConfig {
    pub kernel: Kernel,
    pub points: PointSet,
    pub p: usize,
    pub eta: f64,
    pub c_leaf: usize,
    pub method: Method,
    pub seed: u64,
    pub n_samples: usize,
    pub lognormal: bool,
    /// Constant added before exponentiation.
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum SampleDiagnostics {
    Krylov(KrylovDiagnostics),
    Schulz { s: f64, k: usize, matvecs: usize, kappa: Option<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSample {
    /// Aligned with the point set order.
    pub values: Vec<f64>,
    pub sample_index: usize,
    pub diagnostics: SampleDiagnostics,
}

/// An assembled `C_p` plus everything needed to draw samples from it.
pub struct FieldSampler {
    pub cfg: SampleConfig,
    pub h2: H2Matrix,
    pub scaling: Option<Scaling>,
    pub assembly_seconds: f64,
}

impl FieldSampler {
    pub fn new(cfg: SampleConfig) -> Result<Self> {
        if cfg.n_samples == 0 {
            return Err(Error::Config("number of samples must be at least 1".into()));
        }
        if !(cfg.eta > 0.0) {
            return Err(Error::Config(format!("eta must be positive, got {}", cfg.eta)));
        }
        if !cfg.mean.is_finite() {
            return Err(Error::Config("mean must be finite".into()));
        }
        if let Some(w) = cfg.kernel.admissibility_guidance(cfg.eta) {
            log::info!("{w}");
        }
        let t0 = Instant::now();
        let tree = build_cluster_tree(&cfg.points, cfg.c_leaf)?;
        let bct = build_block_tree(&tree, cfg.eta);
        let h2 = H2Matrix::assemble(&cfg.kernel, &cfg.points, &bct, cfg.p)?;
        let assembly_seconds = t0.elapsed().as_secs_f64();
        let scaling = match cfg.method {
            Method::Schulz {
                scaling,
                power_iters,
                ..
            } => {
                let op = TreeOrder(&h2);
                let mut est = estimate_lambda_max(&op, power_iters, cfg.seed)?;
                if scaling == ScalingPolicy::Optimal {
                    est = estimate_lambda_min(&op, est, power_iters, cfg.seed)?;
                }
                Some(choose_scaling(&est, scaling)?)
            }
            Method::Krylov(_) => None,
        };
        Ok(Self {
            cfg,
            h2,
            scaling,
            assembly_seconds,
        })
    }

    /// `C_p^{1/2} z` for `z` in point order, without mean or exponentiation.
    pub fn apply_sqrt(&self, z: &[f64]) -> Result<(Vec<f64>, SampleDiagnostics)> {
        let tree = self.h2.tree();
        let zt = tree.to_tree_order(z);
        let op = TreeOrder(&self.h2);
        let (yt, diag) = match self.cfg.method {
            Method::Krylov(opts) => {
                let out = sqrt_apply_krylov(&op, &zt, &opts)?;
                (out.y, SampleDiagnostics::Krylov(out.diagnostics))
            }
            Method::Schulz { k, .. } => {
                let sc = self.scaling.expect("scaling chosen at construction");
                let out = sqrt_apply_schulz(&op, &zt, k, sc.s)?;
                (
                    out.y,
                    SampleDiagnostics::Schulz {
                        s: out.s,
                        k,
                        matvecs: out.matvecs,
                        kappa: sc.kappa,
                    },
                )
            }
        };
        Ok((tree.from_tree_order(&yt), diag))
    }

    pub fn sample(&self, index: usize) -> Result<FieldSample> {
        let z = draw_normal(self.cfg.seed, index as u64, self.h2.n());
        let (mut values, diagnostics) = self.apply_sqrt(&z)?;
        for v in values.iter_mut() {
            *v += self.cfg.mean;
            if self.cfg.lognormal {
                *v = v.exp();
            }
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("sample {index} is non-finite at point {i}")));
        }
        Ok(FieldSample {
            values,
            sample_index: index,
            diagnostics,
        })
    }

    /// Samples `0..n`, computed in parallel and returned in index order.
    pub fn samples(&self, n: usize) -> Result<Vec<FieldSample>> {
        (0..n).into_par_iter().map(|i| self.sample(i)).collect()
    }
}

/// Builds `C_p` once and draws `cfg.n_samples` samples.
pub fn sample_field(cfg: &SampleConfig) -> Result<Vec<FieldSample>> {
    let sampler = FieldSampler::new(cfg.clone())?;
    sampler.samples(cfg.n_samples).map_err(with_advice)
}

/// Adds a hint to raise `p` when the compressed matrix looks indefinite.
pub fn with_advice(e: Error) -> Error {
    match e {
        Error::NotPositiveDefinite(msg) if !msg.contains("increase p") => {
            Error::NotPositiveDefinite(format!("{msg}; try a larger interpolation order p"))
        }
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CovarianceCheck {
    pub max_abs_entry_error: f64,
    pub frobenius_rel_error: f64,
    pub max_abs_entry: f64,
    pub m: usize,
}

/// Compares `(1/m) sum y y^T` over samples `0..m` with the dense kernel
/// matrix. Uses the Gaussian part only (no mean, no exponentiation).
pub fn empirical_covariance_check(sampler: &FieldSampler, m: usize) -> Result<CovarianceCheck> {
    if m < 100 {
        return Err(Error::Config(format!("covariance check needs m >= 100, got {m}")));
    }
    let n = sampler.h2.n();
    let dense = assemble_dense_capped(&sampler.cfg.kernel, &sampler.cfg.points, DEFAULT_DENSE_CAP)?;
    let ys: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let z = draw_normal(sampler.cfg.seed, i as u64, n);
            sampler.apply_sqrt(&z).map(|r| r.0)
        })
        .collect::<Result<_>>()?;
    let mut acc = vec![0.0; n * n];
    for y in &ys {
        for i in 0..n {
            let yi = y[i];
            for (a, yj) in acc[i * n..(i + 1) * n].iter_mut().zip(y) {
                *a += yi * yj;
            }
        }
    }
    let (mut max_err, mut sq_err) = (0.0f64, 0.0);
    for (a, c) in acc.iter().zip(dense.data()) {
        let e = a / m as f64 - c;
        max_err = max_err.max(e.abs());
        sq_err += e * e;
    }
    Ok(CovarianceCheck {
        max_abs_entry_error: max_err,
        frobenius_rel_error: sq_err.sqrt() / dense.frobenius(),
        max_abs_entry: dense.max_abs(),
        m,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LognormalMeanCheck {
    pub point: usize,
    pub empirical: f64,
    /// `exp(mean + C_xx / 2)`.
    pub exact: f64,
    /// Four standard errors of the sample mean.
    pub envelope: f64,
}

pub fn lognormal_mean_check(sampler: &FieldSampler, point: usize, m: usize) -> Result<LognormalMeanCheck> {
    let x = sampler.cfg.points.point(point);
    let var = sampler.cfg.kernel.eval(x, x)?;
    let mu = sampler.cfg.mean;
    let values: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|i| {
            let z = draw_normal(sampler.cfg.seed, i as u64, sampler.h2.n());
            sampler.apply_sqrt(&z).map(|(y, _)| (mu + y[point]).exp())
        })
        .collect::<Result<_>>()?;
    let empirical = values.iter().sum::<f64>() / m as f64;
    let sd = ((var.exp() - 1.0) * (2.0 * mu + var).exp()).sqrt();
    Ok(LognormalMeanCheck {
        point,
        empirical,
        exact: (mu + 0.5 * var).exp(),
        envelope: 4.0 * sd / (m as f64).sqrt(),
    })
}

/// CSV with header `x_1..x_d,sample_0..`, one row per point, values with 17
/// significant digits.
pub fn write_samples_csv<W: Write>(out: &mut W, points: &PointSet, samples: &[FieldSample]) -> Result<()> {
    let header: Vec<String> = (1..=points.dim())
        .map(|a| format!("x_{a}"))
        .chain(samples.iter().map(|s| format!("sample_{}", s.sample_index)))
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for (i, x) in points.iter().enumerate() {
        let row: Vec<String> = x
            .iter()
            .copied()
            .chain(samples.iter().map(|s| s.values[i]))
            .map(|v| format!("{v:.16e}"))
            .collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::MaternParams;
    use crate::pointset::{generate_grid, BBox};

    fn cfg(points: PointSet, method: Method) -> SampleConfig {
        SampleConfig {
            kernel: Kernel::matern(MaternParams::new(1.0, 1.0, 0.5, 2).unwrap()),
            points,
            p: 4,
            eta: 1.0,
            c_leaf: 20,
            method,
            seed: 7,
            n_samples: 3,
            lognormal: false,
            mean: 0.0,
        }
    }

    #[test]
    fn single_point_gives_standard_normals() {
        let ps = PointSet::new(2, vec![0.5, 0.5]).unwrap();
        let s = FieldSampler::new(cfg(ps, Method::default())).unwrap();
        let v: Vec<f64> = s.samples(10_000).unwrap().iter().map(|f| f.values[0]).collect();
        let var = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        assert!((var - 1.0).abs() < 0.06, "{var}");
    }

    #[test]
    fn far_points_are_uncorrelated() {
        let ps = PointSet::new(1, vec![0.0, 20.0]).unwrap();
        let s = FieldSampler::new(cfg(ps, Method::default())).unwrap();
        let samples = s.samples(10_000).unwrap();
        let c = samples.iter().map(|f| f.values[0] * f.values[1]).sum::<f64>() / 1e4;
        assert!(c.abs() < 0.05, "{c}");
        let chk = empirical_covariance_check(&s, 10_000).unwrap();
        assert!(chk.max_abs_entry_error < 0.05 * 2.0);
    }

    #[test]
    fn two_point_covariance_envelope() {
        let ps = PointSet::new(1, vec![0.0, 0.3]).unwrap();
        let s = FieldSampler::new(cfg(ps, Method::default())).unwrap();
        for m in [500usize, 4000] {
            let chk = empirical_covariance_check(&s, m).unwrap();
            assert!(chk.max_abs_entry_error <= 5.0 * (2.0 / m as f64).sqrt() * chk.max_abs_entry);
        }
    }

    #[test]
    fn deterministic_csv() {
        let ps = generate_grid(8, 2, &BBox::unit(2)).unwrap();
        let run = |method| {
            let c = cfg(ps.clone(), method);
            let samples = sample_field(&c).unwrap();
            let mut buf = Vec::new();
            write_samples_csv(&mut buf, &ps, &samples).unwrap();
            String::from_utf8(buf).unwrap()
        };
        let a = run(Method::default());
        assert_eq!(a, run(Method::default()));
        assert_eq!(a.lines().count(), 65);
        assert!(a.starts_with("x_1,x_2,sample_0,sample_1,sample_2\n"));
        let b = run(Method::schulz(6, ScalingPolicy::Safe));
        assert_eq!(b, run(Method::schulz(6, ScalingPolicy::Safe)));
    }

    #[test]
    fn sigma_scales_samples() {
        let ps = generate_grid(6, 2, &BBox::unit(2)).unwrap();
        let base = cfg(ps.clone(), Method::default());
        let mut scaled = base.clone();
        scaled.kernel = base.kernel.scale_sigma(3.0).unwrap();
        let a = sample_field(&base).unwrap();
        let b = sample_field(&scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (u, v) in x.values.iter().zip(&y.values) {
                assert!((3.0 * u - v).abs() <= 1e-8 * v.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn lognormal_positive_with_matching_mean() {
        let ps = generate_grid(4, 2, &BBox::unit(2)).unwrap();
        let mut c = cfg(ps, Method::default());
        c.lognormal = true;
        c.mean = 0.2;
        let s = FieldSampler::new(c).unwrap();
        assert!(s.samples(50).unwrap().iter().all(|f| f.values.iter().all(|&v| v > 0.0)));
        let chk = lognormal_mean_check(&s, 5, 4000).unwrap();
        assert!((chk.empirical - chk.exact).abs() <= chk.envelope, "{chk:?}");
    }

    #[test]
    fn lognormal_moment_formula_scalar() {
        // scalar simulation of exp(Z), Z ~ N(0.2, 0.7)
        let z = draw_normal(3, 0, 200_000);
        let m = z.iter().map(|v| (0.2 + 0.7f64.sqrt() * v).exp()).sum::<f64>() / z.len() as f64;
        assert!((m - (0.2f64 + 0.35).exp()).abs() < 0.01, "{m}");
    }

    #[test]
    fn rejects_zero_samples() {
        let ps = PointSet::new(1, vec![0.0]).unwrap();
        let mut c = cfg(ps, Method::default());
        c.n_samples = 0;
        assert!(matches!(sample_field(&c), Err(Error::Config(_))));
    }
}
