//! Measurement drivers shared by the command-line tool and the acceptance
//! tests: accuracy tables, timing sweeps and structure statistics.

use std::time::Instant;

use serde::Serialize;

use crate::cluster::{build_block_tree, build_cluster_tree};
use crate::config::{median, RunConfig};
use crate::dense::{norm2, DenseSymMatrix};
use crate::error::{Error, ErrorClass, Result};
use crate::h2::{H2Matrix, H2Stats, TreeOrder};
use crate::kernels::{assemble_dense_capped, Kernel};
use crate::oracle::{apply_spectral_fn, apply_spectral_fn_vec, dense_sqrt, spectral_bounds, sym_eig, SpectralBounds};
use crate::pointset::{generate_lowdiscrepancy, PointSet};
use crate::rng::draw_normal;
use crate::sampler::{FieldSampler, Method};
use crate::sqrt_iter::{
    choose_scaling, estimate_lambda_max, estimate_lambda_min, krylov_basis, sqrt_apply_schulz,
    KrylovOptions, ScalingPolicy,
};

pub fn build_h2(kernel: &Kernel, ps: &PointSet, c_leaf: usize, eta: f64, p: usize) -> Result<H2Matrix> {
    let tree = build_cluster_tree(ps, c_leaf)?;
    H2Matrix::assemble(kernel, ps, &build_block_tree(&tree, eta), p)
}

fn rel_diff(a: &[f64], b: &[f64], scale: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() / scale
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrobeniusRow {
    pub p: usize,
    pub abs_error: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MethodErrorRow {
    pub k: usize,
    /// `|C^{1/2} z - y| / |z|` against the exact kernel matrix.
    pub error_vs_c: f64,
    /// `|C_p^{1/2} z - y| / |z|` against the compressed matrix.
    pub error_vs_cp: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidateReport {
    pub n: usize,
    pub spectral_c: SpectralBounds,
    pub spectral_cp: SpectralBounds,
    pub frobenius: Vec<FrobeniusRow>,
    pub krylov: Vec<MethodErrorRow>,
    pub schulz: Vec<MethodErrorRow>,
    pub schulz_s: Option<f64>,
}

/// Accuracy table for the configured point set and kernel: `||C - C_p||_F`
/// for each order in `p_values`, spectral bounds of `C` and `C_p`, and the
/// error of both square-root methods on the stream-0 normal vector.
pub fn validate(
    cfg: &RunConfig,
    p_values: &[usize],
    krylov_ks: &[usize],
    schulz_ks: &[usize],
) -> Result<ValidateReport> {
    let ps = cfg.point_set()?;
    let kernel = cfg.kernel(ps.dim())?;
    let n = ps.len();
    let c = assemble_dense_capped(&kernel, &ps, cfg.dense_cap)?;
    let c_norm = c.frobenius();
    let frobenius = p_values
        .iter()
        .map(|&p| {
            let h = build_h2(&kernel, &ps, cfg.c_leaf, cfg.eta, p)?;
            let abs_error = h.frobenius_error(&c)?;
            Ok(FrobeniusRow {
                p,
                abs_error,
                rel_error: abs_error / c_norm,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let h = build_h2(&kernel, &ps, cfg.c_leaf, cfg.eta, cfg.p)?;
    let cp = h.to_dense(cfg.dense_cap)?;
    let z = draw_normal(cfg.seed, 0, n);
    let zn = norm2(&z);
    // references are the PSD projections: kernels such as the Gaussian are
    // numerically indefinite at the level of rounding
    let (ref_c, ref_cp) = if krylov_ks.is_empty() && schulz_ks.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        (psd_sqrt(&c)?.matvec(&z), psd_sqrt(&cp)?.matvec(&z))
    };
    // a step that fails numerically (e.g. an indefinite projected matrix)
    // is reported as NaN so the remaining rows are still produced
    let row = |k: usize, y: Result<Vec<f64>>| match y {
        Ok(y) => Ok(MethodErrorRow {
            k,
            error_vs_c: rel_diff(&y, &ref_c, zn),
            error_vs_cp: rel_diff(&y, &ref_cp, zn),
        }),
        Err(e) if e.class() == ErrorClass::Numerical => {
            log::warn!("k = {k}: {e}");
            Ok(MethodErrorRow {
                k,
                error_vs_c: f64::NAN,
                error_vs_cp: f64::NAN,
            })
        }
        Err(e) => Err(e),
    };

    let k_top = krylov_ks.iter().copied().max().unwrap_or(0);
    let mut krylov = Vec::new();
    if k_top > 0 {
        let basis = krylov_basis(&cp, &z, k_top, cfg.breakdown_tol, |_| Ok(false))?;
        for &k in krylov_ks {
            let j = k.min(basis.len()).max(1);
            krylov.push(row(k, basis.iterate(j, &z))?);
        }
    }

    let mut schulz = Vec::new();
    let mut schulz_s = None;
    if !schulz_ks.is_empty() {
        let mut est = estimate_lambda_max(&cp, 500, cfg.seed)?;
        if cfg.scaling == ScalingPolicy::Optimal {
            est = estimate_lambda_min(&cp, est, 500, cfg.seed)?;
        }
        let s = choose_scaling(&est, cfg.scaling)?.s;
        schulz_s = Some(s);
        for &k in schulz_ks {
            schulz.push(row(k, sqrt_apply_schulz(&cp, &z, k, s).map(|o| o.y))?);
        }
    }

    Ok(ValidateReport {
        n,
        spectral_c: spectral_bounds(&c)?,
        spectral_cp: spectral_bounds(&cp)?,
        frobenius,
        krylov,
        schulz,
        schulz_s,
    })
}

fn psd_sqrt(m: &DenseSymMatrix) -> Result<DenseSymMatrix> {
    Ok(apply_spectral_fn(&sym_eig(m)?, |l| l.max(0.0).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KrylovCalibration {
    pub n: usize,
    pub k: usize,
    pub error: f64,
    pub reached: bool,
}

/// Smallest Krylov dimension whose result is within `target` (relative to
/// `|z|`) of `C_p^{1/2} z`, found by bisection on the monotone error curve.
pub fn calibrate_krylov(h: &H2Matrix, z: &[f64], k_max: usize, target: f64, dense_cap: usize) -> Result<KrylovCalibration> {
    let cp = h.to_dense(dense_cap)?;
    let exact = dense_sqrt(&cp)?.matvec(z);
    let zn = norm2(z);
    let basis = krylov_basis(&cp, z, k_max, 1e-12, |_| Ok(false))?;
    let err = |j: usize| basis.iterate(j, z).map(|y| rel_diff(&y, &exact, zn));
    let top = basis.len();
    let top_err = err(top)?;
    if top_err > target {
        return Ok(KrylovCalibration {
            n: h.n(),
            k: top,
            error: top_err,
            reached: false,
        });
    }
    let (mut lo, mut hi) = (0usize, top);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if err(mid)? <= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(KrylovCalibration {
        n: h.n(),
        k: hi,
        error: err(hi)?,
        reached: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub assembly_seconds: f64,
    pub matvec_seconds: f64,
    pub krylov_k: usize,
    pub krylov_sample_seconds: f64,
    pub schulz_sample_seconds: Option<f64>,
    pub dense_sqrt_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub sizes: Vec<usize>,
    pub trials: usize,
    /// Accuracy target used to calibrate the Krylov dimension at the
    /// smallest size.
    pub target: f64,
    pub include_schulz: bool,
    /// Largest `N` for the dense baseline.
    pub dense_max: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub calibration: KrylovCalibration,
    pub trials: usize,
    pub rows: Vec<BenchRow>,
    pub krylov_slope: Option<f64>,
    pub dense_slope: Option<f64>,
}

/// The first `n` points of the unscrambled 2D (or `dim`-D) Sobol sequence.
pub fn sobol_prefix(n: usize, dim: usize) -> Result<PointSet> {
    let m = (n.max(1) as f64).log2().ceil() as u32;
    let full = generate_lowdiscrepancy(m, dim)?;
    PointSet::new(dim, full.coords()[..n * dim].to_vec())
}

fn time_trials(trials: usize, mut f: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    (0..trials.max(1))
        .map(|_| {
            let t0 = Instant::now();
            f()?;
            Ok(t0.elapsed().as_secs_f64())
        })
        .collect()
}

/// Timing sweep over `opts.sizes` on Sobol point sets. The Krylov dimension
/// is calibrated once at the smallest size and held fixed. All times are
/// medians over `opts.trials` runs.
pub fn bench(cfg: &RunConfig, opts: &BenchOptions) -> Result<BenchReport> {
    let mut sizes = opts.sizes.clone();
    sizes.sort_unstable();
    let Some(&n0) = sizes.first() else {
        return Err(Error::Config("bench needs at least one size".into()));
    };
    let dim = match cfg.points {
        crate::config::PointSource::LowDiscrepancy { dim, .. } => dim,
        _ => 2,
    };
    let base_ps = sobol_prefix(n0, dim)?;
    let kernel = cfg.kernel(dim)?;
    let base_h = build_h2(&kernel, &base_ps, cfg.c_leaf, cfg.eta, cfg.p)?;
    let z0 = draw_normal(cfg.seed, 0, n0);
    let zt0 = base_h.tree().to_tree_order(&z0);
    let calibration = calibrate_krylov(&base_h, &zt0, cfg.kmax, opts.target, cfg.dense_cap)?;
    if !calibration.reached {
        log::warn!(
            "Krylov target {:e} not reached within k = {} (error {:e}); timing with k = {}",
            opts.target,
            calibration.k,
            calibration.error,
            calibration.k
        );
    }

    // setup per size: assembly timings, samplers and one fixed input vector
    struct Case {
        n: usize,
        assembly: Vec<f64>,
        krylov: FieldSampler,
        schulz: Option<FieldSampler>,
        z: Vec<f64>,
    }
    let mut cases = Vec::with_capacity(sizes.len());
    for &n in &sizes {
        let ps = sobol_prefix(n, dim)?;
        let mut assembly = Vec::new();
        for _ in 0..opts.trials.max(1) {
            let t0 = Instant::now();
            std::hint::black_box(build_h2(&kernel, &ps, cfg.c_leaf, cfg.eta, cfg.p)?);
            assembly.push(t0.elapsed().as_secs_f64());
        }
        let sampler = |method: Method| -> Result<FieldSampler> {
            let mut c = cfg.clone();
            c.samples = 1;
            let mut sc = c.sample_config()?;
            sc.points = ps.clone();
            sc.method = method;
            FieldSampler::new(sc)
        };
        let krylov = sampler(Method::Krylov(KrylovOptions {
            k_max: calibration.k,
            breakdown_tol: cfg.breakdown_tol,
            ..KrylovOptions::default()
        }))?;
        let schulz = if opts.include_schulz {
            Some(sampler(Method::schulz(cfg.schulz_k, cfg.scaling))?)
        } else {
            None
        };
        let z = krylov.h2.tree().to_tree_order(&draw_normal(cfg.seed, 0, n));
        cases.push(Case {
            n,
            assembly,
            krylov,
            schulz,
            z,
        });
    }

    // timed phases run round-robin over the sizes so that slow periods of a
    // shared machine are spread over all of them
    let trials = opts.trials.max(1);
    let mut matvec = vec![Vec::new(); cases.len()];
    let mut krylov = vec![Vec::new(); cases.len()];
    let mut schulz = vec![Vec::new(); cases.len()];
    for t in 0..trials {
        for (i, case) in cases.iter().enumerate() {
            let op = TreeOrder(&case.krylov.h2);
            let mut out = vec![0.0; case.n];
            matvec[i].extend(time_trials(1, || {
                crate::linop::LinearOperator::apply(&op, &case.z, &mut out);
                Ok(())
            })?);
            krylov[i].extend(time_trials(1, || case.krylov.sample(t + 1).map(|_| ()))?);
            if let Some(s) = &case.schulz {
                schulz[i].extend(time_trials(1, || s.sample(t + 1).map(|_| ()))?);
            }
        }
    }

    let mut rows = Vec::new();
    for (i, case) in cases.iter().enumerate() {
        let n = case.n;
        let dense = if n <= opts.dense_max.min(cfg.dense_cap) {
            let c = assemble_dense_capped(&kernel, &sobol_prefix(n, dim)?, cfg.dense_cap)?;
            let z = draw_normal(cfg.seed, 0, n);
            // eigendecomposition plus application to one vector; forming
            // C^{1/2} itself is not needed for a sample
            Some(median(&time_trials(trials, || {
                let eig = sym_eig(&c)?;
                std::hint::black_box(apply_spectral_fn_vec(&eig, |l| l.max(0.0).sqrt(), &z));
                Ok(())
            })?))
        } else {
            None
        };
        let row = BenchRow {
            n,
            assembly_seconds: median(&case.assembly),
            matvec_seconds: median(&matvec[i]),
            krylov_k: calibration.k,
            krylov_sample_seconds: median(&krylov[i]),
            schulz_sample_seconds: case.schulz.as_ref().map(|_| median(&schulz[i])),
            dense_sqrt_seconds: dense,
        };
        log::info!("bench {row:?}");
        rows.push(row);
    }
    let pts = |f: &dyn Fn(&BenchRow) -> Option<f64>| -> Vec<(f64, f64)> {
        rows.iter().filter_map(|r| f(r).map(|t| (r.n as f64, t))).collect()
    };
    let krylov_pts = pts(&|r| Some(r.krylov_sample_seconds));
    let dense_pts = pts(&|r| r.dense_sqrt_seconds);
    Ok(BenchReport {
        calibration,
        trials: opts.trials.max(1),
        krylov_slope: (krylov_pts.len() >= 2).then(|| loglog_slope(&krylov_pts)),
        dense_slope: (dense_pts.len() >= 2).then(|| loglog_slope(&dense_pts)),
        rows,
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Serialize)]
pub struct StatsReport {
    pub h2: H2Stats,
    pub storage_per_point: f64,
    pub leaves: usize,
    pub assembly_seconds: f64,
}

pub fn stats(cfg: &RunConfig) -> Result<StatsReport> {
    let ps = cfg.point_set()?;
    let kernel = cfg.kernel(ps.dim())?;
    let t0 = Instant::now();
    let h = build_h2(&kernel, &ps, cfg.c_leaf, cfg.eta, cfg.p)?;
    let s = h.stats();
    Ok(StatsReport {
        storage_per_point: s.storage_entries as f64 / s.n as f64,
        leaves: h.tree().leaves().count(),
        h2: s,
        assembly_seconds: t0.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&x| (x, 3.0 * x * x)).collect();
        assert!((loglog_slope(&pts) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn validate_small_case() {
        let mut cfg = RunConfig::default();
        cfg.set("grid", "4x4").unwrap();
        let r = validate(&cfg, &[2, 3], &[1, 2, 4, 8, 16], &[2, 4]).unwrap();
        assert!(r.frobenius.iter().all(|f| f.abs_error == 0.0));
        for w in r.krylov.windows(2) {
            assert!(w[1].error_vs_cp <= w[0].error_vs_cp + 1e-12);
        }
        assert!(r.krylov.last().unwrap().error_vs_cp < 1e-12);
    }

    #[test]
    fn validate_gaussian_decreasing() {
        let mut cfg = RunConfig::default();
        cfg.set("grid", "16x16").unwrap();
        cfg.set("mu", "inf").unwrap();
        let r = validate(&cfg, &[2, 3, 4, 5, 6], &[], &[]).unwrap();
        for w in r.frobenius.windows(2) {
            assert!(w[1].abs_error < w[0].abs_error);
        }
    }

    #[test]
    fn stats_single_leaf() {
        let mut cfg = RunConfig::default();
        cfg.set("grid", "3x3").unwrap();
        let s = stats(&cfg).unwrap();
        assert_eq!((s.h2.depth, s.h2.near_count, s.h2.far_count), (0, 1, 0));
    }

    #[test]
    fn stats_storage_grows_with_p() {
        let mut cfg = RunConfig::default();
        cfg.set("lowdisc", "12").unwrap();
        cfg.set("p", "3").unwrap();
        let a = stats(&cfg).unwrap();
        cfg.set("p", "4").unwrap();
        let b = stats(&cfg).unwrap();
        // far-field part scales like rank^2 = p^{2d}; near field is unchanged
        let ratio = b.h2.storage_entries as f64 / a.h2.storage_entries as f64;
        assert!(ratio > 1.0 && ratio < (4.0f64 / 3.0).powi(4) * 1.05, "{ratio}");
    }

    #[test]
    fn bench_single_size_one_row() {
        let mut cfg = RunConfig::default();
        cfg.set("p", "3").unwrap();
        let r = bench(
            &cfg,
            &BenchOptions {
                sizes: vec![256],
                trials: 3,
                target: 1e-6,
                include_schulz: true,
                dense_max: 256,
            },
        )
        .unwrap();
        assert_eq!(r.rows.len(), 1);
        assert!(r.calibration.reached);
        assert!(r.rows[0].dense_sqrt_seconds.is_some() && r.rows[0].schulz_sample_seconds.is_some());
    }
}
