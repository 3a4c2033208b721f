//! Flat `key = value` run configuration and run manifests.
//!
//! Values are layered: defaults, then a config file, then explicit
//! overrides. A JSON manifest written by a previous run is also accepted as a
//! config file; its `config` object is read back verbatim.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::cluster::{DEFAULT_C_LEAF, DEFAULT_ETA};
use crate::error::{Error, Result};
use crate::kernels::{Kernel, MaternParams, DEFAULT_DENSE_CAP};
use crate::pointset::{generate_grid_axes, generate_lowdiscrepancy, load_points, BBox, PointSet, DEFAULT_MAX_POINTS};
use crate::sampler::{Method, SampleConfig};
use crate::sqrt_iter::{KrylovOptions, ScalingPolicy, DEFAULT_BREAKDOWN_TOL, DEFAULT_K_MAX, DEFAULT_SCHULZ_K};

#[derive(Debug, Clone, PartialEq)]
pub enum PointSource {
    File(PathBuf),
    Grid(Vec<usize>),
    LowDiscrepancy { m: u32, dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelChoice {
    Matern,
    NonStationary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodChoice {
    Krylov,
    Schulz,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub points: PointSource,
    pub kernel: KernelChoice,
    pub sigma: f64,
    pub lambda: f64,
    pub mu: f64,
    pub pnorm: u32,
    pub p: usize,
    pub eta: f64,
    pub c_leaf: usize,
    pub method: MethodChoice,
    pub kmax: usize,
    pub breakdown_tol: f64,
    pub krylov_tol: Option<f64>,
    pub schulz_k: usize,
    pub scaling: ScalingPolicy,
    pub seed: u64,
    pub samples: usize,
    pub lognormal: bool,
    pub mean: f64,
    pub dense_cap: usize,
    pub max_points: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            points: PointSource::Grid(vec![32, 32]),
            kernel: KernelChoice::Matern,
            sigma: 1.0,
            lambda: 1.0,
            mu: 0.5,
            pnorm: 2,
            p: 4,
            eta: DEFAULT_ETA,
            c_leaf: DEFAULT_C_LEAF,
            method: MethodChoice::Krylov,
            kmax: DEFAULT_K_MAX,
            breakdown_tol: DEFAULT_BREAKDOWN_TOL,
            krylov_tol: None,
            schulz_k: DEFAULT_SCHULZ_K,
            scaling: ScalingPolicy::Safe,
            seed: 0,
            samples: 1,
            lognormal: false,
            mean: 0.0,
            dense_cap: DEFAULT_DENSE_CAP,
            max_points: DEFAULT_MAX_POINTS,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = '{value}'")))
}

fn parse_grid(value: &str) -> Result<Vec<usize>> {
    let axes: Vec<usize> = value
        .split(['x', 'X'])
        .map(|s| parse_num("grid", s))
        .collect::<Result<_>>()?;
    if axes.is_empty() || axes.contains(&0) {
        return Err(Error::Config(format!("invalid grid '{value}', expected e.g. 32x32")));
    }
    Ok(axes)
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    match value.trim() {
        "inf" | "infinity" | "Inf" => Ok(f64::INFINITY),
        v => parse_num(key, v),
    }
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim().replace('-', "_").as_str() {
            "points" => self.points = PointSource::File(PathBuf::from(v)),
            "grid" => self.points = PointSource::Grid(parse_grid(v)?),
            "lowdisc" => {
                let dim = match &self.points {
                    PointSource::LowDiscrepancy { dim, .. } => *dim,
                    _ => 2,
                };
                self.points = PointSource::LowDiscrepancy {
                    m: parse_num("lowdisc", v)?,
                    dim,
                };
            }
            "lowdisc_dim" => {
                let d = parse_num("lowdisc_dim", v)?;
                match &mut self.points {
                    PointSource::LowDiscrepancy { dim, .. } => *dim = d,
                    _ => self.points = PointSource::LowDiscrepancy { m: 10, dim: d },
                }
            }
            "kernel" => {
                self.kernel = match v {
                    "matern" => KernelChoice::Matern,
                    "nonstationary" | "anisotropic" => KernelChoice::NonStationary,
                    _ => {
                        return Err(Error::Config(format!(
                            "unknown kernel '{v}' (matern|nonstationary)"
                        )))
                    }
                }
            }
            "sigma" => self.sigma = parse_f64("sigma", v)?,
            "lambda" => self.lambda = parse_f64("lambda", v)?,
            "mu" => self.mu = parse_f64("mu", v)?,
            "pnorm" => self.pnorm = parse_num("pnorm", v)?,
            "p" | "order" => self.p = parse_num("p", v)?,
            "eta" => self.eta = parse_f64("eta", v)?,
            "c_leaf" | "cleaf" => self.c_leaf = parse_num("c_leaf", v)?,
            "method" => {
                self.method = match v {
                    "krylov" => MethodChoice::Krylov,
                    "schulz" => MethodChoice::Schulz,
                    _ => return Err(Error::Config(format!("unknown method '{v}' (krylov|schulz)"))),
                }
            }
            "kmax" | "k_max" => self.kmax = parse_num("kmax", v)?,
            "breakdown_tol" => self.breakdown_tol = parse_f64("breakdown_tol", v)?,
            "krylov_tol" => {
                self.krylov_tol = match v {
                    "none" | "" => None,
                    _ => Some(parse_f64("krylov_tol", v)?),
                }
            }
            "schulz_k" => self.schulz_k = parse_num("schulz_k", v)?,
            "scaling" => self.scaling = v.parse()?,
            "seed" => self.seed = parse_num("seed", v)?,
            "samples" => self.samples = parse_num("samples", v)?,
            "lognormal" => {
                self.lognormal = match v {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" => false,
                    _ => return Err(Error::Config(format!("cannot parse lognormal = '{v}'"))),
                }
            }
            "mean" => self.mean = parse_f64("mean", v)?,
            "dense_cap" => self.dense_cap = parse_num("dense_cap", v)?,
            "max_points" => self.max_points = parse_num("max_points", v)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        if text.trim_start().starts_with('{') {
            return self.apply_manifest(text);
        }
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                message: format!("expected key = value, got '{line}'"),
            })?;
            self.set(k, v).map_err(|e| Error::Parse {
                line: lineno + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    fn apply_manifest(&mut self, text: &str) -> Result<()> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON config: {e}")))?;
        let obj = value
            .get("config")
            .and_then(|c| c.as_object())
            .ok_or_else(|| Error::Config("JSON config needs a 'config' object".into()))?;
        // point source keys must be applied after lowdisc_dim to restore it
        let mut entries: Vec<_> = obj.iter().collect();
        entries.sort_by_key(|(k, _)| k.as_str() == "lowdisc");
        for (k, v) in entries {
            let s = match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            self.set(k, &s)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)?;
        self.apply_text(&text)
    }

    /// Resolved configuration as `key -> value`, readable by [`set`](Self::set).
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        match &self.points {
            PointSource::File(p) => put("points", p.display().to_string()),
            PointSource::Grid(g) => put(
                "grid",
                g.iter().map(|a| a.to_string()).collect::<Vec<_>>().join("x"),
            ),
            PointSource::LowDiscrepancy { m, dim } => {
                put("lowdisc", m.to_string());
                put("lowdisc_dim", dim.to_string());
            }
        }
        put(
            "kernel",
            match self.kernel {
                KernelChoice::Matern => "matern",
                KernelChoice::NonStationary => "nonstationary",
            }
            .into(),
        );
        put("sigma", format!("{:?}", self.sigma));
        put("lambda", format!("{:?}", self.lambda));
        put("mu", if self.mu.is_infinite() { "inf".into() } else { format!("{:?}", self.mu) });
        put("pnorm", self.pnorm.to_string());
        put("p", self.p.to_string());
        put("eta", format!("{:?}", self.eta));
        put("c_leaf", self.c_leaf.to_string());
        put(
            "method",
            match self.method {
                MethodChoice::Krylov => "krylov",
                MethodChoice::Schulz => "schulz",
            }
            .into(),
        );
        put("kmax", self.kmax.to_string());
        put("breakdown_tol", format!("{:?}", self.breakdown_tol));
        put(
            "krylov_tol",
            self.krylov_tol.map_or("none".into(), |t| format!("{t:?}")),
        );
        put("schulz_k", self.schulz_k.to_string());
        put(
            "scaling",
            match self.scaling {
                ScalingPolicy::Safe => "safe",
                ScalingPolicy::Optimal => "optimal",
            }
            .into(),
        );
        put("seed", self.seed.to_string());
        put("samples", self.samples.to_string());
        put("lognormal", self.lognormal.to_string());
        put("mean", format!("{:?}", self.mean));
        put("dense_cap", self.dense_cap.to_string());
        put("max_points", self.max_points.to_string());
        m
    }

    pub fn point_set(&self) -> Result<PointSet> {
        let ps = match &self.points {
            PointSource::File(p) => load_points(p)?,
            PointSource::Grid(axes) => generate_grid_axes(axes, &BBox::unit(axes.len()), self.max_points)?,
            PointSource::LowDiscrepancy { m, dim } => generate_lowdiscrepancy(*m, *dim)?,
        };
        if ps.len() > self.max_points {
            return Err(Error::Size {
                what: "number of points",
                got: ps.len(),
                limit: self.max_points,
            });
        }
        Ok(ps)
    }

    pub fn kernel(&self, dim: usize) -> Result<Kernel> {
        match self.kernel {
            KernelChoice::Matern => Ok(Kernel::matern(MaternParams::new(
                self.sigma,
                self.lambda,
                self.mu,
                self.pnorm,
            )?)),
            KernelChoice::NonStationary => Kernel::example_nonstationary(self.sigma, dim),
        }
    }

    pub fn method(&self) -> Method {
        match self.method {
            MethodChoice::Krylov => Method::Krylov(KrylovOptions {
                k_max: self.kmax,
                breakdown_tol: self.breakdown_tol,
                tol: self.krylov_tol,
                ..KrylovOptions::default()
            }),
            MethodChoice::Schulz => Method::schulz(self.schulz_k, self.scaling),
        }
    }

    pub fn sample_config(&self) -> Result<SampleConfig> {
        let points = self.point_set()?;
        Ok(SampleConfig {
            kernel: self.kernel(points.dim())?,
            points,
            p: self.p,
            eta: self.eta,
            c_leaf: self.c_leaf,
            method: self.method(),
            seed: self.seed,
            n_samples: self.samples,
            lognormal: self.lognormal,
            mean: self.mean,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub median_seconds: f64,
    pub trials: usize,
}

/// Self-contained record of a run.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub timings: BTreeMap<String, Timing>,
    pub diagnostics: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            tool: "h2field",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config: cfg.to_kv(),
            timings: BTreeMap::new(),
            diagnostics: serde_json::Value::Null,
        }
    }

    pub fn time(&mut self, phase: &str, samples: &[f64]) {
        self.timings.insert(
            phase.to_string(),
            Timing {
                median_seconds: median(samples),
                trials: samples.len(),
            },
        );
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
