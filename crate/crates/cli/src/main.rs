//! `h2field` command-line front end.
//!
//! Settings are layered as defaults, then `--config` (flat `key = value` text
//! or a JSON manifest from an earlier run), then flags, then trailing
//! `key=value` arguments. Exit status: 0 success, 1 configuration error,
//! 2 numerical failure, 3 I/O error. Failures print one `error: ...` line on
//! stderr.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use h2field::config::{RunConfig, RunManifest};
use h2field::error::{Error, ErrorClass, Result};
use h2field::experiments::{self, BenchOptions};
use h2field::sampler::{with_advice, write_samples_csv, FieldSampler};
use serde_json::json;

#[derive(Parser)]
#[command(name = "h2field", version, about = "Gaussian random field sampling with H2-matrices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw samples and write them as CSV.
    Sample(Common),
    /// Compare the compressed matrix and both square-root methods with dense references.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Interpolation orders for the Frobenius table.
        #[arg(long, value_delimiter = ',', default_value = "2,3,4,5,6")]
        p_values: Vec<usize>,
        /// Krylov dimensions to report.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64,128")]
        krylov_ks: Vec<usize>,
        /// Schulz step counts to report.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8")]
        schulz_ks: Vec<usize>,
    },
    /// Time assembly, matvec and per-sample cost over a list of sizes.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Point counts, e.g. `1024,2048` or `2^10,2^11`.
        #[arg(long, value_delimiter = ',', default_value = "1024")]
        sizes: Vec<String>,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        /// Krylov accuracy target used to fix `k` at the smallest size.
        #[arg(long, default_value_t = 1e-8)]
        target: f64,
        /// Also time the Schulz method.
        #[arg(long)]
        with_schulz: bool,
        /// Largest size that gets a dense square-root baseline.
        #[arg(long, default_value_t = 4096)]
        dense_max: usize,
    },
    /// Print cluster-tree and storage statistics.
    Stats(Common),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Point file, one point per line.
    #[arg(long)]
    points: Option<String>,
    /// Tensor grid on the unit box, e.g. `32x32`.
    #[arg(long)]
    grid: Option<String>,
    /// Sobol set with `2^m` points.
    #[arg(long)]
    lowdisc: Option<String>,
    #[arg(long)]
    lowdisc_dim: Option<String>,
    /// `matern` or `nonstationary`.
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    /// Matern smoothness: 0.5, 1.5, 2.5 or inf.
    #[arg(long)]
    mu: Option<String>,
    #[arg(long)]
    pnorm: Option<String>,
    /// Chebyshev nodes per axis.
    #[arg(long)]
    p: Option<String>,
    #[arg(long)]
    eta: Option<String>,
    #[arg(long)]
    cleaf: Option<String>,
    /// `krylov` or `schulz`.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    kmax: Option<String>,
    #[arg(long)]
    schulz_k: Option<String>,
    /// `safe` or `optimal`.
    #[arg(long)]
    scaling: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    samples: Option<String>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Manifest file; defaults to `<out>.manifest.json`, or a `manifest:` line
    /// on stderr when writing to stdout.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings, applied last.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn flags(&self) -> Vec<(&'static str, &String)> {
        [
            ("points", &self.points),
            ("grid", &self.grid),
            ("lowdisc", &self.lowdisc),
            ("lowdisc_dim", &self.lowdisc_dim),
            ("kernel", &self.kernel),
            ("sigma", &self.sigma),
            ("lambda", &self.lambda),
            ("mu", &self.mu),
            ("pnorm", &self.pnorm),
            ("p", &self.p),
            ("eta", &self.eta),
            ("c_leaf", &self.cleaf),
            ("method", &self.method),
            ("kmax", &self.kmax),
            ("schulz_k", &self.schulz_k),
            ("scaling", &self.scaling),
            ("seed", &self.seed),
            ("samples", &self.samples),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (k, v)))
        .collect()
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for (k, v) in self.flags() {
            cfg.set(k, v)?;
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got '{kv}'")))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

/// Primary output plus manifest destination.
struct Sink {
    out: Option<PathBuf>,
    manifest: Option<PathBuf>,
}

impl Sink {
    fn new(common: &Common) -> Self {
        let manifest = common.manifest.clone().or_else(|| {
            common.out.as_ref().map(|o| {
                let mut s = o.clone().into_os_string();
                s.push(".manifest.json");
                PathBuf::from(s)
            })
        });
        Self {
            out: common.out.clone(),
            manifest,
        }
    }

    fn write(&self, body: &[u8]) -> Result<()> {
        match &self.out {
            Some(path) => write_file(path, body),
            None => {
                let mut stdout = io::stdout().lock();
                stdout.write_all(body)?;
                stdout.flush()?;
                Ok(())
            }
        }
    }

    fn write_manifest(&self, manifest: &RunManifest) -> Result<()> {
        let text = manifest.to_json();
        match &self.manifest {
            Some(path) => write_file(path, text.as_bytes()),
            None => {
                let compact: serde_json::Value = serde_json::from_str(&text).expect("manifest is JSON");
                eprintln!("manifest: {compact}");
                Ok(())
            }
        }
    }
}

fn write_file(path: &Path, body: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(body)?;
    w.flush()?;
    Ok(())
}

fn set_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot configure thread pool: {e}")))?;
    }
    Ok(())
}

fn cmd_sample(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let sink = Sink::new(common);
    let mut manifest = RunManifest::new("sample", &cfg);
    let sc = cfg.sample_config()?;
    let points = sc.points.clone();
    let n_samples = sc.n_samples;
    let sampler = FieldSampler::new(sc).map_err(with_advice)?;
    manifest.time("assembly", &[sampler.assembly_seconds]);

    let mut samples = Vec::with_capacity(n_samples);
    let mut apply = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let t0 = Instant::now();
        samples.push(sampler.sample(i).map_err(with_advice)?);
        apply.push(t0.elapsed().as_secs_f64());
    }
    manifest.time("per_sample_apply", &apply);

    let mut csv = Vec::new();
    write_samples_csv(&mut csv, &points, &samples)?;
    sink.write(&csv)?;

    manifest.diagnostics = json!({
        "h2": sampler.h2.stats(),
        "scaling": sampler.scaling,
        "samples": samples.iter().map(|s| &s.diagnostics).collect::<Vec<_>>(),
    });
    sink.write_manifest(&manifest)
}

fn cmd_validate(common: &Common, p_values: &[usize], krylov_ks: &[usize], schulz_ks: &[usize]) -> Result<()> {
    let cfg = common.resolve()?;
    let sink = Sink::new(common);
    let mut manifest = RunManifest::new("validate", &cfg);
    let t0 = Instant::now();
    let r = experiments::validate(&cfg, p_values, krylov_ks, schulz_ks).map_err(with_advice)?;
    manifest.time("validate", &[t0.elapsed().as_secs_f64()]);

    let mut s = String::new();
    s.push_str("matrix,lambda_min,lambda_max,cond\n");
    for (name, b) in [("C", &r.spectral_c), ("C_p", &r.spectral_cp)] {
        s.push_str(&format!("{name},{:.6e},{:.6e},{:.6e}\n", b.lambda_min, b.lambda_max, b.cond));
    }
    s.push_str("\np,frobenius_abs,frobenius_rel\n");
    for f in &r.frobenius {
        s.push_str(&format!("{},{:.6e},{:.6e}\n", f.p, f.abs_error, f.rel_error));
    }
    for (name, rows) in [("krylov", &r.krylov), ("schulz", &r.schulz)] {
        if rows.is_empty() {
            continue;
        }
        s.push_str("\nmethod,k,error_vs_c,error_vs_cp\n");
        for row in rows {
            s.push_str(&format!("{name},{},{:.6e},{:.6e}\n", row.k, row.error_vs_c, row.error_vs_cp));
        }
    }
    sink.write(s.as_bytes())?;

    manifest.diagnostics = json!({
        "n": r.n,
        "p_values": p_values,
        "krylov_ks": krylov_ks,
        "schulz_ks": schulz_ks,
        "schulz_s": r.schulz_s,
    });
    sink.write_manifest(&manifest)
}

/// `1024` or `2^10`.
fn parse_size(s: &str) -> Result<usize> {
    let s = s.trim();
    let bad = || Error::Config(format!("invalid size '{s}'"));
    match s.split_once('^') {
        Some((b, e)) => {
            let b: usize = b.parse().map_err(|_| bad())?;
            let e: u32 = e.parse().map_err(|_| bad())?;
            b.checked_pow(e).ok_or_else(bad)
        }
        None => s.parse().map_err(|_| bad()),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6e}")).unwrap_or_default()
}

fn cmd_bench(common: &Common, opts: BenchOptions) -> Result<()> {
    let cfg = common.resolve()?;
    let sink = Sink::new(common);
    let mut manifest = RunManifest::new("bench", &cfg);
    let r = experiments::bench(&cfg, &opts).map_err(with_advice)?;

    let mut s = String::from(
        "n,assembly_seconds,matvec_seconds,krylov_k,krylov_sample_seconds,schulz_sample_seconds,dense_sqrt_seconds\n",
    );
    for row in &r.rows {
        s.push_str(&format!(
            "{},{:.6e},{:.6e},{},{:.6e},{},{}\n",
            row.n,
            row.assembly_seconds,
            row.matvec_seconds,
            row.krylov_k,
            row.krylov_sample_seconds,
            opt(row.schulz_sample_seconds),
            opt(row.dense_sqrt_seconds),
        ));
    }
    sink.write(s.as_bytes())?;

    let col = |f: &dyn Fn(&experiments::BenchRow) -> Option<f64>| r.rows.iter().filter_map(f).collect::<Vec<_>>();
    manifest.time("assembly", &col(&|row| Some(row.assembly_seconds)));
    manifest.time("per_sample_apply", &col(&|row| Some(row.krylov_sample_seconds)));
    manifest.diagnostics = json!({
        "sizes": opts.sizes,
        "trials_per_size": r.trials,
        "target": opts.target,
        "calibration": r.calibration,
        "krylov_slope": r.krylov_slope,
        "dense_slope": r.dense_slope,
        "note": "per-size timings are medians over trials_per_size runs; timings above list one median per size",
    });
    sink.write_manifest(&manifest)
}

fn cmd_stats(common: &Common) -> Result<()> {
    let cfg = common.resolve()?;
    let sink = Sink::new(common);
    let mut manifest = RunManifest::new("stats", &cfg);
    let r = experiments::stats(&cfg)?;
    manifest.time("assembly", &[r.assembly_seconds]);
    let h = &r.h2;
    let rows: [(&str, String); 12] = [
        ("n", h.n.to_string()),
        ("p", h.p.to_string()),
        ("rank", h.rank.to_string()),
        ("depth", h.depth.to_string()),
        ("leaves", r.leaves.to_string()),
        ("c_sparse", h.c_sparse.to_string()),
        ("near_blocks", h.near_count.to_string()),
        ("far_blocks", h.far_count.to_string()),
        ("stored_near_blocks", h.stored_near_blocks.to_string()),
        ("stored_coupling_blocks", h.stored_coupling_blocks.to_string()),
        ("storage_entries", h.storage_entries.to_string()),
        ("storage_per_point", format!("{:.6}", r.storage_per_point)),
    ];
    let mut s = String::from("key,value\n");
    for (k, v) in rows {
        s.push_str(&format!("{k},{v}\n"));
    }
    sink.write(s.as_bytes())?;
    manifest.diagnostics = serde_json::to_value(&r).expect("stats serialise");
    sink.write_manifest(&manifest)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Sample(c) => {
            set_threads(c.threads)?;
            cmd_sample(&c)
        }
        Command::Validate {
            common,
            p_values,
            krylov_ks,
            schulz_ks,
        } => {
            set_threads(common.threads)?;
            cmd_validate(&common, &p_values, &krylov_ks, &schulz_ks)
        }
        Command::Bench {
            common,
            sizes,
            trials,
            target,
            with_schulz,
            dense_max,
        } => {
            set_threads(common.threads)?;
            let sizes = sizes.iter().map(|s| parse_size(s)).collect::<Result<Vec<_>>>()?;
            cmd_bench(
                &common,
                BenchOptions {
                    sizes,
                    trials,
                    target,
                    include_schulz: with_schulz,
                    dense_max,
                },
            )
        }
        Command::Stats(c) => {
            set_threads(c.threads)?;
            cmd_stats(&c)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 1,
        ErrorClass::Numerical => 2,
        ErrorClass::Io => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            // clap already prefixes its first line with "error:"
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
