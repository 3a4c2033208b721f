use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn h2field(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_h2field"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn minimal_sample_has_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let o = h2field(
        &[
            "sample",
            "kernel=matern",
            "mu=0.5",
            "lambda=1",
            "sigma=1",
            "grid=32x32",
            "p=4",
            "method=krylov",
            "seed=7",
            "samples=3",
            "--out",
            "s.csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "x_1,x_2,sample_0,sample_1,sample_2");
    assert_eq!(lines.len(), 1 + 1024);
    for l in &lines[1..] {
        let vals: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals.len(), 5);
        assert!(vals.iter().all(|v| v.is_finite()));
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("s.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["grid"], "32x32");
    assert_eq!(manifest["timings"]["per_sample_apply"]["trials"], 3);
    assert_eq!(manifest["diagnostics"]["samples"].as_array().unwrap().len(), 3);
}

#[test]
fn manifest_rerun_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["sample", "--grid", "12x10", "--mu", "1.5", "--lambda", "0.3", "--seed", "11", "--samples", "2"];
    let first = h2field(&[&args[..], &["--out", "a.csv", "--threads", "1"]].concat(), dir.path());
    assert!(first.status.success(), "{}", stderr(&first));
    let second = h2field(
        &["sample", "--config", "a.csv.manifest.json", "--out", "b.csv", "--threads", "3"],
        dir.path(),
    );
    assert!(second.status.success(), "{}", stderr(&second));
    let a = fs::read(dir.path().join("a.csv")).unwrap();
    let b = fs::read(dir.path().join("b.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "# comment\ngrid = 5x5\nseed = 3\n").unwrap();
    let o = h2field(&["sample", "--config", "run.cfg", "--grid", "4x4", "--out", "s.csv"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read_to_string(dir.path().join("s.csv.manifest.json")).unwrap();
    let m: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(m["config"]["grid"], "4x4");
    assert_eq!(m["config"]["seed"], "3");
    assert_eq!(fs::read_to_string(dir.path().join("s.csv")).unwrap().lines().count(), 17);
}

#[test]
fn unsupported_mu_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = h2field(&["sample", "mu=0.7", "grid=4x4"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error:"), "{err}");
    assert!(err.contains("0.5, 1.5, 2.5, inf"), "{err}");
}

#[test]
fn duplicate_point_names_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("pts.txt"), "0.0 0.0\n0.5 0.5\n# repeated\n0.0 0.0\n").unwrap();
    let o = h2field(&["sample", "--points", "pts.txt"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error:") && err.contains("line 4") && err.contains("line 1"), "{err}");
}

#[test]
fn unknown_flag_and_bad_override_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["sample", "--bogus"][..], &["sample", "grid"], &["stats", "nokey=1"]] {
        let o = h2field(args, dir.path());
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
    }
}

#[test]
fn io_failure_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = h2field(&["sample", "--grid", "3x3", "--out", "missing/dir/s.csv"], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error:"));
    let o = h2field(&["sample", "--points", "absent.txt"], dir.path());
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn indefinite_compression_exit_2() {
    // Gaussian kernel at low order: C_p has negative eigenvalues far above
    // rounding, so the Krylov projection is indefinite
    let dir = tempfile::tempdir().unwrap();
    let o = h2field(&["sample", "--grid", "16x16", "--mu", "inf", "--p", "2"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.starts_with("error:") && err.contains("increase p"), "{err}");
}

#[test]
fn single_size_bench_emits_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let o = h2field(&["bench", "--sizes", "2^7", "--trials", "3", "--out", "b.csv"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("b.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("n,assembly_seconds,matvec_seconds"));
    assert!(lines[1].starts_with("128,"));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("b.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["diagnostics"]["trials_per_size"], 3);
}

#[test]
fn stats_single_leaf() {
    let dir = tempfile::tempdir().unwrap();
    let o = h2field(&["stats", "--grid", "4x4"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout).into_owned();
    for want in ["depth,0", "near_blocks,1", "far_blocks,0", "n,16", "leaves,1"] {
        assert!(out.lines().any(|l| l == want), "missing {want} in\n{out}");
    }
    assert!(stderr(&o).starts_with("manifest: {"));
}

#[test]
fn validate_small_case_reports_exact_compression() {
    let dir = tempfile::tempdir().unwrap();
    let o = h2field(
        &["validate", "--grid", "4x4", "--p-values", "2,3", "--krylov-ks", "1,4,16", "--schulz-ks", "2"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(out.contains("\n2,0.000000e0,0.000000e0\n"), "{out}");
    assert!(out.contains("\nkrylov,16,"));
    assert!(out.contains("\nschulz,2,"));
}
