use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const FREE_1D_MODEL: &str = r#"
[model]
dim = 1
points_per_cell = 1
omega_max = 0.0
disorder = { kind = "uniform" }
align_edge = false
v0 = { kind = "zero" }
u = { kind = "indicator", height = 1.0, side = 1.0 }
"#;

const ANDERSON_1D_MODEL: &str = r#"
[model]
dim = 1
points_per_cell = 1
omega_max = 2.0
disorder = { kind = "uniform" }
align_edge = true
v0 = { kind = "zero" }
u = { kind = "indicator", height = 1.0, side = 1.0 }
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lifshitz")).args(args).output().unwrap()
}

fn run_in(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut a = vec![sub, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    a.extend_from_slice(extra);
    run(&a)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_dirs(out: &Path) -> Vec<PathBuf> {
    match fs::read_dir(out) {
        Ok(rd) => {
            let mut v: Vec<PathBuf> = rd.map(|e| e.unwrap().path()).collect();
            v.sort();
            v
        }
        Err(_) => Vec::new(),
    }
}

fn envelope(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("envelope.json")).unwrap()).unwrap()
}

#[test]
fn out_of_range_alpha_is_a_single_named_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.toml",
        &format!("{ANDERSON_1D_MODEL}\n[experiment]\nkind = \"gap-prob\"\nls = [9]\nalpha = 1.5\nboundary = {{ kind = \"periodic\" }}\n\n[execution]\nseed = 1\nsamples = 10\n"),
    );
    let out = tmp.path().join("runs");
    let o = run_in("gap-prob", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.lines().filter(|l| l.starts_with("validation error")).count(), 1, "{err}");
    assert!(err.contains("experiment.alpha"), "{err}");
    assert!(run_dirs(&out).is_empty());
}

#[test]
fn all_missing_model_fields_are_reported_together() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "partial.toml",
        "[model]\ndim = 1\n\n[experiment]\nkind = \"gap-prob\"\nls = [9]\nalpha = 0.25\nboundary = { kind = \"periodic\" }\n",
    );
    let o = run_in("gap-prob", &cfg, &tmp.path().join("runs"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for field in ["points_per_cell", "omega_max", "v0", "u"] {
        assert!(err.contains(field), "missing {field}: {err}");
    }
}

#[test]
fn unknown_keys_and_wrong_subcommand_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let typo = write_config(
        tmp.path(),
        "typo.toml",
        "[experiment]\nkind = \"msa-schedule\"\nl0 = 9\nm0 = 1.0\nq0 = -2.0\nzeta = 1.5\nsteps = 3\nc1 = 0.0\nc2 = 0.0\nc3 = 1.0\nxi = 2.0\ndim = 1\nzetta = 1.2\n",
    );
    let o = run_in("msa-schedule", &typo, &tmp.path().join("runs"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("zetta"), "{}", stderr(&o));

    let ok = fs::read_to_string("../../configs/msa_schedule.toml").unwrap();
    let cfg = write_config(tmp.path(), "msa.toml", &ok);
    let o = run_in("gap-prob", &cfg, &tmp.path().join("runs"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("experiment.kind"));
}

#[test]
fn validate_only_echoes_resolved_config_without_running() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("runs");
    let o = run_in("ct-decay", Path::new("../../configs/ct_decay_free_1d.toml"), &out, &["--validate-only"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("config valid"));
    assert!(text.contains("z_re = -1.0"));
    assert!(run_dirs(&out).is_empty());
}

#[test]
fn numerical_failure_leaves_failed_marker() {
    // the middle Dirichlet eigenvalue of a 5-site chain is exactly 2
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "on_spectrum.toml",
        &format!("{FREE_1D_MODEL}\n[experiment]\nkind = \"ct-decay\"\ncells = 5\nz_re = 2.0\nz_im = 0.0\nmax_distance = 2\nboundary = {{ kind = \"dirichlet\" }}\n"),
    );
    let out = tmp.path().join("runs");
    let o = run_in("ct-decay", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let dirs = run_dirs(&out);
    assert_eq!(dirs.len(), 1);
    assert!(dirs[0].join("FAILED").exists());
    assert!(!dirs[0].join("INCOMPLETE").exists());
    assert!(!dirs[0].join("envelope.json").exists());
}

#[test]
fn failed_check_exits_four() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "hs_strict.toml",
        "[experiment]\nkind = \"hs-check\"\nmatrices = 2\nmatrix_dim = 4\nplateau_energy = 1.0\nplateau_order = 4\ntolerance = 1e-15\n\n[execution]\nseed = 0\n",
    );
    let out = tmp.path().join("runs");
    let o = run_in("hs-check", &cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let dir = &run_dirs(&out)[0];
    assert!(dir.join("FAILED").exists());
    assert_eq!(envelope(dir)["check_passed"], Value::Bool(false));
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "gap.toml",
        &format!("{ANDERSON_1D_MODEL}\n[experiment]\nkind = \"gap-prob\"\nls = [9, 27]\nalpha = 0.25\nboundary = {{ kind = \"periodic\" }}\n\n[execution]\nseed = 3\nsamples = 40\n"),
    );
    let mut hashes = Vec::new();
    for t in ["1", "8"] {
        let out = tmp.path().join(format!("runs{t}"));
        let o = run_in("gap-prob", &cfg, &out, &["--threads", t]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let env = envelope(&run_dirs(&out)[0]);
        assert_eq!(env["threads"].as_u64(), Some(t.parse().unwrap()));
        hashes.push((env["config_hash"].clone(), env["payload_hash"].clone()));
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn seed_override_changes_config_hash() {
    let tmp = TempDir::new().unwrap();
    let cfg = Path::new("../../configs/msa_schedule.toml");
    let a = run_in("msa-schedule", cfg, &tmp.path().join("a"), &["--seed", "1"]);
    let b = run_in("msa-schedule", cfg, &tmp.path().join("b"), &["--seed", "2"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(b.status.code(), Some(0));
    let ha = envelope(&run_dirs(&tmp.path().join("a"))[0])["config_hash"].clone();
    let hb = envelope(&run_dirs(&tmp.path().join("b"))[0])["config_hash"].clone();
    assert_ne!(ha, hb);
}

#[test]
fn free_band_csv_is_the_cosine_dispersion() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("runs");
    let o = run_in("bandstructure", Path::new("../../configs/bandstructure_free_1d.toml"), &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let dir = &run_dirs(&out)[0];
    let csv = fs::read_to_string(dir.join("bands.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("theta_1,n,energy"));
    let mut rows = 0;
    for line in lines {
        let f: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        assert!((f[2] - (2.0 - 2.0 * f[0].cos())).abs() < 1e-12, "{line}");
        rows += 1;
    }
    assert_eq!(rows, 64);
    assert!(dir.join("config.resolved.toml").exists());
    assert!(!dir.join("INCOMPLETE").exists());
    let env = envelope(dir);
    let listed: Vec<&str> = env["payload"].as_array().unwrap().iter().map(|e| e["file"].as_str().unwrap()).collect();
    assert_eq!(listed, ["bands.csv", "bands.json"]);
}
