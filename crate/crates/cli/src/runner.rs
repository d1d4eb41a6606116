//! Command-line front end: argument parsing, config resolution, output
//! directory management and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use lifshitz_core::hs::QuadratureScheme;
use lifshitz_core::ids::{DEFAULT_MASS_WINDOW, DEFAULT_THETA_RESOLUTION};
use lifshitz_core::probes::DEFAULT_EPS_PROBES;
use lifshitz_core::Error;

use crate::config::{self, Experiment, ExperimentConfig, ValidationError};
use crate::experiments::{execute, Payload};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_CHECK_FAILED: i32 = 4;

const MARKER_RUNNING: &str = "INCOMPLETE";
const MARKER_FAILED: &str = "FAILED";

#[derive(Debug, Parser)]
#[command(name = "lifshitz", version, about = "Experiments on random Schrödinger operators near band edges")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Master seed; overrides `execution.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parent directory for run outputs; overrides `execution.out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; overrides `execution.threads`.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Check the config and exit without computing.
    #[arg(long)]
    pub validate_only: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    Bandstructure(CommonArgs),
    Ids(CommonArgs),
    Lifshitz(CommonArgs),
    IdsDiff(CommonArgs),
    HsCheck(CommonArgs),
    CtDecay(CommonArgs),
    GapProb(CommonArgs),
    ThetaBounds(CommonArgs),
    MsaSchedule(CommonArgs),
    MRegularity(CommonArgs),
}

impl Command {
    fn parts(&self) -> (&'static str, &CommonArgs) {
        match self {
            Command::Bandstructure(a) => ("bandstructure", a),
            Command::Ids(a) => ("ids", a),
            Command::Lifshitz(a) => ("lifshitz", a),
            Command::IdsDiff(a) => ("ids-diff", a),
            Command::HsCheck(a) => ("hs-check", a),
            Command::CtDecay(a) => ("ct-decay", a),
            Command::GapProb(a) => ("gap-prob", a),
            Command::ThetaBounds(a) => ("theta-bounds", a),
            Command::MsaSchedule(a) => ("msa-schedule", a),
            Command::MRegularity(a) => ("m-regularity", a),
        }
    }
}

/// Outcome of a finished (or failed) run.
#[derive(Debug)]
pub struct RunReport {
    pub exit_code: i32,
    pub run_dir: Option<PathBuf>,
    pub messages: Vec<String>,
    pub payload: Option<Payload>,
}

impl RunReport {
    fn early(exit_code: i32, messages: Vec<String>) -> Self {
        RunReport {
            exit_code,
            run_dir: None,
            messages,
            payload: None,
        }
    }
}

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Numerical(_) | Error::NearSpectrum { .. } | Error::InsufficientData(_) => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

/// Fills every defaulted parameter so the echoed config is explicit.
pub fn resolve(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut r = cfg.clone();
    r.execution.threads = None;
    r.execution.out = None;
    match &mut r.experiment {
        Experiment::Bandstructure { gap_tolerance, .. } => {
            gap_tolerance.get_or_insert(1e-8);
        }
        Experiment::Ids { theta_resolution, .. }
        | Experiment::IdsDiff { theta_resolution, .. }
        | Experiment::ThetaBounds { theta_resolution, .. } => {
            theta_resolution.get_or_insert(DEFAULT_THETA_RESOLUTION);
        }
        Experiment::Lifshitz { edge, mass_window, .. } => {
            edge.get_or_insert(0.0);
            mass_window.get_or_insert([DEFAULT_MASS_WINDOW.0, DEFAULT_MASS_WINDOW.1]);
        }
        Experiment::HsCheck { scheme, dbar_grid, .. } => {
            scheme.get_or_insert(QuadratureScheme::GaussPanels);
            dbar_grid.get_or_insert(200);
        }
        Experiment::CtDecay { anchor, .. } => {
            anchor.get_or_insert([0, 0]);
        }
        Experiment::MRegularity { eps_probes, .. } => {
            eps_probes.get_or_insert(DEFAULT_EPS_PROBES.to_vec());
        }
        _ => {}
    }
    if let Experiment::IdsDiff { reference_samples, .. } = &mut r.experiment {
        reference_samples.get_or_insert(r.execution.samples.unwrap_or(2).max(2));
    }
    r
}

pub fn config_hash(resolved: &ExperimentConfig) -> String {
    let bytes = serde_json::to_vec(resolved).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}

pub fn payload_hash(p: &Payload) -> String {
    let mut h = Sha256::new();
    for (name, bytes) in &p.files {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    hex::encode(h.finalize())
}

fn fresh_dir(parent: &Path, stem: &str) -> std::io::Result<PathBuf> {
    fs::create_dir_all(parent)?;
    for k in 0.. {
        let name = if k == 0 { stem.to_string() } else { format!("{stem}-{k}") };
        let dir = parent.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
    unreachable!()
}

fn validation_messages(errors: &[ValidationError]) -> Vec<String> {
    errors.iter().map(|e| format!("validation error: {e}")).collect()
}

/// Runs one subcommand end to end.
pub fn run_command(command: &Command) -> RunReport {
    let (name, args) = command.parts();
    let mut cfg = match config::load(&args.config) {
        Ok(c) => c,
        Err(errors) => return RunReport::early(EXIT_VALIDATION, validation_messages(&errors)),
    };
    if let Some(s) = args.seed {
        cfg.execution.seed = Some(s);
    }
    if let Some(t) = args.threads {
        cfg.execution.threads = Some(t);
    }
    if let Some(o) = &args.out {
        cfg.execution.out = Some(o.clone());
    }
    let mut errors = Vec::new();
    if cfg.experiment.name() != name {
        errors.push(ValidationError {
            field: "experiment.kind".into(),
            message: format!("config describes `{}` but the subcommand is `{name}`", cfg.experiment.name()),
        });
    }
    errors.extend(config::validate(&cfg));
    if !errors.is_empty() {
        return RunReport::early(EXIT_VALIDATION, validation_messages(&errors));
    }
    let resolved = resolve(&cfg);
    let hash = config_hash(&resolved);
    if args.validate_only {
        let echo = toml::to_string(&resolved).unwrap_or_default();
        return RunReport::early(EXIT_OK, vec![format!("config valid (hash {hash})"), echo]);
    }
    let threads = cfg.execution.threads.unwrap_or(0);
    let parent = cfg.execution.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
    let dir = match fresh_dir(&parent, &format!("{}-{}-{stamp}", name, &hash[..12])) {
        Ok(d) => d,
        Err(e) => return RunReport::early(EXIT_NUMERICAL, vec![format!("cannot create output directory: {e}")]),
    };
    let marker = dir.join(MARKER_RUNNING);
    let write_failure = |msg: &str| {
        let _ = fs::write(dir.join(MARKER_FAILED), format!("{msg}\n"));
        let _ = fs::remove_file(&marker);
    };
    if let Err(e) = fs::write(&marker, "run in progress\n")
        .and_then(|_| fs::write(dir.join("config.resolved.toml"), toml::to_string(&resolved).unwrap_or_default()))
    {
        write_failure(&e.to_string());
        return RunReport::early(EXIT_NUMERICAL, vec![format!("cannot write outputs: {e}")]);
    }

    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            write_failure(&e.to_string());
            return RunReport::early(EXIT_NUMERICAL, vec![format!("cannot start worker pool: {e}")]);
        }
    };
    let started = Instant::now();
    let outcome = pool.install(|| execute(&resolved));
    let wall = started.elapsed().as_secs_f64();
    let payload = match outcome {
        Ok(p) => p,
        Err(e) => {
            let code = exit_code_for(&e);
            write_failure(&e.to_string());
            return RunReport {
                exit_code: code,
                run_dir: Some(dir),
                messages: vec![format!("{name} failed: {e}")],
                payload: None,
            };
        }
    };
    let mut listing = Vec::new();
    for (file, bytes) in &payload.files {
        if let Err(e) = fs::write(dir.join(file), bytes) {
            write_failure(&e.to_string());
            return RunReport::early(EXIT_NUMERICAL, vec![format!("cannot write {file}: {e}")]);
        }
        listing.push(json!({ "file": file, "sha256": hex::encode(Sha256::digest(bytes)) }));
    }
    let envelope = json!({
        "experiment": name,
        "config_hash": hash,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "timestamp": stamp,
        "wall_time_seconds": wall,
        "threads": pool.current_num_threads(),
        "payload": listing,
        "payload_hash": payload_hash(&payload),
        "summary": payload.summary,
        "check_passed": payload.check_passed,
    });
    let envelope = serde_json::to_string_pretty(&envelope).expect("envelope serializes");
    if let Err(e) = fs::write(dir.join("envelope.json"), envelope + "\n") {
        write_failure(&e.to_string());
        return RunReport::early(EXIT_NUMERICAL, vec![format!("cannot write envelope: {e}")]);
    }
    let code = if payload.check_passed == Some(false) {
        let _ = fs::write(dir.join(MARKER_FAILED), format!("check failed: {}\n", payload.summary));
        EXIT_CHECK_FAILED
    } else {
        EXIT_OK
    };
    let _ = fs::remove_file(&marker);
    RunReport {
        exit_code: code,
        messages: vec![format!("{} -> {}", payload.summary, dir.display())],
        run_dir: Some(dir),
        payload: Some(payload),
    }
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let report = run_command(&cli.command);
    for m in &report.messages {
        if report.exit_code == EXIT_OK {
            println!("{m}");
        } else {
            eprintln!("{m}");
        }
    }
    report.exit_code
}
