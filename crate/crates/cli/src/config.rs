//! Experiment configuration: TOML schema, range checks and the resolved model.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lifshitz_core::hs::{plateau_function, QuadratureScheme};
use lifshitz_core::lattice::{
    AndersonModel, DisorderLaw, DisorderModel, PeriodicPotential, SingleSitePotential,
};
use lifshitz_core::probes::align_edge;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Option<ModelConfig>,
    pub experiment: Experiment,
    #[serde(default)]
    pub execution: ExecutionConfig,
}

/// Model block. Every field is optional at parse time so that all missing
/// entries can be reported together.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: Option<usize>,
    pub points_per_cell: Option<usize>,
    pub omega_max: Option<f64>,
    pub disorder: Option<DisorderLawConfig>,
    /// Shift the lower band edge of `H0` to zero.
    pub align_edge: Option<bool>,
    pub v0: Option<V0Config>,
    pub u: Option<UConfig>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DisorderLawConfig {
    Uniform,
    Beta { a: f64, b: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum V0Config {
    Zero,
    /// `A Σ_i cos(2π x_i)`.
    Cosine { amplitude: f64 },
    /// Samples at the grid points of one cell, axis 0 fastest.
    Values { values: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UConfig {
    Indicator { height: f64, side: f64 },
    Exponential { amplitude: f64, rate: f64, radius: Option<usize> },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct ExecutionConfig {
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoxBoundary {
    Dirichlet,
    Periodic,
    Theta { theta: [f64; 2] },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GapBoundaryConfig {
    Periodic,
    Quasimomentum { theta: [f64; 2] },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum IdsMethod {
    Dirichlet,
    Periodic,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Experiment {
    Bandstructure {
        /// Zone index: bands of the period-`(2l+1)` problem over `B_l`.
        l: usize,
        resolution: usize,
        num_bands: usize,
        gap_tolerance: Option<f64>,
        lipschitz_window: Option<[f64; 2]>,
    },
    Ids {
        method: IdsMethod,
        half_width: usize,
        energy_min: f64,
        energy_max: f64,
        energy_points: usize,
        theta_resolution: Option<usize>,
    },
    Lifshitz {
        half_width: usize,
        energy_min: f64,
        energy_max: f64,
        energy_points: usize,
        edge: Option<f64>,
        mass_window: Option<[f64; 2]>,
    },
    IdsDiff {
        ls: Vec<usize>,
        plateau_energy: f64,
        plateau_order: usize,
        reference_half_width: usize,
        reference_samples: Option<usize>,
        theta_resolution: Option<usize>,
    },
    HsCheck {
        matrices: usize,
        matrix_dim: usize,
        plateau_energy: f64,
        plateau_order: usize,
        tolerance: f64,
        scheme: Option<QuadratureScheme>,
        dbar_grid: Option<usize>,
    },
    CtDecay {
        cells: usize,
        z_re: f64,
        z_im: f64,
        anchor: Option<[i64; 2]>,
        max_distance: usize,
        boundary: BoxBoundary,
    },
    GapProb {
        ls: Vec<usize>,
        alpha: f64,
        boundary: GapBoundaryConfig,
    },
    ThetaBounds {
        l: usize,
        energy_average: f64,
        energy_fixed: f64,
        theta0: [f64; 2],
        theta_resolution: Option<usize>,
        /// Lipschitz constant of the bands; estimated from `H0` when absent.
        xi: Option<f64>,
    },
    MsaSchedule {
        l0: u64,
        m0: f64,
        q0: f64,
        zeta: f64,
        steps: usize,
        c1: f64,
        c2: f64,
        c3: f64,
        xi: f64,
        dim: usize,
    },
    MRegularity {
        /// Box side in cells (odd); the box is the periodized torus.
        l: usize,
        energy: f64,
        delta: f64,
        mass: f64,
        eps_probes: Option<Vec<f64>>,
        /// Also report gap hits in `[0, l^{-α})` on the same samples.
        alpha: Option<f64>,
    },
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Bandstructure { .. } => "bandstructure",
            Experiment::Ids { .. } => "ids",
            Experiment::Lifshitz { .. } => "lifshitz",
            Experiment::IdsDiff { .. } => "ids-diff",
            Experiment::HsCheck { .. } => "hs-check",
            Experiment::CtDecay { .. } => "ct-decay",
            Experiment::GapProb { .. } => "gap-prob",
            Experiment::ThetaBounds { .. } => "theta-bounds",
            Experiment::MsaSchedule { .. } => "msa-schedule",
            Experiment::MRegularity { .. } => "m-regularity",
        }
    }

    pub fn needs_model(&self) -> bool {
        !matches!(self, Experiment::HsCheck { .. } | Experiment::MsaSchedule { .. })
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(
            self,
            Experiment::Ids { .. }
                | Experiment::Lifshitz { .. }
                | Experiment::IdsDiff { .. }
                | Experiment::HsCheck { .. }
                | Experiment::GapProb { .. }
                | Experiment::ThetaBounds { .. }
                | Experiment::MRegularity { .. }
        )
    }

    fn needs_samples(&self) -> bool {
        self.is_stochastic() && !matches!(self, Experiment::HsCheck { .. })
    }
}

/// One failed range or consistency check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Default)]
struct Checker {
    errors: Vec<ValidationError>,
}

impl Checker {
    fn fail(&mut self, field: &str, message: impl Into<String>) {
        self.errors.push(ValidationError {
            field: field.to_string(),
            message: message.into(),
        });
    }

    fn check(&mut self, ok: bool, field: &str, message: &str) {
        if !ok {
            self.fail(field, message);
        }
    }

    fn require<'a, T>(&mut self, v: &'a Option<T>, field: &str) -> Option<&'a T> {
        if v.is_none() {
            self.fail(field, "missing");
        }
        v.as_ref()
    }
}

pub fn load(path: &Path) -> Result<ExperimentConfig, Vec<ValidationError>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        vec![ValidationError {
            field: "config".into(),
            message: format!("cannot read {}: {e}", path.display()),
        }]
    })?;
    parse(&text)
}

pub fn parse(text: &str) -> Result<ExperimentConfig, Vec<ValidationError>> {
    toml::from_str(text).map_err(|e| {
        vec![ValidationError {
            field: "config".into(),
            message: e.to_string().trim().replace('\n', " "),
        }]
    })
}

fn positive(x: f64) -> bool {
    x > 0.0 && x.is_finite()
}

/// All range and consistency checks; no computation.
pub fn validate(cfg: &ExperimentConfig) -> Vec<ValidationError> {
    let mut c = Checker::default();
    let exp = &cfg.experiment;
    let mut model_dim = None;
    match (&cfg.model, exp.needs_model()) {
        (None, true) => c.fail("model", "missing"),
        (Some(m), _) => model_dim = validate_model(m, &mut c),
        _ => {}
    }
    if exp.is_stochastic() && cfg.execution.seed.is_none() {
        c.fail("execution.seed", "missing (set it in the config or pass --seed)");
    }
    if exp.needs_samples() {
        match cfg.execution.samples {
            None => c.fail("execution.samples", "missing"),
            Some(m) => c.check(m >= 1, "execution.samples", "must be >= 1"),
        }
    }
    if let Some(t) = cfg.execution.threads {
        c.check(t >= 1, "execution.threads", "must be >= 1");
    }
    validate_experiment(exp, model_dim, cfg.execution.samples, &mut c);
    c.errors
}

fn validate_model(m: &ModelConfig, c: &mut Checker) -> Option<usize> {
    let dim = c.require(&m.dim, "model.dim").copied();
    if let Some(d) = dim {
        c.check((1..=2).contains(&d), "model.dim", "must be 1 or 2");
    }
    let p = c.require(&m.points_per_cell, "model.points_per_cell").copied();
    if let Some(p) = p {
        c.check(p >= 1, "model.points_per_cell", "must be >= 1");
    }
    if let Some(w) = c.require(&m.omega_max, "model.omega_max") {
        c.check(*w >= 0.0 && w.is_finite(), "model.omega_max", "must be finite and >= 0");
    }
    if let Some(DisorderLawConfig::Beta { a, b }) = c.require(&m.disorder, "model.disorder") {
        c.check(*a >= 1.0 && *b >= 1.0, "model.disorder", "beta parameters must be >= 1");
    }
    c.require(&m.align_edge, "model.align_edge");
    match c.require(&m.v0, "model.v0") {
        Some(V0Config::Cosine { amplitude }) => c.check(amplitude.is_finite(), "model.v0.amplitude", "must be finite"),
        Some(V0Config::Values { values }) => {
            if let (Some(d), Some(p)) = (dim, p) {
                if (1..=2).contains(&d) {
                    c.check(
                        values.len() == p.pow(d as u32),
                        "model.v0.values",
                        "need points_per_cell^dim samples",
                    );
                }
            }
            c.check(values.iter().all(|v| v.is_finite()), "model.v0.values", "must be finite");
        }
        _ => {}
    }
    match c.require(&m.u, "model.u") {
        Some(UConfig::Indicator { height, side }) => {
            c.check(*height >= 0.0 && height.is_finite(), "model.u.height", "must be finite and >= 0");
            c.check(*side > 0.0 && *side <= 1.0, "model.u.side", "must lie in ]0, 1]");
        }
        Some(UConfig::Exponential { amplitude, rate, .. }) => {
            c.check(*amplitude >= 0.0 && amplitude.is_finite(), "model.u.amplitude", "must be finite and >= 0");
            c.check(positive(*rate), "model.u.rate", "must be > 0");
        }
        None => {}
    }
    dim
}

fn check_energy_grid(c: &mut Checker, lo: f64, hi: f64, n: usize) {
    c.check(lo.is_finite() && hi.is_finite() && lo < hi, "experiment.energy_min", "need energy_min < energy_max");
    c.check(n >= 2, "experiment.energy_points", "must be >= 2");
}

fn check_theta_res(c: &mut Checker, r: Option<usize>) {
    if let Some(r) = r {
        c.check(r >= 1, "experiment.theta_resolution", "must be >= 1");
    }
}

fn validate_experiment(exp: &Experiment, dim: Option<usize>, samples: Option<usize>, c: &mut Checker) {
    match exp {
        Experiment::Bandstructure {
            resolution,
            num_bands,
            gap_tolerance,
            lipschitz_window,
            ..
        } => {
            c.check(*resolution >= 2, "experiment.resolution", "must be >= 2");
            c.check(*num_bands >= 1, "experiment.num_bands", "must be >= 1");
            if let Some(t) = gap_tolerance {
                c.check(*t >= 0.0, "experiment.gap_tolerance", "must be >= 0");
            }
            if let Some([a, b]) = lipschitz_window {
                c.check(a < b, "experiment.lipschitz_window", "need lo < hi");
            }
        }
        Experiment::Ids {
            half_width,
            energy_min,
            energy_max,
            energy_points,
            theta_resolution,
            method,
        } => {
            c.check(*half_width >= 1 || *method == IdsMethod::Periodic, "experiment.half_width", "must be >= 1");
            check_energy_grid(c, *energy_min, *energy_max, *energy_points);
            check_theta_res(c, *theta_resolution);
        }
        Experiment::Lifshitz {
            half_width,
            energy_min,
            energy_max,
            energy_points,
            mass_window,
            ..
        } => {
            c.check(*half_width >= 1, "experiment.half_width", "must be >= 1");
            check_energy_grid(c, *energy_min, *energy_max, *energy_points);
            if let Some([a, b]) = mass_window {
                c.check(*a > 0.0 && a < b, "experiment.mass_window", "need 0 < lo < hi");
            }
        }
        Experiment::IdsDiff {
            ls,
            plateau_energy,
            plateau_order,
            reference_half_width,
            reference_samples,
            theta_resolution,
        } => {
            c.check(!ls.is_empty(), "experiment.ls", "must not be empty");
            c.check(ls.iter().all(|&l| l >= 1), "experiment.ls", "entries must be >= 1");
            if plateau_function(*plateau_energy, *plateau_order).is_err() {
                c.fail("experiment.plateau_energy", "need plateau_energy > 0 and plateau_order >= 1");
            }
            c.check(
                ls.iter().all(|&l| *reference_half_width > l),
                "experiment.reference_half_width",
                "must exceed every l",
            );
            if let Some(r) = reference_samples {
                c.check(*r >= 2, "experiment.reference_samples", "must be >= 2");
            }
            if let Some(m) = samples {
                c.check(m >= 2, "execution.samples", "need at least 2 samples");
            }
            check_theta_res(c, *theta_resolution);
        }
        Experiment::HsCheck {
            matrices,
            matrix_dim,
            plateau_energy,
            plateau_order,
            tolerance,
            dbar_grid,
            ..
        } => {
            c.check(*matrices >= 1, "experiment.matrices", "must be >= 1");
            c.check(*matrix_dim >= 1, "experiment.matrix_dim", "must be >= 1");
            if plateau_function(*plateau_energy, *plateau_order).is_err() {
                c.fail("experiment.plateau_energy", "need plateau_energy > 0 and plateau_order >= 1");
            }
            c.check(positive(*tolerance), "experiment.tolerance", "must be > 0");
            if let Some(g) = dbar_grid {
                c.check(*g >= 2, "experiment.dbar_grid", "must be >= 2");
            }
        }
        Experiment::CtDecay {
            cells,
            z_re,
            z_im,
            max_distance,
            boundary,
            anchor,
        } => {
            c.check(*cells >= 2, "experiment.cells", "must be >= 2");
            c.check(z_re.is_finite() && z_im.is_finite(), "experiment.z_re", "must be finite");
            c.check(*max_distance >= 2, "experiment.max_distance", "must be >= 2 for a fit");
            if let BoxBoundary::Theta { theta } = boundary {
                c.check(
                    theta.iter().all(|t| t.abs() <= std::f64::consts::PI),
                    "experiment.boundary.theta",
                    "must lie in [-pi, pi]",
                );
            }
            if let Some(a) = anchor {
                let half = (*cells / 2) as i64;
                let first = -half;
                let last = first + *cells as i64 - 1;
                let n = dim.unwrap_or(1).min(2);
                c.check(
                    a[..n].iter().all(|&k| (first..=last).contains(&k)),
                    "experiment.anchor",
                    "must be a cell of the box",
                );
            }
        }
        Experiment::GapProb { ls, alpha, boundary } => {
            c.check(!ls.is_empty(), "experiment.ls", "must not be empty");
            c.check(ls.iter().all(|&l| l % 2 == 1), "experiment.ls", "box sides must be odd");
            c.check(*alpha > 0.0 && *alpha < 1.0, "experiment.alpha", "must lie in ]0, 1[");
            if let GapBoundaryConfig::Quasimomentum { theta } = boundary {
                let worst = ls.iter().copied().max().unwrap_or(1).max(1);
                c.check(
                    theta.iter().all(|t| t.abs() <= std::f64::consts::PI / worst as f64),
                    "experiment.boundary.theta",
                    "must lie in B_l for every listed l (|θ| <= π / l)",
                );
            }
        }
        Experiment::ThetaBounds {
            l,
            energy_average,
            energy_fixed,
            theta0,
            theta_resolution,
            xi,
        } => {
            c.check(*l >= 1, "experiment.l", "must be >= 1");
            c.check(positive(*energy_average), "experiment.energy_average", "must be > 0");
            c.check(
                *energy_fixed > 0.0 && *energy_fixed < 1.0,
                "experiment.energy_fixed",
                "must lie in ]0, 1[",
            );
            let hw = std::f64::consts::PI / (2 * l + 1) as f64;
            c.check(
                theta0.iter().all(|t| t.abs() <= hw),
                "experiment.theta0",
                "must lie in B_l (|θ| <= π / (2l + 1))",
            );
            check_theta_res(c, *theta_resolution);
            if let Some(x) = xi {
                c.check(*x >= 0.0 && x.is_finite(), "experiment.xi", "must be finite and >= 0");
            }
        }
        Experiment::MsaSchedule {
            l0,
            m0,
            zeta,
            c1,
            c2,
            c3,
            xi,
            dim,
            ..
        } => {
            c.check(*l0 % 3 == 0 && *l0 >= 6, "experiment.l0", "must be a multiple of 3 and >= 6");
            c.check(*zeta > 1.0 && *zeta < 2.0, "experiment.zeta", "must lie in ]1, 2[");
            c.check(positive(*m0), "experiment.m0", "must be > 0");
            c.check(*c1 >= 0.0 && *c2 >= 0.0 && *c3 >= 0.0, "experiment.c1", "c1, c2, c3 must be >= 0");
            c.check(positive(*xi), "experiment.xi", "must be > 0");
            c.check((1..=2).contains(dim), "experiment.dim", "must be 1 or 2");
        }
        Experiment::MRegularity {
            l,
            energy,
            delta,
            mass,
            eps_probes,
            alpha,
        } => {
            c.check(*l % 2 == 1, "experiment.l", "box side must be odd");
            c.check(positive(*delta), "experiment.delta", "must be > 0");
            c.check(*l as f64 >= 24.0 * delta, "experiment.delta", "need l >= 24 delta");
            c.check(energy.is_finite(), "experiment.energy", "must be finite");
            c.check(*mass >= 0.0 && mass.is_finite(), "experiment.mass", "must be finite and >= 0");
            if let Some(p) = eps_probes {
                c.check(!p.is_empty(), "experiment.eps_probes", "must not be empty");
                c.check(p.iter().all(|e| e.is_finite()), "experiment.eps_probes", "must be finite");
            }
            if let Some(a) = alpha {
                c.check(*a > 0.0 && *a < 1.0, "experiment.alpha", "must lie in ]0, 1[");
            }
        }
    }
}

/// Builds the model from a validated config block.
pub fn build_model(m: &ModelConfig, seed: u64) -> lifshitz_core::Result<AndersonModel> {
    let missing = |f: &'static str| lifshitz_core::Error::param(f, "missing");
    let dim = m.dim.ok_or_else(|| missing("model.dim"))?;
    let p = m.points_per_cell.ok_or_else(|| missing("model.points_per_cell"))?;
    let v0 = match m.v0.as_ref().ok_or_else(|| missing("model.v0"))? {
        V0Config::Zero => PeriodicPotential::zero(dim, p),
        V0Config::Cosine { amplitude } => {
            let a = *amplitude;
            PeriodicPotential::from_fn(dim, p, move |x| {
                (0..dim).map(|i| a * (2.0 * std::f64::consts::PI * x[i]).cos()).sum()
            })?
        }
        V0Config::Values { values } => PeriodicPotential::from_values(dim, p, values.clone())?,
    };
    let u = match m.u.as_ref().ok_or_else(|| missing("model.u"))? {
        UConfig::Indicator { height, side } => SingleSitePotential::indicator(dim, p, *height, *side)?,
        UConfig::Exponential { amplitude, rate, radius } => {
            SingleSitePotential::exponential(dim, p, *amplitude, *rate, *radius)?
        }
    };
    let law = match m.disorder.ok_or_else(|| missing("model.disorder"))? {
        DisorderLawConfig::Uniform => DisorderLaw::Uniform,
        DisorderLawConfig::Beta { a, b } => DisorderLaw::Beta { a, b },
    };
    let disorder = DisorderModel {
        law,
        omega_max: m.omega_max.ok_or_else(|| missing("model.omega_max"))?,
        seed,
    };
    let model = AndersonModel::new(v0, u, disorder)?;
    if m.align_edge.ok_or_else(|| missing("model.align_edge"))? {
        align_edge(&model)
    } else {
        Ok(model)
    }
}
