//! Integrated density of states: Dirichlet box counting, Brillouin-zone
//! integration for the periodic approximation, disorder averages, smoothed
//! functionals and Lifshitz-tail fits.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::floquet::{brillouin_zone, ThetaGrid};
use crate::hs::SmoothCompactFunction;
use crate::lattice::{AndersonModel, AssembledHamiltonian, BoundaryCondition, DisorderSample, GridSpec};
use crate::linalg::InertiaCounter;
use crate::stats::{gauss_legendre, linear_fit, mean_stderr, MeanEstimate};

/// Default θ-points per axis for Brillouin integrals.
pub const DEFAULT_THETA_RESOLUTION: usize = 8;

/// Realization offset that keeps reference boxes independent of the test cells.
const REFERENCE_STREAM: u64 = 1 << 40;

/// `E ↦ N(E)` per unit volume on a sorted grid, counting eigenvalues strictly
/// below `E`. Curves built from a finite spectrum keep the weighted
/// eigenvalues as `atoms`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdsCurve {
    pub energies: Vec<f64>,
    pub values: Vec<f64>,
    /// Continuum volume `|Λ|` of the box or periodicity cell.
    pub volume: f64,
    pub points_per_cell: usize,
    /// `N(+∞)`.
    pub total_mass: f64,
    pub atoms: Option<Vec<(f64, f64)>>,
}

fn check_grid(energies: &[f64]) -> Result<()> {
    if energies.is_empty() {
        return Err(Error::param("energies", "empty grid"));
    }
    if energies.iter().any(|e| !e.is_finite()) || energies.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::param("energies", "grid must be finite and strictly increasing"));
    }
    Ok(())
}

/// `n` equally spaced energies including both ends.
pub fn energy_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

impl IdsCurve {
    /// Step curve of weighted atoms sampled on `energies`.
    pub fn from_atoms(mut atoms: Vec<(f64, f64)>, energies: &[f64], volume: f64, points_per_cell: usize) -> Result<Self> {
        check_grid(energies)?;
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut values = Vec::with_capacity(energies.len());
        let mut acc = 0.0;
        let mut k = 0;
        for &e in energies {
            while k < atoms.len() && atoms[k].0 < e {
                acc += atoms[k].1;
                k += 1;
            }
            values.push(acc);
        }
        let total_mass = atoms.iter().map(|a| a.1).sum();
        Ok(IdsCurve {
            energies: energies.to_vec(),
            values,
            volume,
            points_per_cell,
            total_mass,
            atoms: Some(atoms),
        })
    }

    /// Value at `e` using the step convention between grid points.
    pub fn at(&self, e: f64) -> f64 {
        if let Some(atoms) = &self.atoms {
            return atoms.iter().filter(|a| a.0 < e).map(|a| a.1).sum();
        }
        match self.energies.iter().rposition(|&x| x <= e) {
            Some(i) => self.values[i],
            None => 0.0,
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W, meta: &[(&str, String)]) -> std::io::Result<()> {
        for (k, v) in meta {
            writeln!(w, "# {k}={v}")?;
        }
        writeln!(w, "# volume={} points_per_cell={}", self.volume, self.points_per_cell)?;
        writeln!(w, "energy,ids")?;
        for (e, n) in self.energies.iter().zip(&self.values) {
            writeln!(w, "{e:.17e},{n:.17e}")?;
        }
        Ok(())
    }
}

/// `N(E) = |Λ|^{-1} #{eigenvalues < E}` for a Dirichlet box.
pub fn ids_dirichlet_box(h: &AssembledHamiltonian, energies: &[f64]) -> Result<IdsCurve> {
    if h.bc != BoundaryCondition::Dirichlet {
        return Err(Error::BoundaryCondition("box counting needs Dirichlet boundary conditions".into()));
    }
    check_grid(energies)?;
    let counter = InertiaCounter::new(&h.matrix)?;
    let volume = h.grid.volume();
    let values = energies
        .iter()
        .map(|&e| counter.count_below(e) as f64 / volume)
        .collect();
    Ok(IdsCurve {
        energies: energies.to_vec(),
        values,
        volume,
        points_per_cell: h.grid.points_per_cell(),
        total_mass: h.dim() as f64 / volume,
        atoms: None,
    })
}

/// Weighted Floquet eigenvalues of `H_{ω,l}`: every `E_n(θ)` on the midpoint
/// θ-grid of `B_l` with weight `1 / (R^d (2l+1)^d)`.
pub fn periodic_approx_atoms(
    model: &AndersonModel,
    sample: &DisorderSample,
    l: usize,
    theta_resolution: usize,
) -> Result<Vec<(f64, f64)>> {
    if theta_resolution < 1 {
        return Err(Error::param("theta_resolution", "must be >= 1"));
    }
    let d = model.dim();
    let zone = brillouin_zone(l, d)?;
    let thetas = zone.grid(theta_resolution, ThetaGrid::Midpoint);
    let grid = GridSpec::centered(d, model.points_per_cell(), l)?;
    let weight = 1.0 / (thetas.len() as f64 * grid.volume());
    let mut atoms = Vec::with_capacity(thetas.len() * grid.num_points());
    for t in thetas {
        let h = model.periodic_approx(l, sample, BoundaryCondition::Theta(zone.box_phase(t)))?;
        atoms.extend(h.eigenvalues().into_iter().map(|e| (e, weight)));
    }
    Ok(atoms)
}

/// `N_{ω,l}(E) = (2π)^{-d} Σ_n ∫_{B_l} χ{E_n(θ) < E} dθ` by the midpoint rule.
pub fn ids_periodic_approx(
    model: &AndersonModel,
    sample: &DisorderSample,
    l: usize,
    energies: &[f64],
    theta_resolution: usize,
) -> Result<IdsCurve> {
    let atoms = periodic_approx_atoms(model, sample, l, theta_resolution)?;
    let grid = GridSpec::centered(model.dim(), model.points_per_cell(), l)?;
    IdsCurve::from_atoms(atoms, energies, grid.volume(), model.points_per_cell())
}

/// Pointwise mean and standard error of curves on a common grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DisorderAverage {
    pub energies: Vec<f64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub samples: usize,
}

pub fn average_ids(curves: &[IdsCurve]) -> Result<DisorderAverage> {
    let first = curves
        .first()
        .ok_or_else(|| Error::InsufficientData("no curves to average".into()))?;
    if curves.iter().any(|c| c.energies != first.energies) {
        return Err(Error::GridMismatch);
    }
    let m = first.energies.len();
    let mut mean = Vec::with_capacity(m);
    let mut stderr = Vec::with_capacity(m);
    let mut column = vec![0.0; curves.len()];
    for i in 0..m {
        for (c, slot) in curves.iter().zip(column.iter_mut()) {
            *slot = c.values[i];
        }
        let est = mean_stderr(&column);
        mean.push(est.mean);
        stderr.push(est.stderr);
    }
    Ok(DisorderAverage {
        energies: first.energies.clone(),
        mean,
        stderr,
        samples: curves.len(),
    })
}

impl DisorderAverage {
    pub fn write_csv<W: Write>(&self, mut w: W, meta: &[(&str, String)]) -> std::io::Result<()> {
        for (k, v) in meta {
            writeln!(w, "# {k}={v}")?;
        }
        writeln!(w, "# samples={}", self.samples)?;
        writeln!(w, "energy,mean,stderr")?;
        for i in 0..self.energies.len() {
            writeln!(w, "{:.17e},{:.17e},{:.17e}", self.energies[i], self.mean[i], self.stderr[i])?;
        }
        Ok(())
    }
}

/// `∫ g dN`: exact over atoms when present, else a sum over grid increments
/// with `g` taken at the cell midpoint.
pub fn smoothed_functional(g: &dyn SmoothCompactFunction, curve: &IdsCurve) -> Result<f64> {
    let (a, b) = g.support();
    let lo = curve.energies[0];
    let hi = *curve.energies.last().unwrap();
    if a < lo || b > hi {
        return Err(Error::SupportOutsideGrid {
            lo: a,
            hi: b,
            grid_lo: lo,
            grid_hi: hi,
        });
    }
    if let Some(atoms) = &curve.atoms {
        return Ok(atoms.iter().map(|&(e, w)| w * g.value(e)).sum());
    }
    Ok(curve
        .energies
        .windows(2)
        .zip(curve.values.windows(2))
        .map(|(e, n)| g.value(0.5 * (e[0] + e[1])) * (n[1] - n[0]))
        .sum())
}

/// `∫ g dN = -∫ g'(E) N(E) dE` for a Dirichlet box, with `N` from inertia
/// counts at Gauss nodes on the pieces of `supp g`.
pub fn dirichlet_functional(h: &AssembledHamiltonian, g: &dyn SmoothCompactFunction, panels: usize) -> Result<f64> {
    if h.bc != BoundaryCondition::Dirichlet {
        return Err(Error::BoundaryCondition("box counting needs Dirichlet boundary conditions".into()));
    }
    let counter = InertiaCounter::new(&h.matrix)?;
    let volume = h.grid.volume();
    let (a, b) = g.support();
    let mut cuts = vec![a];
    cuts.extend(g.breakpoints().into_iter().filter(|&p| p > a && p < b));
    cuts.push(b);
    let (t, w) = gauss_legendre(8);
    let mut total = 0.0;
    for piece in cuts.windows(2) {
        let len = piece[1] - piece[0];
        for k in 0..panels {
            let p0 = piece[0] + len * k as f64 / panels as f64;
            let hp = len / panels as f64;
            for (ti, wi) in t.iter().zip(&w) {
                let e = p0 + 0.5 * hp * (ti + 1.0);
                let dg = g.derivative(1, e);
                if dg != 0.0 {
                    total -= 0.5 * hp * wi * dg * counter.count_below(e) as f64 / volume;
                }
            }
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayRow {
    pub l: usize,
    /// `mean_M ∫ g dN_{ω,l}`.
    pub functional: MeanEstimate,
    /// `Δ(l) = |mean - reference|`.
    pub delta: f64,
    pub delta_stderr: f64,
    /// `Δ(l)` for zero disorder.
    pub noise_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayTable {
    pub reference_l: usize,
    pub reference: MeanEstimate,
    pub reference_zero_disorder: f64,
    pub theta_resolution: usize,
    pub rows: Vec<DecayRow>,
}

impl DecayTable {
    /// Strictly decreasing `Δ` across consecutive rows, except where both
    /// neighbours already sit at or below their noise floors.
    pub fn decreasing_beyond_floor(&self) -> bool {
        self.rows.windows(2).all(|w| {
            let floor = |r: &DecayRow| r.delta <= r.noise_floor;
            w[1].delta < w[0].delta || (floor(&w[0]) && floor(&w[1]))
        })
    }

    pub fn write_csv<W: Write>(&self, mut w: W, meta: &[(&str, String)]) -> std::io::Result<()> {
        for (k, v) in meta {
            writeln!(w, "# {k}={v}")?;
        }
        writeln!(
            w,
            "# reference_l={} reference={:.17e} reference_stderr={:.17e} theta_resolution={}",
            self.reference_l, self.reference.mean, self.reference.stderr, self.theta_resolution
        )?;
        writeln!(w, "l,mean,stderr,delta,delta_stderr,noise_floor")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                r.l, r.functional.mean, r.functional.stderr, r.delta, r.delta_stderr, r.noise_floor
            )?;
        }
        Ok(())
    }
}

/// Options for [`ids_difference_experiment`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayOptions {
    pub samples: usize,
    pub reference_l: usize,
    /// Reference boxes averaged; defaults to `samples`.
    pub reference_samples: Option<usize>,
    pub theta_resolution: usize,
    /// Gauss panels per smooth piece of `g` for the reference integral.
    pub reference_panels: usize,
}

impl DecayOptions {
    pub fn new(samples: usize, reference_l: usize) -> Self {
        DecayOptions {
            samples,
            reference_l,
            reference_samples: None,
            theta_resolution: DEFAULT_THETA_RESOLUTION,
            reference_panels: 64,
        }
    }
}

fn reference_functional(model: &AndersonModel, g: &dyn SmoothCompactFunction, opts: &DecayOptions, realization: Option<u64>) -> Result<f64> {
    let grid = GridSpec::centered(model.dim(), model.points_per_cell(), opts.reference_l)?;
    let h = match realization {
        Some(r) => {
            let sample = model.box_sample(&grid, r)?;
            model.anderson(&grid, BoundaryCondition::Dirichlet, &sample)?
        }
        None => model.h0(&grid, BoundaryCondition::Dirichlet)?,
    };
    dirichlet_functional(&h, g, opts.reference_panels)
}

/// Periodic-approximation functional for one cell sample.
pub fn periodic_functional(
    model: &AndersonModel,
    g: &dyn SmoothCompactFunction,
    sample: &DisorderSample,
    l: usize,
    theta_resolution: usize,
) -> Result<f64> {
    let atoms = periodic_approx_atoms(model, sample, l, theta_resolution)?;
    Ok(atoms.iter().map(|&(e, w)| w * g.value(e)).sum())
}

/// `Δ(l) = |mean_M ∫ g dN_{ω,l} - ∫ g dN_ref|` with the reference taken from
/// disorder-averaged Dirichlet boxes of half-width `reference_l`.
pub fn ids_difference_experiment(
    model: &AndersonModel,
    g: &dyn SmoothCompactFunction,
    ls: &[usize],
    opts: &DecayOptions,
) -> Result<DecayTable> {
    if opts.samples < 2 {
        return Err(Error::param("M", "need at least 2 samples"));
    }
    if ls.is_empty() {
        return Err(Error::param("l", "empty l-list"));
    }
    let ref_m = opts.reference_samples.unwrap_or(opts.samples).max(2);
    let refs: Vec<f64> = (0..ref_m as u64)
        .into_par_iter()
        .map(|r| reference_functional(model, g, opts, Some(REFERENCE_STREAM + r)))
        .collect::<Result<_>>()?;
    let reference = mean_stderr(&refs);
    let reference_zero = reference_functional(model, g, opts, None)?;
    let mut zero_model = model.clone();
    zero_model.disorder.omega_max = 0.0;
    let mut rows = Vec::with_capacity(ls.len());
    for &l in ls {
        let vals: Vec<f64> = (0..opts.samples as u64)
            .into_par_iter()
            .map(|r| {
                let sample = model.cell_sample(l, r)?;
                periodic_functional(model, g, &sample, l, opts.theta_resolution)
            })
            .collect::<Result<_>>()?;
        let est = mean_stderr(&vals);
        let zero_sample = zero_model.cell_sample(l, 0)?;
        let zero = periodic_functional(&zero_model, g, &zero_sample, l, opts.theta_resolution)?;
        rows.push(DecayRow {
            l,
            functional: est,
            delta: (est.mean - reference.mean).abs(),
            delta_stderr: est.stderr.hypot(reference.stderr),
            noise_floor: (zero - reference_zero).abs(),
        });
    }
    Ok(DecayTable {
        reference_l: opts.reference_l,
        reference,
        reference_zero_disorder: reference_zero,
        theta_resolution: opts.theta_resolution,
        rows,
    })
}

/// Fitted `κ` in `log|log(N(E) - N(edge))| ≈ κ log|E - edge| + c`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LifshitzFit {
    pub kappa: f64,
    pub intercept: f64,
    /// 95% half-width of `κ`.
    pub half_width: f64,
    pub residual_rms: f64,
    pub r_squared: f64,
    /// Energy range of the points used.
    pub energy_window: (f64, f64),
    /// Range of `N(E) - N(edge)` admitted.
    pub mass_window: (f64, f64),
    pub points: usize,
    pub target: f64,
    /// `|κ + d/2| <= 0.15`.
    pub lifshitz_like: bool,
}

/// Tolerance on `|κ + d/2|` for a curve to count as Lifshitz-like.
pub const LIFSHITZ_TOLERANCE: f64 = 0.15;
pub const DEFAULT_MASS_WINDOW: (f64, f64) = (1e-4, 1e-1);

pub fn lifshitz_fit(avg: &DisorderAverage, edge: f64, mass_window: (f64, f64), dim: usize) -> Result<LifshitzFit> {
    let (lo, hi) = mass_window;
    if !(0.0 < lo && lo < hi && hi < 0.5) {
        return Err(Error::param("window", "mass window must satisfy 0 < lo < hi < 1/2"));
    }
    let base = match avg.energies.iter().rposition(|&e| e <= edge) {
        Some(i) => avg.mean[i],
        None => 0.0,
    };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut e_range = (f64::INFINITY, f64::NEG_INFINITY);
    for (e, n) in avg.energies.iter().zip(&avg.mean) {
        let dn = n - base;
        if *e > edge && dn >= lo && dn <= hi {
            xs.push((e - edge).ln());
            ys.push(dn.ln().abs().ln());
            e_range = (e_range.0.min(*e), e_range.1.max(*e));
        }
    }
    if xs.len() < 4 {
        return Err(Error::InsufficientData(format!("{} usable points in the fit window", xs.len())));
    }
    let fit = linear_fit(&xs, &ys)?;
    let target = -(dim as f64) / 2.0;
    Ok(LifshitzFit {
        kappa: fit.slope,
        intercept: fit.intercept,
        half_width: 1.96 * fit.slope_stderr,
        residual_rms: fit.residual_rms,
        r_squared: fit.r_squared,
        energy_window: e_range,
        mass_window,
        points: fit.points,
        target,
        lifshitz_like: (fit.slope - target).abs() <= LIFSHITZ_TOLERANCE,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandEdgeMass {
    pub l: usize,
    pub alpha: f64,
    pub energy: f64,
    pub mass: MeanEstimate,
    /// `C7 l^{-n(1-α)+2d+1}` for the supplied `(n, C7)`.
    pub bound: Option<f64>,
}

/// `𝔼[N_{ω,l}(2 l^{-α}) - N_{ω,l}(0)]`.
pub fn band_edge_mass(
    model: &AndersonModel,
    l: usize,
    alpha: f64,
    samples: usize,
    theta_resolution: usize,
    bound: Option<(usize, f64)>,
) -> Result<BandEdgeMass> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param("alpha", "must lie in ]0, 1["));
    }
    if l < 2 {
        return Err(Error::param("l", "must be >= 2"));
    }
    if samples < 1 {
        return Err(Error::param("M", "must be >= 1"));
    }
    let energy = 2.0 * (l as f64).powf(-alpha);
    let vals: Vec<f64> = (0..samples as u64)
        .into_par_iter()
        .map(|r| {
            let sample = model.cell_sample(l, r)?;
            let atoms = periodic_approx_atoms(model, &sample, l, theta_resolution)?;
            Ok(atoms
                .iter()
                .filter(|a| a.0 >= 0.0 && a.0 < energy)
                .map(|a| a.1)
                .sum())
        })
        .collect::<Result<_>>()?;
    let d = model.dim() as f64;
    Ok(BandEdgeMass {
        l,
        alpha,
        energy,
        mass: mean_stderr(&vals),
        bound: bound.map(|(n, c7)| c7 * (l as f64).powf(-(n as f64) * (1.0 - alpha) + 2.0 * d + 1.0)),
    })
}
