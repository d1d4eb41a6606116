//! Localization probes: resolvent decay, gap probabilities at the band edge,
//! the θ-averaged and fixed-θ counting inequalities, m-regularity of boxes and
//! the multiscale length/mass/probability recursions.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::floquet::{brillouin_zone, compute_bands, estimate_lipschitz, h0_factory, ThetaGrid};
use crate::lattice::{AndersonModel, AssembledHamiltonian, BoundaryCondition, Site};
use crate::linalg::{operator_norm, SparseMatrix, TripletBuilder, C64};
use crate::stats::{linear_fit, mean_stderr, wilson_interval, MeanEstimate};

/// Eigenvalues down to `-EDGE_TOLERANCE` count as lying at or above the
/// aligned band edge.
pub const EDGE_TOLERANCE: f64 = 1e-9;

/// Normal quantile for the reported Wilson intervals.
pub const WILSON_Z: f64 = 1.96;

/// θ-points per axis used to locate the band edge of `H0`.
pub const EDGE_RESOLUTION: usize = 16;

/// `diam(B_l) <= C8 / l` in the sup norm.
pub const C8: f64 = PI;

fn in_window(e: f64, hi: f64) -> bool {
    e >= -EDGE_TOLERANCE && e < hi
}

fn distance_to_spectrum(eigs: &[f64], z: C64) -> f64 {
    eigs.iter()
        .map(|&e| (C64::new(e, 0.0) - z).norm())
        .fold(f64::INFINITY, f64::min)
}

fn shifted_dense(h: &SparseMatrix, z: C64) -> DMatrix<C64> {
    let mut a = h.to_dense();
    for i in 0..a.nrows() {
        a[(i, i)] -= z;
    }
    a
}

fn near_spectrum_tolerance(z: C64) -> f64 {
    1e-10 * z.norm().max(1.0)
}

// ---------------------------------------------------------------------------
// Combes-Thomas decay

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayFit {
    pub rate: f64,
    pub prefactor: f64,
    pub r_squared: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolventDecayProfile {
    pub z: (f64, f64),
    pub anchor: Site,
    pub distance_to_spectrum: f64,
    /// `(r, max over cells x with |x - y|_∞ = r of ‖χ_x (H - z)^{-1} χ_y‖)`.
    pub norms: Vec<(usize, f64)>,
    pub fit: DecayFit,
    /// `rate / dist(z, σ(H))`.
    pub rate_per_distance: f64,
}

/// Points whose norm has fallen below this fraction of the diagonal block are
/// left out of the fit; they sit at the round-off floor of the solve.
const DECAY_NOISE_FLOOR: f64 = 1e-12;

pub fn combes_thomas_profile(
    h: &AssembledHamiltonian,
    z: C64,
    anchor: Site,
    max_distance: usize,
) -> Result<ResolventDecayProfile> {
    let grid = &h.grid;
    let d = grid.dim();
    let cells: Vec<Site> = (0..grid.num_points()).map(|i| grid.cell_of(i)).collect();
    let anchor_pts: Vec<usize> = (0..cells.len()).filter(|&i| cells[i] == anchor).collect();
    if anchor_pts.is_empty() {
        return Err(Error::param("anchor", format!("cell {anchor:?} is not in the box")));
    }
    let eigs = h.eigenvalues();
    let dist = distance_to_spectrum(&eigs, z);
    let tol = near_spectrum_tolerance(z);
    if dist <= tol {
        return Err(Error::NearSpectrum {
            z: format!("{z}"),
            tolerance: tol,
        });
    }
    let n = h.dim();
    let mut rhs = DMatrix::<C64>::zeros(n, anchor_pts.len());
    for (c, &i) in anchor_pts.iter().enumerate() {
        rhs[(i, c)] = C64::new(1.0, 0.0);
    }
    let g = shifted_dense(&h.matrix, z)
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular resolvent system".into()))?;

    let sup_dist = |k: Site| (0..d).map(|a| (k[a] - anchor[a]).unsigned_abs() as usize).max().unwrap_or(0);
    let mut blocks: std::collections::BTreeMap<Site, Vec<usize>> = Default::default();
    for (i, &k) in cells.iter().enumerate() {
        if sup_dist(k) <= max_distance {
            blocks.entry(k).or_default().push(i);
        }
    }
    let mut by_r = vec![0.0_f64; max_distance + 1];
    let mut seen = vec![false; max_distance + 1];
    for (k, rows) in &blocks {
        let r = sup_dist(*k);
        let block = g.select_rows(rows.iter());
        let nrm = operator_norm(&block);
        by_r[r] = by_r[r].max(nrm);
        seen[r] = true;
    }
    let norms: Vec<(usize, f64)> = (0..=max_distance).filter(|&r| seen[r]).map(|r| (r, by_r[r])).collect();
    let floor = DECAY_NOISE_FLOOR * norms.first().map_or(0.0, |x| x.1);
    let (xs, ys): (Vec<f64>, Vec<f64>) = norms
        .iter()
        .filter(|(r, v)| *r >= 1 && *v > floor)
        .map(|&(r, v)| (r as f64, v.ln()))
        .unzip();
    let lf = linear_fit(&xs, &ys)?;
    let fit = DecayFit {
        rate: -lf.slope,
        prefactor: lf.intercept.exp(),
        r_squared: lf.r_squared,
        points: lf.points,
    };
    Ok(ResolventDecayProfile {
        z: (z.re, z.im),
        anchor,
        distance_to_spectrum: dist,
        norms,
        rate_per_distance: fit.rate / dist,
        fit,
    })
}

impl ResolventDecayProfile {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# z={}{:+}i dist={:.17e}", self.z.0, self.z.1, self.distance_to_spectrum)?;
        writeln!(w, "# rate={:.17e} prefactor={:.17e} r2={:.17e}", self.fit.rate, self.fit.prefactor, self.fit.r_squared)?;
        writeln!(w, "distance,norm")?;
        for (r, v) in &self.norms {
            writeln!(w, "{r},{v:.17e}")?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Band-edge alignment

/// Bottom of the lowest band of `H0` (including the model's current shift),
/// sampled on the lattice θ-grid of the unit-cell zone.
pub fn lower_band_edge(model: &AndersonModel, resolution: usize) -> Result<f64> {
    let zone = brillouin_zone(0, model.dim())?;
    let bands = compute_bands(h0_factory(&model.v0, zone)?, zone, resolution, 1)?;
    Ok(bands.band_range(0).0 - model.energy_shift)
}

/// Copy of `model` shifted so that its lower band edge sits at zero.
pub fn align_edge(model: &AndersonModel) -> Result<AndersonModel> {
    let mut m = model.clone();
    m.energy_shift = 0.0;
    m.energy_shift = lower_band_edge(&m, EDGE_RESOLUTION)?;
    Ok(m)
}

/// Lipschitz constant of the `H0` band functions over the energy window.
pub fn band_lipschitz(model: &AndersonModel, window: (f64, f64), resolution: usize) -> Result<f64> {
    let zone = brillouin_zone(0, model.dim())?;
    let bands = compute_bands(h0_factory(&model.v0, zone)?, zone, resolution, model.points_per_cell().pow(model.dim() as u32))?;
    let shift = model.energy_shift;
    estimate_lipschitz(&bands, (window.0 + shift, window.1 + shift))
}

fn check_aligned(model: &AndersonModel) -> Result<()> {
    let edge = lower_band_edge(model, EDGE_RESOLUTION)?;
    if edge.abs() > 1e-8 {
        return Err(Error::param(
            "energy_shift",
            format!("lower band edge of H0 sits at {edge:e}, not at 0"),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Gap probability

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "theta", rename_all = "snake_case")]
pub enum GapBoundary {
    Periodic,
    /// Quasi-momentum `θ0 ∈ B_{(l-1)/2}`; the box phase is `l θ0`.
    Quasimomentum([f64; 2]),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapProbabilityEstimate {
    pub l: usize,
    pub alpha: f64,
    pub window: f64,
    pub boundary: GapBoundary,
    pub samples: usize,
    pub hits: usize,
    pub estimate: f64,
    pub interval: (f64, f64),
    /// Lowest eigenvalue at or above the edge, per sample.
    pub lowest: Vec<f64>,
}

impl GapProbabilityEstimate {
    /// Hits for another window width on the same samples.
    pub fn hits_below(&self, width: f64) -> usize {
        self.lowest.iter().filter(|&&e| in_window(e, width)).count()
    }
}

fn gap_box_phase(boundary: GapBoundary, l: usize, dim: usize) -> Result<BoundaryCondition> {
    match boundary {
        GapBoundary::Periodic => Ok(BoundaryCondition::Periodic),
        GapBoundary::Quasimomentum(t) => {
            let zone = brillouin_zone((l - 1) / 2, dim)?;
            for &v in &t[..dim] {
                if v.abs() > zone.half_width * (1.0 + 1e-12) {
                    return Err(Error::ThetaOutOfRange { value: v });
                }
            }
            Ok(BoundaryCondition::Theta(zone.box_phase(t)))
        }
    }
}

/// Fraction of realizations whose torus `Λ_l` (periodized couplings, `l`
/// odd) has an eigenvalue in `[0, l^{-α})`.
pub fn gap_probability(
    model: &AndersonModel,
    l: usize,
    alpha: f64,
    boundary: GapBoundary,
    samples: usize,
) -> Result<GapProbabilityEstimate> {
    if l == 0 || l % 2 == 0 {
        return Err(Error::param("l", "box side must be odd"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param("alpha", "must lie in ]0, 1["));
    }
    if samples < 1 {
        return Err(Error::param("samples", "must be >= 1"));
    }
    check_aligned(model)?;
    let bc = gap_box_phase(boundary, l, model.dim())?;
    let half = (l - 1) / 2;
    let window = (l as f64).powf(-alpha);
    let lowest: Vec<f64> = (0..samples as u64)
        .into_par_iter()
        .map(|r| {
            let sample = model.cell_sample(half, r)?;
            let h = model.periodic_approx(half, &sample, bc)?;
            Ok(h.eigenvalues()
                .into_iter()
                .find(|&e| e >= -EDGE_TOLERANCE)
                .unwrap_or(f64::INFINITY))
        })
        .collect::<Result<_>>()?;
    let hits = lowest.iter().filter(|&&e| in_window(e, window)).count();
    Ok(GapProbabilityEstimate {
        l,
        alpha,
        window,
        boundary,
        samples,
        hits,
        estimate: hits as f64 / samples as f64,
        interval: wilson_interval(hits, samples, WILSON_Z),
        lowest,
    })
}

// ---------------------------------------------------------------------------
// θ-averaged and fixed-θ inequalities

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InequalityReport {
    pub l: usize,
    pub energy: f64,
    /// Upper end of the counting window on the right-hand side.
    pub count_energy: f64,
    pub samples: usize,
    pub theta_resolution: usize,
    pub lhs: MeanEstimate,
    pub rhs: MeanEstimate,
    pub combined_stderr: f64,
    /// `rhs + 2σ - lhs`.
    pub slack: f64,
    pub holds: bool,
}

fn report(l: usize, energy: f64, count_energy: f64, res: usize, lhs: &[f64], rhs: &[f64]) -> InequalityReport {
    let lhs = mean_stderr(lhs);
    let rhs = mean_stderr(rhs);
    let sigma = (lhs.stderr.powi(2) + rhs.stderr.powi(2)).sqrt();
    let slack = rhs.mean + 2.0 * sigma - lhs.mean;
    InequalityReport {
        l,
        energy,
        count_energy,
        samples: lhs.samples,
        theta_resolution: res,
        lhs,
        rhs,
        combined_stderr: sigma,
        slack,
        holds: slack >= 0.0,
    }
}

fn check_mc(l: usize, samples: usize, resolution: usize) -> Result<()> {
    if l < 1 {
        return Err(Error::param("l", "must be >= 1"));
    }
    if samples < 1 {
        return Err(Error::param("samples", "must be >= 1"));
    }
    if resolution < 1 {
        return Err(Error::param("theta_resolution", "must be >= 1"));
    }
    Ok(())
}

/// Per θ on the midpoint grid: `(hit in [0, e_hit), count in [0, e_count))`.
fn theta_scan(
    model: &AndersonModel,
    l: usize,
    realization: u64,
    thetas: &[[f64; 2]],
    e_hit: f64,
    e_count: f64,
) -> Result<Vec<(bool, usize)>> {
    let zone = brillouin_zone(l, model.dim())?;
    let sample = model.cell_sample(l, realization)?;
    thetas
        .iter()
        .map(|&t| {
            let h = model.periodic_approx(l, &sample, BoundaryCondition::Theta(zone.box_phase(t)))?;
            let ev = h.eigenvalues();
            Ok((
                ev.iter().any(|&e| in_window(e, e_hit)),
                ev.iter().filter(|&&e| in_window(e, e_count)).count(),
            ))
        })
        .collect()
}

/// `∫_{B_l} P{σ(H_{ω,l}(θ)) ∩ [0,E) ≠ ∅} dθ <= (2π)^d 𝔼[N_{ω,l}(E) - N_{ω,l}(0)]`.
pub fn theta_average_check(
    model: &AndersonModel,
    l: usize,
    energy: f64,
    samples: usize,
    theta_resolution: usize,
) -> Result<InequalityReport> {
    if !(energy > 0.0) {
        return Err(Error::param("energy", "must be > 0"));
    }
    check_mc(l, samples, theta_resolution)?;
    let zone = brillouin_zone(l, model.dim())?;
    let thetas = zone.grid(theta_resolution, ThetaGrid::Midpoint);
    let nt = thetas.len() as f64;
    let vol = zone.volume();
    let per: Vec<(f64, f64)> = (0..samples as u64)
        .into_par_iter()
        .map(|r| {
            let scan = theta_scan(model, l, r, &thetas, energy, energy)?;
            let hits = scan.iter().filter(|s| s.0).count() as f64;
            let count: usize = scan.iter().map(|s| s.1).sum();
            Ok((vol * hits / nt, vol * count as f64 / nt))
        })
        .collect::<Result<_>>()?;
    let (lhs, rhs): (Vec<f64>, Vec<f64>) = per.into_iter().unzip();
    Ok(report(l, energy, energy, theta_resolution, &lhs, &rhs))
}

/// `P{σ(H_{ω,l}(θ0)) ∩ [0,E) ≠ ∅} <= ((2π)^d/|B_l|) 𝔼[N_{ω,l}(E + Ξ C8 / l) - N_{ω,l}(0)]`.
pub fn fixed_theta_check(
    model: &AndersonModel,
    l: usize,
    energy: f64,
    theta0: [f64; 2],
    samples: usize,
    xi: f64,
    theta_resolution: usize,
) -> Result<InequalityReport> {
    if !(energy > 0.0 && energy < 1.0) {
        return Err(Error::param("energy", "must lie in ]0, 1["));
    }
    if !(xi >= 0.0 && xi.is_finite()) {
        return Err(Error::param("xi", "Lipschitz constant must be finite and >= 0"));
    }
    check_mc(l, samples, theta_resolution)?;
    let zone = brillouin_zone(l, model.dim())?;
    for &v in &theta0[..model.dim()] {
        if v.abs() > zone.half_width * (1.0 + 1e-12) {
            return Err(Error::ThetaOutOfRange { value: v });
        }
    }
    let count_energy = energy + xi * C8 / l as f64;
    let thetas = zone.grid(theta_resolution, ThetaGrid::Midpoint);
    let nt = thetas.len() as f64;
    let per: Vec<(f64, f64)> = (0..samples as u64)
        .into_par_iter()
        .map(|r| {
            let hit = theta_scan(model, l, r, &[theta0], energy, energy)?[0].0;
            let scan = theta_scan(model, l, r, &thetas, count_energy, count_energy)?;
            let count: usize = scan.iter().map(|s| s.1).sum();
            Ok((if hit { 1.0 } else { 0.0 }, count as f64 / nt))
        })
        .collect::<Result<_>>()?;
    let (lhs, rhs): (Vec<f64>, Vec<f64>) = per.into_iter().unzip();
    Ok(report(l, energy, count_energy, theta_resolution, &lhs, &rhs))
}

// ---------------------------------------------------------------------------
// Multiscale recursions

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsaConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub xi: f64,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MsaSchedule {
    pub zeta: f64,
    pub constants: MsaConstants,
    /// Lengths as floats; exact integers for the first `exact_steps` entries.
    pub lengths: Vec<f64>,
    pub exact_steps: usize,
    pub masses: Vec<f64>,
    pub exponents: Vec<f64>,
    /// `m_j / m_0`.
    pub mass_ratios: Vec<f64>,
    /// Non-increasing; the decrements stall in f64 once `4 l_j / l_{j+1}` is below the mass resolution.
    pub mass_decreasing: bool,
    /// Lower bound on `inf_j m_j` including the steps beyond the computed ones.
    pub mass_lower_bound: f64,
    pub bounded_below: bool,
}

const EXACT_LIMIT: f64 = 9_007_199_254_740_992.0;

/// Greatest multiple of 3 not exceeding `l^ζ`. Powers that land within
/// rounding of a multiple of 3 (`9^1.5`) are snapped to it.
pub fn next_length(l: f64, zeta: f64) -> f64 {
    let x = l.powf(zeta);
    let k = (x / 3.0).floor();
    let up = 3.0 * (k + 1.0);
    if (up - x).abs() <= 1e-9 * x {
        up
    } else {
        3.0 * k
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn msa_schedule(l0: u64, m0: f64, q0: f64, zeta: f64, steps: usize, c: MsaConstants) -> Result<MsaSchedule> {
    if l0 % 3 != 0 || l0 < 6 {
        return Err(Error::param("l0", "must be a multiple of 3 and >= 6"));
    }
    if !(zeta > 1.0 && zeta < 2.0) {
        return Err(Error::param("zeta", "must lie in ]1, 2["));
    }
    if !(m0 > 0.0) {
        return Err(Error::param("m0", "must be > 0"));
    }
    if c.c1 < 0.0 || c.c2 < 0.0 || c.c3 < 0.0 || !(c.xi > 0.0) || c.dim < 1 {
        return Err(Error::param("constants", "need c1, c2, c3 >= 0, xi > 0, d >= 1"));
    }
    let d = c.dim as f64;
    let mut lengths = vec![l0 as f64];
    let mut masses = vec![m0];
    let mut exponents = vec![q0];
    for j in 0..steps {
        let l = lengths[j];
        let ln_ = next_length(l, zeta);
        let m = masses[j] * (1.0 - 4.0 * l / ln_) - c.c1 / l - c.c2 * ln_.ln() / ln_;
        let a = if c.c3 > 0.0 {
            c.c3.ln() + 2.0 * d * (ln_ / l).ln() + 2.0 * exponents[j] * l.ln()
        } else {
            f64::NEG_INFINITY
        };
        let b = (0.5f64).ln() - c.xi * ln_.ln();
        lengths.push(ln_);
        masses.push(m);
        exponents.push(log_add(a, b) / ln_.ln());
    }
    let exact_steps = lengths.iter().take_while(|&&l| l <= EXACT_LIMIT).count();
    let mass_decreasing = masses.windows(2).all(|w| w[1] <= w[0]);
    let mass_ratios = masses.iter().map(|m| m / m0).collect();

    // Tail beyond the last step: l_{j+1} >= l_j^ζ - 3, so 4 l_j / l_{j+1} <= 4 / (l_j^{ζ-1} - 3/l_j).
    let mut ln_l = lengths.last().unwrap().ln();
    let mut tail_factor = 0.0;
    let mut tail_sub = 0.0;
    for _ in 0..200 {
        let next_ln = zeta * ln_l + (-3.0 * (-zeta * ln_l).exp()).ln_1p();
        let t = 4.0 / ((zeta - 1.0) * ln_l).exp() / (1.0 - 3.0 * (-zeta * ln_l).exp());
        let s = c.c1 * (-ln_l).exp() + c.c2 * next_ln * (-next_ln).exp();
        tail_factor += t;
        tail_sub += s;
        ln_l = next_ln;
        if t < 1e-300 && s < 1e-300 {
            break;
        }
    }
    let last = *masses.last().unwrap();
    let factors_positive = lengths.windows(2).all(|w| w[1] > 4.0 * w[0]);
    let mass_lower_bound = last * (1.0 - tail_factor) - tail_sub;
    let min_mass = masses.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(MsaSchedule {
        zeta,
        constants: c,
        lengths,
        exact_steps,
        masses,
        exponents,
        mass_ratios,
        mass_decreasing,
        mass_lower_bound: mass_lower_bound.min(min_mass),
        bounded_below: factors_positive && tail_factor < 1.0 && mass_lower_bound > 0.0 && min_mass > 0.0,
    })
}

impl MsaSchedule {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "j,l,m,q,m_over_m0")?;
        for j in 0..self.lengths.len() {
            writeln!(
                w,
                "{j},{:.17e},{:.17e},{:.17e},{:.17e}",
                self.lengths[j], self.masses[j], self.exponents[j], self.mass_ratios[j]
            )?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// m-regularity

/// `(ring-inner, ring-outer, core)` sup-norm radii about the box centre.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RingGeometry {
    pub side: f64,
    pub delta: f64,
    pub plateau_radius: f64,
    pub outer_radius: f64,
    pub core_radius: f64,
}

impl RingGeometry {
    pub fn new(side: f64, delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::param("delta", "must be > 0"));
        }
        if side < 24.0 * delta {
            return Err(Error::param(
                "delta",
                format!("box side {side} must be >= 24 delta = {} for ring and core to stay l/4 apart", 24.0 * delta),
            ));
        }
        let half = side / 2.0;
        Ok(RingGeometry {
            side,
            delta,
            plateau_radius: half - 2.0 * delta,
            outer_radius: half - delta,
            core_radius: side / 6.0,
        })
    }

    /// C² ramp: 1 up to the plateau radius, 0 from the outer radius on.
    pub fn phi(&self, r: f64) -> f64 {
        let t = ((self.outer_radius - r) / self.delta).clamp(0.0, 1.0);
        t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegularityTestResult {
    pub geometry: RingGeometry,
    pub energy: f64,
    pub mass: f64,
    pub probes: Vec<(f64, f64)>,
    /// Maximum over the probes: a lower bound on the supremum over ε.
    pub sup_norm: f64,
    pub threshold: f64,
    pub commutator_norm: f64,
    pub passed: bool,
}

fn radius_from_centre(h: &AssembledHamiltonian, i: usize) -> f64 {
    let g = &h.grid;
    let centre = 0.5 * (g.first_cell() + g.last_cell()) as f64;
    let x = g.position(i);
    (0..g.dim()).map(|a| (x[a] - centre).abs()).fold(0.0, f64::max)
}

/// `[H, Φ]_{ij} = H_{ij} (φ_j - φ_i)`; only the hopping part survives, so this
/// is the commutator with `-Δ`.
pub fn commutator(h: &SparseMatrix, phi: &[f64]) -> SparseMatrix {
    let mut b = TripletBuilder::new(h.dim());
    for (i, j, v) in h.triplets() {
        let w = phi[j] - phi[i];
        if i != j && w != 0.0 {
            b.add(i, j, v * w);
        }
    }
    b.build()
}

pub fn ring_profile(h: &AssembledHamiltonian, geometry: &RingGeometry) -> Vec<f64> {
    (0..h.dim()).map(|i| geometry.phi(radius_from_centre(h, i))).collect()
}

/// `max_ε ‖W(φ) (H - E - iε)^{-1} χ_{l/3}‖` against `exp(-m l)`.
pub fn m_regularity_test(
    h: &AssembledHamiltonian,
    energy: f64,
    delta: f64,
    mass: f64,
    eps_probes: &[f64],
) -> Result<RegularityTestResult> {
    if eps_probes.is_empty() {
        return Err(Error::param("eps_probes", "need at least one probe"));
    }
    if eps_probes.iter().any(|e| !e.is_finite()) {
        return Err(Error::param("eps_probes", "probes must be finite"));
    }
    let side = h.grid.cells() as f64;
    let geometry = RingGeometry::new(side, delta)?;
    if eps_probes.contains(&0.0) {
        let dist = distance_to_spectrum(&h.eigenvalues(), C64::new(energy, 0.0));
        let tol = near_spectrum_tolerance(C64::new(energy, 0.0));
        if dist <= tol {
            return Err(Error::NearSpectrum {
                z: format!("{energy}"),
                tolerance: tol,
            });
        }
    }
    let phi = ring_profile(h, &geometry);
    let w = commutator(&h.matrix, &phi).to_dense();
    let core: Vec<usize> = (0..h.dim())
        .filter(|&i| radius_from_centre(h, i) <= geometry.core_radius)
        .collect();
    let mut chi = DMatrix::<C64>::zeros(h.dim(), core.len());
    for (c, &i) in core.iter().enumerate() {
        chi[(i, c)] = C64::new(1.0, 0.0);
    }
    let mut probes = Vec::with_capacity(eps_probes.len());
    for &eps in eps_probes {
        let z = C64::new(energy, eps);
        let x = shifted_dense(&h.matrix, z)
            .lu()
            .solve(&chi)
            .ok_or_else(|| Error::Numerical("singular resolvent system".into()))?;
        probes.push((eps, operator_norm(&(&w * x))));
    }
    let sup_norm = probes.iter().map(|p| p.1).fold(0.0, f64::max);
    let threshold = (-mass * side).exp();
    Ok(RegularityTestResult {
        geometry,
        energy,
        mass,
        probes,
        sup_norm,
        threshold,
        commutator_norm: operator_norm(&w),
        passed: sup_norm <= threshold,
    })
}

/// Default ε-probes for the m-regularity supremum.
pub const DEFAULT_EPS_PROBES: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];

// ---------------------------------------------------------------------------
// Order feasibility

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeasibleOrder {
    pub n: usize,
    /// `α ∈ ]0, 1/4[`.
    pub alpha_preferred: bool,
}

/// Smallest `n` with `n (1 - α) > q + 3d + 1`. Products within `1e-12`
/// relative of the threshold count as equal.
pub fn alpha_n_feasible(q: f64, dim: usize, alpha: f64) -> Result<FeasibleOrder> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::param("alpha", "must lie in ]0, 1["));
    }
    if !(q > 0.0 && q.is_finite()) {
        return Err(Error::param("q", "must be > 0"));
    }
    let target = q + 3.0 * dim as f64 + 1.0;
    let beats = |n: usize| n as f64 * (1.0 - alpha) > target * (1.0 + 1e-12);
    let mut n = (target / (1.0 - alpha)).floor() as usize;
    while n > 0 && beats(n - 1) {
        n -= 1;
    }
    while !beats(n) {
        n += 1;
    }
    Ok(FeasibleOrder {
        n,
        alpha_preferred: alpha < 0.25,
    })
}
