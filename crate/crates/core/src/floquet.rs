//! Floquet band functions `E_n(θ)` over a Brillouin zone, band edges, the
//! regularity test at the lower edge and the Lipschitz constant of the bands.

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{assemble_h0, AssembledHamiltonian, BoundaryCondition, GridSpec, PeriodicPotential};

/// `B_l = [-π/(2l+1), π/(2l+1)]^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BrillouinZone {
    pub l: usize,
    pub dim: usize,
    pub half_width: f64,
}

pub fn brillouin_zone(l: usize, dim: usize) -> Result<BrillouinZone> {
    if !(1..=2).contains(&dim) {
        return Err(Error::param("dim", "d in {1,2}"));
    }
    Ok(BrillouinZone {
        l,
        dim,
        half_width: PI / (2 * l + 1) as f64,
    })
}

/// Wraps an angle into `[-π, π]`.
pub fn wrap_phase(t: f64) -> f64 {
    if (-PI..=PI).contains(&t) {
        return t;
    }
    let w = (t + PI).rem_euclid(2.0 * PI) - PI;
    w.clamp(-PI, PI)
}

/// Placement of the θ samples inside the zone. Both layouts are periodic
/// (no duplicated end point).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ThetaGrid {
    /// `-w + 2w i / R`: contains the zone centre for even `R` and the corner.
    Lattice,
    /// `-w + 2w (i + 1/2) / R`: midpoint rule.
    Midpoint,
}

impl BrillouinZone {
    pub fn volume(&self) -> f64 {
        (2.0 * self.half_width).powi(self.dim as i32)
    }

    pub fn period(&self) -> usize {
        2 * self.l + 1
    }

    /// Phase across the periodicity cell for quasi-momentum `θ`, wrapped to `[-π, π]`.
    pub fn box_phase(&self, theta: [f64; 2]) -> [f64; 2] {
        let s = self.period() as f64;
        let y = if self.dim == 2 { wrap_phase(s * theta[1]) } else { 0.0 };
        [wrap_phase(s * theta[0]), y]
    }

    pub fn axis_points(&self, resolution: usize, kind: ThetaGrid) -> Vec<f64> {
        let w = self.half_width;
        let off = match kind {
            ThetaGrid::Lattice => 0.0,
            ThetaGrid::Midpoint => 0.5,
        };
        (0..resolution)
            .map(|i| -w + 2.0 * w * (i as f64 + off) / resolution as f64)
            .collect()
    }

    /// Grid points, axis 0 fastest.
    pub fn grid(&self, resolution: usize, kind: ThetaGrid) -> Vec<[f64; 2]> {
        let ax = self.axis_points(resolution, kind);
        if self.dim == 1 {
            ax.iter().map(|&t| [t, 0.0]).collect()
        } else {
            ax.iter()
                .flat_map(|&b| ax.iter().map(move |&a| [a, b]))
                .collect()
        }
    }

    pub fn on_boundary(&self, theta: [f64; 2]) -> bool {
        let tol = 1e-12 * self.half_width;
        theta[..self.dim]
            .iter()
            .any(|t| (t.abs() - self.half_width).abs() <= tol)
    }
}

/// Anything that returns the sorted band values at a quasi-momentum.
pub trait BandFunction: Sync {
    fn dim(&self) -> usize;
    fn bands(&self, theta: [f64; 2]) -> Result<Vec<f64>>;
}

/// Lowest `num_bands` eigenvalues of a θ-dependent assembled Hamiltonian.
pub struct HamiltonianBands<F> {
    factory: F,
    dim: usize,
    num_bands: usize,
}

impl<F> HamiltonianBands<F>
where
    F: Fn([f64; 2]) -> Result<AssembledHamiltonian> + Sync,
{
    pub fn new(dim: usize, num_bands: usize, factory: F) -> Self {
        HamiltonianBands {
            factory,
            dim,
            num_bands,
        }
    }
}

impl<F> BandFunction for HamiltonianBands<F>
where
    F: Fn([f64; 2]) -> Result<AssembledHamiltonian> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn bands(&self, theta: [f64; 2]) -> Result<Vec<f64>> {
        let h = (self.factory)(theta)?;
        if !matches!(h.bc, BoundaryCondition::Theta(_) | BoundaryCondition::Periodic) {
            return Err(Error::BoundaryCondition("band factory must produce Theta or Periodic matrices".into()));
        }
        let mut ev = h.eigenvalues();
        if ev.iter().any(|e| !e.is_finite()) {
            return Err(Error::Numerical(format!("eigensolver failed at theta = {theta:?}")));
        }
        ev.truncate(self.num_bands);
        Ok(ev)
    }
}

/// A band given by a closure, for synthetic tests.
pub struct SyntheticBands<F> {
    dim: usize,
    f: F,
}

impl<F> SyntheticBands<F>
where
    F: Fn([f64; 2]) -> Vec<f64> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        SyntheticBands { dim, f }
    }
}

impl<F> BandFunction for SyntheticBands<F>
where
    F: Fn([f64; 2]) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn bands(&self, theta: [f64; 2]) -> Result<Vec<f64>> {
        let mut v = (self.f)(theta);
        v.sort_by(f64::total_cmp);
        Ok(v)
    }
}

/// Factory for `H0` on `Λ_{2l+1}` with the box phase of quasi-momentum `θ ∈ B_l`.
pub fn h0_factory(
    v0: &PeriodicPotential,
    zone: BrillouinZone,
) -> Result<impl Fn([f64; 2]) -> Result<AssembledHamiltonian> + Sync + '_> {
    let grid = GridSpec::with_cells(v0.dim(), v0.points_per_cell(), zone.period())?;
    Ok(move |theta: [f64; 2]| assemble_h0(&grid, v0, BoundaryCondition::Theta(zone.box_phase(theta))))
}

/// Band values on a θ-grid, indexed `[point][band]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandStructure {
    pub zone: BrillouinZone,
    pub resolution: usize,
    pub layout: ThetaGrid,
    pub thetas: Vec<[f64; 2]>,
    pub values: Vec<Vec<f64>>,
    pub num_bands: usize,
}

/// Samples `source` on the θ-grid in parallel; output order is the grid order.
pub fn sample_bands(
    source: &dyn BandFunction,
    zone: BrillouinZone,
    resolution: usize,
    layout: ThetaGrid,
) -> Result<BandStructure> {
    if resolution < 1 {
        return Err(Error::param("resolution", "must be >= 1"));
    }
    if source.dim() != zone.dim {
        return Err(Error::param("zone", "dimension differs from the band source"));
    }
    let thetas = zone.grid(resolution, layout);
    let values: Vec<Vec<f64>> = thetas
        .par_iter()
        .map(|&t| source.bands(t))
        .collect::<Result<_>>()?;
    let num_bands = values.iter().map(Vec::len).min().unwrap_or(0);
    if num_bands == 0 {
        return Err(Error::Numerical("no band values returned".into()));
    }
    let values = values.into_iter().map(|mut v| {
        v.truncate(num_bands);
        v
    });
    Ok(BandStructure {
        zone,
        resolution,
        layout,
        thetas,
        values: values.collect(),
        num_bands,
    })
}

/// Lowest `num_bands` Floquet eigenvalues of `factory(θ)` on the lattice θ-grid.
pub fn compute_bands<F>(factory: F, zone: BrillouinZone, resolution: usize, num_bands: usize) -> Result<BandStructure>
where
    F: Fn([f64; 2]) -> Result<AssembledHamiltonian> + Sync,
{
    if num_bands < 1 {
        return Err(Error::param("num_bands", "must be >= 1"));
    }
    let src = HamiltonianBands::new(zone.dim, num_bands, factory);
    sample_bands(&src, zone, resolution, ThetaGrid::Lattice)
}

impl BandStructure {
    pub fn band(&self, n: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().map(move |v| v[n])
    }

    pub fn band_range(&self, n: usize) -> (f64, f64) {
        self.band(n)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| (lo.min(e), hi.max(e)))
    }

    pub fn step(&self) -> f64 {
        2.0 * self.zone.half_width / self.resolution as f64
    }

    /// Index pairs of grid neighbours (periodic), one per axis direction.
    fn neighbour_pairs(&self) -> Vec<(usize, usize)> {
        let r = self.resolution;
        let mut pairs = Vec::new();
        if r < 2 {
            return pairs;
        }
        if self.zone.dim == 1 {
            for i in 0..r {
                pairs.push((i, (i + 1) % r));
            }
        } else {
            for j in 0..r {
                for i in 0..r {
                    pairs.push((i + r * j, (i + 1) % r + r * j));
                    pairs.push((i + r * j, i + r * ((j + 1) % r)));
                }
            }
        }
        pairs
    }

    /// Largest jump of any band between grid neighbours.
    pub fn max_neighbour_jump(&self) -> f64 {
        self.neighbour_pairs()
            .iter()
            .flat_map(|&(a, b)| {
                self.values[a]
                    .iter()
                    .zip(&self.values[b])
                    .map(|(x, y)| (x - y).abs())
            })
            .fold(0.0, f64::max)
    }

    /// CSV with columns `theta_1..theta_d, n, energy`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let head: Vec<String> = (1..=self.zone.dim).map(|i| format!("theta_{i}")).collect();
        writeln!(w, "{},n,energy", head.join(","))?;
        for (t, vals) in self.thetas.iter().zip(&self.values) {
            let th: Vec<String> = t[..self.zone.dim].iter().map(|x| format!("{x:.17e}")).collect();
            for (n, e) in vals.iter().enumerate() {
                writeln!(w, "{},{},{:.17e}", th.join(","), n + 1, e)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Lower,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BandEdge {
    pub energy: f64,
    pub kind: EdgeKind,
}

/// Edges of `∪_n [min E_n, max E_n]`; ranges closer than `gap_tolerance` merge.
pub fn find_band_edges(bands: &BandStructure, gap_tolerance: f64) -> Vec<BandEdge> {
    let mut ranges: Vec<(f64, f64)> = (0..bands.num_bands).map(|n| bands.band_range(n)).collect();
    ranges.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for (lo, hi) in ranges {
        match merged.last_mut() {
            Some(last) if lo - last.1 <= gap_tolerance => last.1 = last.1.max(hi),
            _ => merged.push((lo, hi)),
        }
    }
    merged
        .into_iter()
        .flat_map(|(lo, hi)| {
            [
                BandEdge {
                    energy: lo,
                    kind: EdgeKind::Lower,
                },
                BandEdge {
                    energy: hi,
                    kind: EdgeKind::Upper,
                },
            ]
        })
        .collect()
}

/// Defaults for the Hessian test.
pub const DEFAULT_FD_STEP: f64 = 1e-3;
pub const PD_TOLERANCE: f64 = 1e-6;
pub const MINIMIZER_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Minimizer {
    pub band: usize,
    pub theta: [f64; 2],
    pub value: f64,
    /// Row-major `d x d`.
    pub hessian: Vec<f64>,
    pub min_hessian_eigenvalue: f64,
    pub on_zone_boundary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandEdgeReport {
    pub edge: f64,
    /// Bands (0-based) attaining the edge.
    pub bands: Vec<usize>,
    pub minimizers: Vec<Minimizer>,
    pub regular: bool,
}

fn sym_min_eigenvalue(h: &[f64], d: usize) -> f64 {
    if d == 1 {
        h[0]
    } else {
        let (a, b, c) = (h[0], h[1], h[3]);
        let mean = 0.5 * (a + c);
        let rad = (0.25 * (a - c).powi(2) + b * b).sqrt();
        mean - rad
    }
}

fn fd_hessian(source: &dyn BandFunction, n: usize, theta: [f64; 2], d: usize, h: f64) -> Result<Vec<f64>> {
    let eval = |t: [f64; 2]| -> Result<f64> {
        source
            .bands(t)?
            .get(n)
            .copied()
            .ok_or_else(|| Error::Numerical(format!("band {n} missing at {t:?}")))
    };
    let shift = |di: [f64; 2]| [theta[0] + di[0], theta[1] + di[1]];
    let e0 = eval(theta)?;
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        let mut ei = [0.0; 2];
        ei[i] = h;
        let plus = eval(shift(ei))?;
        let minus = eval(shift([-ei[0], -ei[1]]))?;
        out[i * d + i] = (plus - 2.0 * e0 + minus) / (h * h);
    }
    if d == 2 {
        let pp = eval(shift([h, h]))?;
        let pm = eval(shift([h, -h]))?;
        let mp = eval(shift([-h, h]))?;
        let mm = eval(shift([-h, -h]))?;
        let mixed = (pp - pm - mp + mm) / (4.0 * h * h);
        out[1] = mixed;
        out[2] = mixed;
    }
    Ok(out)
}

/// Central-difference Hessian with one Richardson step at every grid minimiser
/// of the bands attaining `edge`.
pub fn check_regularity(
    bands: &BandStructure,
    source: &dyn BandFunction,
    edge: f64,
    fd_step: f64,
) -> Result<BandEdgeReport> {
    if !(fd_step > 0.0) {
        return Err(Error::param("fd_step", "must be positive"));
    }
    let d = bands.zone.dim;
    let tol = MINIMIZER_TOLERANCE + 1e-12 * edge.abs().max(1.0);
    let attaining: Vec<usize> = (0..bands.num_bands)
        .filter(|&n| (bands.band_range(n).0 - edge).abs() <= tol)
        .collect();
    if attaining.is_empty() {
        return Err(Error::param("edge", format!("{edge} is not a grid minimum of any band")));
    }
    let mut minimizers = Vec::new();
    for &n in &attaining {
        for (t, vals) in bands.thetas.iter().zip(&bands.values) {
            if (vals[n] - edge).abs() > tol {
                continue;
            }
            let coarse = fd_hessian(source, n, *t, d, fd_step)?;
            let fine = fd_hessian(source, n, *t, d, fd_step / 2.0)?;
            let hess: Vec<f64> = coarse
                .iter()
                .zip(&fine)
                .map(|(c, f)| (4.0 * f - c) / 3.0)
                .collect();
            minimizers.push(Minimizer {
                band: n,
                theta: *t,
                value: vals[n],
                min_hessian_eigenvalue: sym_min_eigenvalue(&hess, d),
                hessian: hess,
                on_zone_boundary: bands.zone.on_boundary(*t),
            });
        }
    }
    let regular = minimizers.iter().all(|m| m.min_hessian_eigenvalue > PD_TOLERANCE);
    Ok(BandEdgeReport {
        edge,
        bands: attaining,
        minimizers,
        regular,
    })
}

/// `Ξ = max |ΔE_n| / |Δθ|` over neighbouring grid points where at least one of
/// the two values lies in `[lo, hi]`.
pub fn estimate_lipschitz(bands: &BandStructure, window: (f64, f64)) -> Result<f64> {
    let (lo, hi) = window;
    if !(lo < hi) {
        return Err(Error::param("window", format!("empty window [{lo}, {hi}]")));
    }
    let step = bands.step();
    let inside = |e: f64| (lo..=hi).contains(&e);
    let xi = bands
        .neighbour_pairs()
        .iter()
        .flat_map(|&(a, b)| {
            bands.values[a]
                .iter()
                .zip(&bands.values[b])
                .filter(|(x, y)| inside(**x) || inside(**y))
                .map(|(x, y)| (x - y).abs() / step)
        })
        .fold(0.0, f64::max);
    Ok(xi)
}
