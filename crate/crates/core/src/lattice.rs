//! Finite-difference assembly of the periodic operator `H0 = -Δ + V0`, its
//! Anderson perturbation `H0 + Σ_k ω_k u(· - k)`, and the periodic
//! approximation in which the couplings are repeated with period `2l + 1`.
//!
//! Grid points are cell centred: unit cell `k` spans `[k - 1/2, k + 1/2]^d` and
//! carries `p` points per axis at offsets `(i + 1/2)/p - 1/2`. The Laplacian is
//! the `2d + 1` point stencil scaled by `p^2`. Points are linearised with axis
//! 0 fastest.

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{SparseMatrix, TripletBuilder, C64};

/// Lattice site index; the second component is 0 in one dimension.
pub type Site = [i64; 2];

/// Discretised box of `cells^d` unit cells with `points_per_cell` points per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    dim: usize,
    points_per_cell: usize,
    cells: usize,
}

/// Upper bound on the number of grid points any assembly will accept.
pub const MAX_GRID_POINTS: usize = 1 << 20;

impl GridSpec {
    /// Box `Λ_{2l+1}`: cells `-l..=l` along every axis.
    pub fn centered(dim: usize, points_per_cell: usize, half_width: usize) -> Result<Self> {
        if half_width < 1 {
            return Err(Error::param("l", "box half-width must be at least 1"));
        }
        Self::with_cells(dim, points_per_cell, 2 * half_width + 1)
    }

    /// Box of `cells` unit cells per axis. Odd counts are centred on the origin;
    /// even counts cover `-cells/2 ..= cells/2 - 1`.
    pub fn with_cells(dim: usize, points_per_cell: usize, cells: usize) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::param("dim", format!("{dim} not in {{1, 2}}")));
        }
        if points_per_cell < 1 {
            return Err(Error::param("points_per_cell", "must be >= 1"));
        }
        if cells < 1 {
            return Err(Error::param("cells", "must be >= 1"));
        }
        let grid = GridSpec {
            dim,
            points_per_cell,
            cells,
        };
        if grid.num_points() > MAX_GRID_POINTS {
            return Err(Error::param(
                "grid",
                format!("{} points exceed the budget {MAX_GRID_POINTS}", grid.num_points()),
            ));
        }
        Ok(grid)
    }

    /// Unit-cell grid (`Λ_1`) used for Floquet analysis.
    pub fn unit_cell(dim: usize, points_per_cell: usize) -> Result<Self> {
        Self::with_cells(dim, points_per_cell, 1)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points_per_cell(&self) -> usize {
        self.points_per_cell
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    /// `l` when the box has `2l + 1` cells.
    pub fn half_width(&self) -> Option<usize> {
        (self.cells % 2 == 1).then_some(self.cells / 2)
    }

    pub fn step(&self) -> f64 {
        1.0 / self.points_per_cell as f64
    }

    pub fn points_per_axis(&self) -> usize {
        self.cells * self.points_per_cell
    }

    pub fn num_points(&self) -> usize {
        self.points_per_axis().pow(self.dim as u32)
    }

    /// Continuum volume `cells^d`.
    pub fn volume(&self) -> f64 {
        (self.cells as f64).powi(self.dim as i32)
    }

    pub fn first_cell(&self) -> i64 {
        -((self.cells / 2) as i64)
    }

    pub fn last_cell(&self) -> i64 {
        self.first_cell() + self.cells as i64 - 1
    }

    /// Axis indices of linear point `idx`.
    pub fn axes(&self, idx: usize) -> [usize; 2] {
        let n = self.points_per_axis();
        if self.dim == 1 {
            [idx, 0]
        } else {
            [idx % n, idx / n]
        }
    }

    pub fn linear(&self, axes: [usize; 2]) -> usize {
        axes[0] + if self.dim == 2 { axes[1] * self.points_per_axis() } else { 0 }
    }

    /// Coordinate of axis index `i`.
    pub fn coordinate(&self, i: usize) -> f64 {
        self.first_cell() as f64 - 0.5 + (i as f64 + 0.5) * self.step()
    }

    pub fn position(&self, idx: usize) -> [f64; 2] {
        let a = self.axes(idx);
        let y = if self.dim == 2 { self.coordinate(a[1]) } else { 0.0 };
        [self.coordinate(a[0]), y]
    }

    /// Unit cell containing point `idx`.
    pub fn cell_of(&self, idx: usize) -> Site {
        let a = self.axes(idx);
        let p = self.points_per_cell;
        let c = |i: usize| self.first_cell() + (i / p) as i64;
        [c(a[0]), if self.dim == 2 { c(a[1]) } else { 0 }]
    }

    /// All cells of the box.
    pub fn sites(&self) -> SiteRange {
        let lo = self.first_cell();
        let hi = self.last_cell();
        SiteRange::new(self.dim, [lo, if self.dim == 2 { lo } else { 0 }], [
            hi,
            if self.dim == 2 { hi } else { 0 },
        ])
    }
}

/// Rectangular set of lattice sites `lo..=hi` (inclusive per axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteRange {
    pub dim: usize,
    pub lo: Site,
    pub hi: Site,
}

impl SiteRange {
    pub fn new(dim: usize, lo: Site, hi: Site) -> Self {
        SiteRange { dim, lo, hi }
    }

    /// Sites `k` with `|k|_∞ <= l`.
    pub fn fundamental(dim: usize, l: usize) -> Self {
        let l = l as i64;
        let y = if dim == 2 { l } else { 0 };
        SiteRange::new(dim, [-l, -y], [l, y])
    }

    /// Grows the range by `margin` cells on each side.
    pub fn expanded(&self, margin: usize) -> Self {
        let m = margin as i64;
        let my = if self.dim == 2 { m } else { 0 };
        SiteRange::new(
            self.dim,
            [self.lo[0] - m, self.lo[1] - my],
            [self.hi[0] + m, self.hi[1] + my],
        )
    }

    pub fn extent(&self) -> [usize; 2] {
        [
            (self.hi[0] - self.lo[0] + 1).max(0) as usize,
            (self.hi[1] - self.lo[1] + 1).max(0) as usize,
        ]
    }

    pub fn len(&self) -> usize {
        let e = self.extent();
        e[0] * e[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, k: Site) -> bool {
        (self.lo[0]..=self.hi[0]).contains(&k[0]) && (self.lo[1]..=self.hi[1]).contains(&k[1])
    }

    pub fn iter(&self) -> impl Iterator<Item = Site> + '_ {
        let (lo, hi) = (self.lo, self.hi);
        (lo[1]..=hi[1]).flat_map(move |y| (lo[0]..=hi[0]).map(move |x| [x, y]))
    }

    fn offset(&self, k: Site) -> Option<usize> {
        if !self.contains(k) {
            return None;
        }
        let e = self.extent();
        Some((k[0] - self.lo[0]) as usize + e[0] * (k[1] - self.lo[1]) as usize)
    }
}

/// `Z^d`-periodic potential sampled on the `p^d` points of one unit cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicPotential {
    dim: usize,
    points_per_cell: usize,
    values: Vec<f64>,
}

/// In-cell offsets `(i + 1/2)/p - 1/2`.
fn cell_offsets(p: usize) -> Vec<f64> {
    (0..p).map(|i| (i as f64 + 0.5) / p as f64 - 0.5).collect()
}

impl PeriodicPotential {
    pub fn zero(dim: usize, points_per_cell: usize) -> Self {
        PeriodicPotential {
            dim,
            points_per_cell,
            values: vec![0.0; points_per_cell.pow(dim as u32)],
        }
    }

    pub fn from_values(dim: usize, points_per_cell: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != points_per_cell.pow(dim as u32) {
            return Err(Error::MeshMismatch(format!(
                "{} samples for a cell of {}^{} points",
                values.len(),
                points_per_cell,
                dim
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("v0", "non-finite sample"));
        }
        Ok(PeriodicPotential {
            dim,
            points_per_cell,
            values,
        })
    }

    /// Samples `f` at the in-cell grid offsets.
    pub fn from_fn(dim: usize, points_per_cell: usize, f: impl Fn([f64; 2]) -> f64) -> Result<Self> {
        let off = cell_offsets(points_per_cell);
        let values = if dim == 1 {
            off.iter().map(|&x| f([x, 0.0])).collect()
        } else {
            off.iter()
                .flat_map(|&y| off.iter().map(move |&x| (x, y)))
                .map(|(x, y)| f([x, y]))
                .collect()
        };
        Self::from_values(dim, points_per_cell, values)
    }

    /// `V0(x) = Σ_j V_j(x_j)` from one sampled profile per axis.
    pub fn decomposable(profiles: &[Vec<f64>]) -> Result<Self> {
        let dim = profiles.len();
        if !(1..=2).contains(&dim) {
            return Err(Error::param("profiles", "need one profile per axis, d in {1,2}"));
        }
        let p = profiles[0].len();
        if profiles.iter().any(|pr| pr.len() != p) {
            return Err(Error::MeshMismatch("profiles of unequal length".into()));
        }
        let values = if dim == 1 {
            profiles[0].clone()
        } else {
            (0..p)
                .flat_map(|j| (0..p).map(move |i| (i, j)))
                .map(|(i, j)| profiles[0][i] + profiles[1][j])
                .collect()
        };
        Self::from_values(dim, p, values)
    }

    /// Samples a one-dimensional profile `f` on `p` in-cell offsets.
    pub fn sample_profile(points_per_cell: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
        cell_offsets(points_per_cell).into_iter().map(f).collect()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points_per_cell(&self) -> usize {
        self.points_per_cell
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn at_cell_index(&self, a: [usize; 2]) -> f64 {
        let p = self.points_per_cell;
        if self.dim == 1 {
            self.values[a[0] % p]
        } else {
            self.values[a[0] % p + p * (a[1] % p)]
        }
    }
}


/// Single-site bump `u`, sampled on the window `|x|_∞ <= radius + 1/2` around
/// its site, together with the constants of its lower bound and decay envelope.
#[derive(Clone)]
pub struct SingleSitePotential {
    dim: usize,
    points_per_cell: usize,
    radius: usize,
    values: Vec<f64>,
    /// δ1: lower bound on the core cube.
    pub core_bound: f64,
    /// s: side of the core cube `|x|_∞ < s/2`.
    pub core_side: f64,
    /// δ2, δ3: envelope `δ2 exp(-δ3 |x|_∞)` outside the core.
    pub decay_amplitude: f64,
    pub decay_rate: f64,
}

impl fmt::Debug for SingleSitePotential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SingleSitePotential")
            .field("dim", &self.dim)
            .field("points_per_cell", &self.points_per_cell)
            .field("radius", &self.radius)
            .field("core_bound", &self.core_bound)
            .field("core_side", &self.core_side)
            .field("decay_amplitude", &self.decay_amplitude)
            .field("decay_rate", &self.decay_rate)
            .finish()
    }
}

/// Constants describing a single-site profile; passed to the samplers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteBounds {
    pub core_bound: f64,
    pub core_side: f64,
    pub decay_amplitude: f64,
    pub decay_rate: f64,
}

/// Smallest radius (in cells) with `δ2 exp(-δ3 R) < 1e-10`.
pub fn default_truncation_radius(decay_amplitude: f64, decay_rate: f64) -> usize {
    let r = ((decay_amplitude * 1e10).ln() / decay_rate).floor() + 1.0;
    r.max(0.0) as usize
}

impl SingleSitePotential {
    /// Samples `profile` (a function of the displacement from the site centre)
    /// on the window of `radius` cells around the site.
    pub fn sample(
        dim: usize,
        points_per_cell: usize,
        radius: usize,
        bounds: SiteBounds,
        profile: impl Fn([f64; 2]) -> f64,
    ) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::param("dim", "d in {1,2}"));
        }
        if points_per_cell < 1 {
            return Err(Error::param("points_per_cell", "must be >= 1"));
        }
        let n = (2 * radius + 1) * points_per_cell;
        let coord = |i: usize| -(radius as f64) - 0.5 + (i as f64 + 0.5) / points_per_cell as f64;
        let values: Vec<f64> = if dim == 1 {
            (0..n).map(|i| profile([coord(i), 0.0])).collect()
        } else {
            (0..n)
                .flat_map(|j| (0..n).map(move |i| (i, j)))
                .map(|(i, j)| profile([coord(i), coord(j)]))
                .collect()
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("u", "non-finite sample"));
        }
        Ok(SingleSitePotential {
            dim,
            points_per_cell,
            radius,
            values,
            core_bound: bounds.core_bound,
            core_side: bounds.core_side,
            decay_amplitude: bounds.decay_amplitude,
            decay_rate: bounds.decay_rate,
        })
    }

    /// `u = height · 1{|x|_∞ < side/2}`, `side <= 1`.
    pub fn indicator(dim: usize, points_per_cell: usize, height: f64, side: f64) -> Result<Self> {
        if !(side > 0.0 && side <= 1.0) {
            return Err(Error::param("side", "indicator side must lie in (0, 1]"));
        }
        let bounds = SiteBounds {
            core_bound: height,
            core_side: side,
            decay_amplitude: height.max(f64::MIN_POSITIVE),
            decay_rate: 1.0,
        };
        Self::sample(dim, points_per_cell, 0, bounds, move |x| {
            if x[0].abs().max(x[1].abs()) < side / 2.0 {
                height
            } else {
                0.0
            }
        })
    }

    /// `u = amplitude · exp(-rate |x|_2)` truncated at `radius` cells.
    pub fn exponential(
        dim: usize,
        points_per_cell: usize,
        amplitude: f64,
        rate: f64,
        radius: Option<usize>,
    ) -> Result<Self> {
        let radius = radius.unwrap_or_else(|| default_truncation_radius(amplitude, rate));
        let core_side = 1.0;
        let bounds = SiteBounds {
            core_bound: amplitude * (-rate * core_side / 2.0 * (dim as f64).sqrt()).exp(),
            core_side,
            decay_amplitude: amplitude,
            decay_rate: rate,
        };
        Self::sample(dim, points_per_cell, radius, bounds, move |x| {
            amplitude * (-rate * (x[0] * x[0] + x[1] * x[1]).sqrt()).exp()
        })
    }

    pub fn with_bounds(mut self, bounds: SiteBounds) -> Self {
        self.core_bound = bounds.core_bound;
        self.core_side = bounds.core_side;
        self.decay_amplitude = bounds.decay_amplitude;
        self.decay_rate = bounds.decay_rate;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points_per_cell(&self) -> usize {
        self.points_per_cell
    }

    /// Truncation radius `R_u` in cells.
    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn window_points_per_axis(&self) -> usize {
        (2 * self.radius + 1) * self.points_per_cell
    }

    /// Sample at window axis indices.
    pub fn at(&self, w: [usize; 2]) -> f64 {
        let n = self.window_points_per_axis();
        self.values[w[0] + if self.dim == 2 { n * w[1] } else { 0 }]
    }

    /// Displacement from the site centre of window axis index `i`.
    pub fn window_coordinate(&self, i: usize) -> f64 {
        -(self.radius as f64) - 0.5 + (i as f64 + 0.5) / self.points_per_cell as f64
    }

    /// Window samples paired with their displacement.
    pub fn samples(&self) -> impl Iterator<Item = ([f64; 2], f64)> + '_ {
        let n = self.window_points_per_axis();
        let ny = if self.dim == 2 { n } else { 1 };
        (0..ny).flat_map(move |j| {
            (0..n).map(move |i| {
                let y = if self.dim == 2 { self.window_coordinate(j) } else { 0.0 };
                ([self.window_coordinate(i), y], self.at([i, j]))
            })
        })
    }
}

/// One failed pointwise condition of a single-site profile.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiteViolation {
    pub kind: SiteViolationKind,
    pub position: [f64; 2],
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SiteViolationKind {
    Negative,
    BelowCoreBound,
    AboveDecayEnvelope,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SiteValidationReport {
    pub passed: bool,
    pub violations: Vec<SiteViolation>,
    /// Envelope value at the truncation radius, i.e. the dropped tail bound.
    pub truncation_error: f64,
}

/// Scans the sampled profile for nonnegativity, the core lower bound and the
/// exponential envelope.
pub fn validate_single_site(u: &SingleSitePotential) -> SiteValidationReport {
    const REL_TOL: f64 = 1e-12;
    let mut violations = Vec::new();
    for (x, value) in u.samples() {
        let sup = x[0].abs().max(x[1].abs());
        if value < 0.0 {
            violations.push(SiteViolation {
                kind: SiteViolationKind::Negative,
                position: x,
                value,
                bound: 0.0,
            });
        }
        if sup < u.core_side / 2.0 {
            if value < u.core_bound * (1.0 - REL_TOL) {
                violations.push(SiteViolation {
                    kind: SiteViolationKind::BelowCoreBound,
                    position: x,
                    value,
                    bound: u.core_bound,
                });
            }
        } else {
            let envelope = u.decay_amplitude * (-u.decay_rate * sup).exp();
            if value.abs() > envelope * (1.0 + REL_TOL) {
                violations.push(SiteViolation {
                    kind: SiteViolationKind::AboveDecayEnvelope,
                    position: x,
                    value,
                    bound: envelope,
                });
            }
        }
    }
    SiteValidationReport {
        passed: violations.is_empty(),
        truncation_error: u.decay_amplitude * (-u.decay_rate * u.radius as f64).exp(),
        violations,
    }
}

/// Law of the i.i.d. coupling constants on `[0, ω_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisorderLaw {
    Uniform,
    /// Beta(a, b) rescaled to `[0, ω_max]`; `a, b >= 1` keeps the density bounded.
    Beta { a: f64, b: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisorderModel {
    pub law: DisorderLaw,
    pub omega_max: f64,
    pub seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl DisorderModel {
    pub fn uniform(omega_max: f64, seed: u64) -> Self {
        DisorderModel {
            law: DisorderLaw::Uniform,
            omega_max,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega_max >= 0.0 && self.omega_max.is_finite()) {
            return Err(Error::param("omega_max", "must be finite and >= 0"));
        }
        if let DisorderLaw::Beta { a, b } = self.law {
            if !(a >= 1.0 && b >= 1.0) {
                return Err(Error::param("law", "beta parameters must be >= 1 for a bounded density"));
            }
        }
        Ok(())
    }

    /// Draw for `(seed, realization, site)`; independent of evaluation order.
    pub fn draw(&self, realization: u64, site: Site) -> f64 {
        if self.omega_max == 0.0 {
            return 0.0;
        }
        let mut key = splitmix64(self.seed);
        key = splitmix64(key ^ realization);
        key = splitmix64(key ^ site[0] as u64);
        key = splitmix64(key ^ (site[1] as u64).rotate_left(32));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let unit: f64 = match self.law {
            DisorderLaw::Uniform => rng.random::<f64>(),
            DisorderLaw::Beta { a, b } => Beta::new(a, b)
                .map(|d| d.sample(&mut rng))
                .unwrap_or_else(|_| rng.random::<f64>()),
        };
        unit * self.omega_max
    }
}

/// Coupling constants `ω_k` on a rectangular site range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisorderSample {
    range: SiteRange,
    values: Vec<f64>,
}

impl DisorderSample {
    pub fn from_values(range: SiteRange, values: Vec<f64>) -> Result<Self> {
        if values.len() != range.len() {
            return Err(Error::param("values", "length does not match the site range"));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::param("values", "couplings must be finite and >= 0"));
        }
        Ok(DisorderSample { range, values })
    }

    pub fn constant(range: SiteRange, value: f64) -> Result<Self> {
        Self::from_values(range, vec![value; range.len()])
    }

    pub fn range(&self) -> SiteRange {
        self.range
    }

    pub fn get(&self, k: Site) -> Option<f64> {
        self.range.offset(k).map(|i| self.values[i])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Sample on the same range with `ω'_k = ω_{fold(k - shift)}`, folding into
    /// the range treated as a torus.
    pub fn torus_shifted(&self, shift: Site) -> Self {
        let e = self.range.extent();
        let wrap = |v: i64, lo: i64, n: usize| lo + (v - lo).rem_euclid(n as i64);
        let values = self
            .range
            .iter()
            .map(|k| {
                let src = [
                    wrap(k[0] - shift[0], self.range.lo[0], e[0]),
                    wrap(k[1] - shift[1], self.range.lo[1], e[1]),
                ];
                self.get(src).unwrap_or(0.0)
            })
            .collect();
        DisorderSample {
            range: self.range,
            values,
        }
    }
}

/// i.i.d. couplings on `sites`, keyed by `(seed, realization, site)`.
pub fn sample_disorder(model: &DisorderModel, sites: SiteRange, realization: u64) -> Result<DisorderSample> {
    model.validate()?;
    let values = sites.iter().map(|k| model.draw(realization, k)).collect();
    Ok(DisorderSample {
        range: sites,
        values,
    })
}

/// Box boundary condition. `Theta` carries the phase accumulated across the
/// whole box along each axis: `f(x + L e_j) = exp(i θ_j) f(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "theta", rename_all = "snake_case")]
pub enum BoundaryCondition {
    Dirichlet,
    Periodic,
    Theta([f64; 2]),
}

impl BoundaryCondition {
    fn phase(&self, axis: usize) -> Option<f64> {
        match self {
            BoundaryCondition::Dirichlet => None,
            BoundaryCondition::Periodic => Some(0.0),
            BoundaryCondition::Theta(t) => Some(t[axis]),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if let BoundaryCondition::Theta(t) = self {
            for &v in &t[..dim] {
                if !(-PI..=PI).contains(&v) {
                    return Err(Error::ThetaOutOfRange { value: v });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    H0,
    Anderson,
    PeriodicApprox,
}

/// Assembled Hermitian matrix with the metadata needed to interpret it.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledHamiltonian {
    pub matrix: SparseMatrix,
    pub grid: GridSpec,
    pub bc: BoundaryCondition,
    pub provenance: Provenance,
}

impl AssembledHamiltonian {
    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.matrix.eigenvalues()
    }

    /// Diagonal minus the Laplacian contribution, i.e. the sampled potential.
    pub fn potential(&self) -> Vec<f64> {
        let lap = laplacian(&self.grid, self.bc);
        self.matrix
            .diagonal()
            .iter()
            .zip(lap.diagonal())
            .map(|(a, b)| (a - b).re)
            .collect()
    }
}

/// `2d + 1` point Laplacian `-Δ` with the box boundary condition.
pub fn laplacian(grid: &GridSpec, bc: BoundaryCondition) -> SparseMatrix {
    let n = grid.points_per_axis();
    let inv_h2 = (grid.points_per_cell() as f64).powi(2);
    let mut b = TripletBuilder::new(grid.num_points());
    for idx in 0..grid.num_points() {
        let a = grid.axes(idx);
        for axis in 0..grid.dim() {
            b.add(idx, idx, C64::new(2.0 * inv_h2, 0.0));
            // forward neighbour along `axis`; the backward hop is the adjoint
            let mut nb = a;
            let phase = if a[axis] + 1 < n {
                nb[axis] = a[axis] + 1;
                Some(C64::new(1.0, 0.0))
            } else {
                bc.phase(axis).map(|t| {
                    nb[axis] = 0;
                    C64::from_polar(1.0, t)
                })
            };
            if let Some(ph) = phase {
                let j = grid.linear(nb);
                // hop from idx to its forward neighbour j: f(x + h) enters row idx
                // with coefficient -1/h^2 times the Bloch phase picked up on wrap.
                b.add(idx, j, -ph * inv_h2);
                b.add(j, idx, -ph.conj() * inv_h2);
            }
        }
    }
    b.build()
}

fn check_mesh(grid: &GridSpec, dim: usize, p: usize, what: &str) -> Result<()> {
    if grid.dim() != dim || grid.points_per_cell() != p {
        return Err(Error::MeshMismatch(format!(
            "{what} sampled for d={dim}, p={p} but grid has d={}, p={}",
            grid.dim(),
            grid.points_per_cell()
        )));
    }
    Ok(())
}

/// `H0 = -Δ + V0` on the box with boundary condition `bc`.
pub fn assemble_h0(grid: &GridSpec, v0: &PeriodicPotential, bc: BoundaryCondition) -> Result<AssembledHamiltonian> {
    check_mesh(grid, v0.dim(), v0.points_per_cell(), "V0")?;
    bc.validate(grid.dim())?;
    let lap = laplacian(grid, bc);
    let diag: Vec<f64> = (0..grid.num_points())
        .map(|idx| v0.at_cell_index(grid.axes(idx)))
        .collect();
    Ok(AssembledHamiltonian {
        matrix: lap.with_added_diagonal(&diag),
        grid: *grid,
        bc,
        provenance: Provenance::H0,
    })
}

/// Sites whose truncated profile reaches into the box.
pub fn contributing_sites(grid: &GridSpec, u: &SingleSitePotential) -> SiteRange {
    grid.sites().expanded(u.radius())
}

/// Adds `Σ_k ω_k u(· - k)` (no folding) to `h0`.
pub fn assemble_anderson(
    h0: &AssembledHamiltonian,
    u: &SingleSitePotential,
    sample: &DisorderSample,
) -> Result<AssembledHamiltonian> {
    let grid = h0.grid;
    check_mesh(&grid, u.dim(), u.points_per_cell(), "u")?;
    let p = grid.points_per_cell() as i64;
    let n = grid.points_per_axis() as i64;
    let wn = u.window_points_per_axis();
    let r = u.radius() as i64;
    let mut v = vec![0.0; grid.num_points()];
    for k in contributing_sites(&grid, u).iter() {
        let omega = sample.get(k).ok_or(Error::MissingCoupling { site: k })?;
        if omega == 0.0 {
            continue;
        }
        // window index i sits at grid axis index (k - r - first) * p + i
        let base = |kc: i64| (kc - r - grid.first_cell()) * p;
        let wy = if grid.dim() == 2 { wn } else { 1 };
        for j in 0..wy {
            let gy = if grid.dim() == 2 { base(k[1]) + j as i64 } else { 0 };
            if !(0..n).contains(&gy) && grid.dim() == 2 {
                continue;
            }
            for i in 0..wn {
                let gx = base(k[0]) + i as i64;
                if !(0..n).contains(&gx) {
                    continue;
                }
                let val = u.at([i, j]);
                if val != 0.0 {
                    v[grid.linear([gx as usize, gy as usize])] += omega * val;
                }
            }
        }
    }
    Ok(AssembledHamiltonian {
        matrix: h0.matrix.with_added_diagonal(&v),
        grid,
        bc: h0.bc,
        provenance: Provenance::Anderson,
    })
}

/// Representative of `k mod (2l+1)` in `{-l, ..., l}`.
pub fn fold_index(k: i64, l: usize) -> i64 {
    let period = 2 * l as i64 + 1;
    (k + l as i64).rem_euclid(period) - l as i64
}

pub fn fold_site(k: Site, l: usize, dim: usize) -> Site {
    [fold_index(k[0], l), if dim == 2 { fold_index(k[1], l) } else { 0 }]
}

/// `(2l+1)`-periodic potential `Σ_{k ∈ Z^d} ω_{k̃} u(· - k)` restricted to the
/// periodicity cell, with `V0`, on a torus with `Periodic` or `Theta` bc.
pub fn assemble_periodic_approx(
    grid: &GridSpec,
    v0: &PeriodicPotential,
    u: &SingleSitePotential,
    sample: &DisorderSample,
    bc: BoundaryCondition,
) -> Result<AssembledHamiltonian> {
    if matches!(bc, BoundaryCondition::Dirichlet) {
        return Err(Error::BoundaryCondition(
            "the periodic approximation lives on the torus; Dirichlet is not admissible".into(),
        ));
    }
    let l = grid
        .half_width()
        .ok_or_else(|| Error::param("grid", "periodic approximation needs 2l+1 cells"))?;
    check_mesh(grid, u.dim(), u.points_per_cell(), "u")?;
    let h0 = assemble_h0(grid, v0, bc)?;
    let v = periodized_potential(grid, u, sample, l)?;
    Ok(AssembledHamiltonian {
        matrix: h0.matrix.with_added_diagonal(&v),
        grid: *grid,
        bc,
        provenance: Provenance::PeriodicApprox,
    })
}

/// Folded random potential on the periodicity cell.
pub fn periodized_potential(
    grid: &GridSpec,
    u: &SingleSitePotential,
    sample: &DisorderSample,
    l: usize,
) -> Result<Vec<f64>> {
    let p = grid.points_per_cell() as i64;
    let n = grid.points_per_axis() as i64;
    let wn = u.window_points_per_axis();
    let r = u.radius() as i64;
    let d = grid.dim();
    let mut v = vec![0.0; grid.num_points()];
    for k in SiteRange::fundamental(d, l).iter() {
        let omega = sample.get(k).ok_or(Error::MissingCoupling { site: k })?;
        if omega == 0.0 {
            continue;
        }
        let base = |kc: i64| (kc - r - grid.first_cell()) * p;
        let wy = if d == 2 { wn } else { 1 };
        for j in 0..wy {
            let gy = if d == 2 { (base(k[1]) + j as i64).rem_euclid(n) } else { 0 };
            for i in 0..wn {
                let gx = (base(k[0]) + i as i64).rem_euclid(n);
                let val = u.at([i, j]);
                if val != 0.0 {
                    v[grid.linear([gx as usize, gy as usize])] += omega * val;
                }
            }
        }
    }
    Ok(v)
}

/// Everything needed to assemble `H0`, `H_ω` and `H_{ω,l}` for one model.
#[derive(Debug, Clone)]
pub struct AndersonModel {
    pub v0: PeriodicPotential,
    pub u: SingleSitePotential,
    pub disorder: DisorderModel,
    /// Constant subtracted from the diagonal so that the band edge of interest
    /// sits at zero.
    pub energy_shift: f64,
}

impl AndersonModel {
    pub fn new(v0: PeriodicPotential, u: SingleSitePotential, disorder: DisorderModel) -> Result<Self> {
        if v0.dim() != u.dim() || v0.points_per_cell() != u.points_per_cell() {
            return Err(Error::MeshMismatch("V0 and u sampled on different meshes".into()));
        }
        disorder.validate()?;
        Ok(AndersonModel {
            v0,
            u,
            disorder,
            energy_shift: 0.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.v0.dim()
    }

    pub fn points_per_cell(&self) -> usize {
        self.v0.points_per_cell()
    }

    fn shifted(&self, mut h: AssembledHamiltonian) -> AssembledHamiltonian {
        if self.energy_shift != 0.0 {
            h.matrix = h
                .matrix
                .with_added_diagonal(&vec![-self.energy_shift; h.matrix.dim()]);
        }
        h
    }

    pub fn h0(&self, grid: &GridSpec, bc: BoundaryCondition) -> Result<AssembledHamiltonian> {
        Ok(self.shifted(assemble_h0(grid, &self.v0, bc)?))
    }

    /// Couplings for realization `r` covering every site that touches `grid`.
    pub fn box_sample(&self, grid: &GridSpec, realization: u64) -> Result<DisorderSample> {
        sample_disorder(&self.disorder, contributing_sites(grid, &self.u), realization)
    }

    /// Couplings for realization `r` on the fundamental cell `|k| <= l`.
    pub fn cell_sample(&self, l: usize, realization: u64) -> Result<DisorderSample> {
        sample_disorder(&self.disorder, SiteRange::fundamental(self.dim(), l), realization)
    }

    /// `H_ω` restricted to the box.
    pub fn anderson(&self, grid: &GridSpec, bc: BoundaryCondition, sample: &DisorderSample) -> Result<AssembledHamiltonian> {
        let h0 = assemble_h0(grid, &self.v0, bc)?;
        Ok(self.shifted(assemble_anderson(&h0, &self.u, sample)?))
    }

    /// `H_{ω,l}` on `Λ_{2l+1}` with box phase `bc`.
    pub fn periodic_approx(&self, l: usize, sample: &DisorderSample, bc: BoundaryCondition) -> Result<AssembledHamiltonian> {
        let grid = GridSpec::centered(self.dim(), self.points_per_cell(), l)?;
        Ok(self.shifted(assemble_periodic_approx(&grid, &self.v0, &self.u, sample, bc)?))
    }
}
