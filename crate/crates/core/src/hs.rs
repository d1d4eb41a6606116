//! Almost analytic extensions and the Helffer-Sjöstrand functional calculus
//! for Hermitian matrices.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricTridiagonal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::C64;
use crate::stats::gauss_legendre;

/// `⟨x⟩ = sqrt(x^2 + 1)`.
pub fn bracket(x: f64) -> f64 {
    x.hypot(1.0)
}

/// Points per unit support width used when sup-norms are estimated by sampling.
const SUP_SAMPLES: usize = 20_000;

/// A real `C^k` function with compact support `[a, b]` and derivatives up to
/// `max_order`.
pub trait SmoothCompactFunction: Send + Sync + fmt::Debug {
    fn support(&self) -> (f64, f64);
    fn max_order(&self) -> usize;
    /// `f^{(r)}(x)`; zero outside the support.
    fn derivative(&self, r: usize, x: f64) -> f64;

    fn value(&self, x: f64) -> f64 {
        self.derivative(0, x)
    }

    /// Interior points where the function is only piecewise smooth.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }

    /// `‖f^{(r)}‖_∞` by sampling the support and its breakpoints.
    fn sup_norm(&self, r: usize) -> f64 {
        let (a, b) = self.support();
        if b <= a {
            return 0.0;
        }
        let mut m = 0.0f64;
        for k in 0..=SUP_SAMPLES {
            let x = a + (b - a) * k as f64 / SUP_SAMPLES as f64;
            m = m.max(self.derivative(r, x).abs());
        }
        for x in self.breakpoints() {
            for side in [-1e-14, 0.0, 1e-14] {
                m = m.max(self.derivative(r, x + side * (b - a)).abs());
            }
        }
        m
    }

    /// `|||f|||_n = Σ_{r=0}^{n} ‖f^{(r)}‖_∞`.
    fn seminorm(&self, n: usize) -> f64 {
        (0..=n).map(|r| self.sup_norm(r)).sum()
    }

    fn support_length(&self) -> f64 {
        let (a, b) = self.support();
        (b - a).max(0.0)
    }
}

pub type SharedFunction = Arc<dyn SmoothCompactFunction>;

/// Polynomial in ascending coefficients.
#[derive(Debug, Clone, PartialEq)]
struct Poly(Vec<f64>);

impl Poly {
    fn eval(&self, t: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, c| acc * t + c)
    }

    fn derivative(&self) -> Poly {
        Poly(self.0.iter().enumerate().skip(1).map(|(i, c)| c * i as f64).collect())
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).fold(1.0, |acc, i| acc * i as f64)
}

/// `S_k(t)`: degree `2k+1`, `S(0)=0`, `S(1)=1`, derivatives `1..=k` vanish at both ends.
fn smoothstep(k: usize) -> Poly {
    let mut c = vec![0.0; 2 * k + 2];
    for j in 0..=k {
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        c[k + 1 + j] = sign * binomial(k + j, j) * binomial(2 * k + 1, k - j);
    }
    Poly(c)
}

/// `S_k` together with all of its derivatives.
#[derive(Debug, Clone, PartialEq)]
struct SmoothstepTable(Vec<Poly>);

impl SmoothstepTable {
    fn new(k: usize) -> Self {
        let mut v = vec![smoothstep(k)];
        for _ in 0..=(2 * k + 1) {
            let d = v.last().unwrap().derivative();
            v.push(d);
        }
        SmoothstepTable(v)
    }

    fn eval(&self, r: usize, t: f64) -> f64 {
        self.0.get(r).map_or(0.0, |p| p.eval(t))
    }
}

/// `g ≡ 1` on `[0, E]`, rising on `[-E/2, 0]` and falling on `[E, 3E/2]` with
/// `C^{n+1}` smoothstep shoulders.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    energy: f64,
    order: usize,
    step: SmoothstepTable,
}

pub fn plateau_function(energy: f64, n: usize) -> Result<Plateau> {
    if !(energy > 0.0 && energy.is_finite()) {
        return Err(Error::param("E", "plateau width must be positive"));
    }
    if n < 1 {
        return Err(Error::param("n", "order must be >= 1"));
    }
    Ok(Plateau {
        energy,
        order: n,
        step: SmoothstepTable::new(n + 1),
    })
}

impl Plateau {
    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn order(&self) -> usize {
        self.order
    }
}

impl SmoothCompactFunction for Plateau {
    fn support(&self) -> (f64, f64) {
        (-0.5 * self.energy, 1.5 * self.energy)
    }

    fn max_order(&self) -> usize {
        self.order + 1
    }

    fn derivative(&self, r: usize, x: f64) -> f64 {
        let e = self.energy;
        let w = 0.5 * e;
        let scale = (1.0 / w).powi(r as i32);
        if x <= -w || x >= e + w {
            0.0
        } else if x < 0.0 {
            scale * self.step.eval(r, (x + w) / w)
        } else if x <= e {
            if r == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            let v = scale * self.step.eval(r, (x - e) / w);
            if r == 0 {
                1.0 - v
            } else {
                -v
            }
        }
    }

    fn breakpoints(&self) -> Vec<f64> {
        vec![0.0, self.energy]
    }
}

/// `f(x) = (λ + x)^q g(x)`.
#[derive(Debug, Clone)]
pub struct ShiftedWeight {
    g: SharedFunction,
    lambda: f64,
    q: u32,
}

pub fn shifted_weight(g: SharedFunction, lambda: f64, q: u32) -> Result<ShiftedWeight> {
    if lambda < 0.0 {
        return Err(Error::param("lambda", "shift must be >= 0"));
    }
    let (a, _) = g.support();
    if q > 0 && lambda + a <= 0.0 {
        return Err(Error::param("lambda", format!("λ + x = {} <= 0 on the support", lambda + a)));
    }
    Ok(ShiftedWeight { g, lambda, q })
}

impl ShiftedWeight {
    /// `d^j/dx^j (λ + x)^q`.
    fn weight_derivative(&self, j: usize, x: f64) -> f64 {
        let q = self.q as usize;
        if j > q {
            return 0.0;
        }
        factorial(q) / factorial(q - j) * (self.lambda + x).powi((q - j) as i32)
    }

    /// `C4` with `|||f|||_m <= C4 |||g|||_m`, from Leibniz and the sup of the
    /// weight derivatives over the support.
    pub fn c4(&self, m: usize) -> f64 {
        let (a, b) = self.g.support();
        let sup_w: Vec<f64> = (0..=m)
            .map(|j| self.weight_derivative(j, a).abs().max(self.weight_derivative(j, b).abs()))
            .collect();
        (0..=m)
            .map(|k| (k..=m).map(|r| binomial(r, r - k) * sup_w[r - k]).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

impl SmoothCompactFunction for ShiftedWeight {
    fn support(&self) -> (f64, f64) {
        self.g.support()
    }

    fn max_order(&self) -> usize {
        self.g.max_order()
    }

    fn derivative(&self, r: usize, x: f64) -> f64 {
        (0..=r)
            .map(|j| binomial(r, j) * self.weight_derivative(j, x) * self.g.derivative(r - j, x))
            .sum()
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.g.breakpoints()
    }
}

/// `Σ_i c_i f_i`.
#[derive(Debug, Clone)]
pub struct LinearCombination {
    terms: Vec<(f64, SharedFunction)>,
}

impl LinearCombination {
    pub fn new(terms: Vec<(f64, SharedFunction)>) -> Self {
        LinearCombination { terms }
    }
}

impl SmoothCompactFunction for LinearCombination {
    fn support(&self) -> (f64, f64) {
        self.terms
            .iter()
            .map(|(_, f)| f.support())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (c, d)| (a.min(c), b.max(d)))
    }

    fn max_order(&self) -> usize {
        self.terms.iter().map(|(_, f)| f.max_order()).min().unwrap_or(usize::MAX)
    }

    fn derivative(&self, r: usize, x: f64) -> f64 {
        self.terms.iter().map(|(c, f)| c * f.derivative(r, x)).sum()
    }

    fn breakpoints(&self) -> Vec<f64> {
        // term support ends are interior kinks of the sum
        let mut v: Vec<f64> = self
            .terms
            .iter()
            .flat_map(|(_, f)| {
                let (a, b) = f.support();
                let mut p = f.breakpoints();
                p.extend([a, b]);
                p
            })
            .collect();
        let (a, b) = self.support();
        v.retain(|&p| p > a && p < b);
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }
}

/// The zero function with a nominal support.
#[derive(Debug, Clone, Copy)]
pub struct ZeroFunction {
    pub support: (f64, f64),
}

impl SmoothCompactFunction for ZeroFunction {
    fn support(&self) -> (f64, f64) {
        self.support
    }

    fn max_order(&self) -> usize {
        usize::MAX
    }

    fn derivative(&self, _r: usize, _x: f64) -> f64 {
        0.0
    }
}

/// `t(x) = 1` for `|x| <= 1`, `0` for `|x| >= 2`, smoothstep of the given
/// order in between.
#[derive(Debug, Clone, PartialEq)]
pub struct CutoffFunction {
    order: usize,
    step: SmoothstepTable,
}

/// Derivative bound required of the cutoff.
pub const CUTOFF_SLOPE_BOUND: f64 = 2.0;

impl CutoffFunction {
    pub fn smoothstep(order: usize) -> Result<Self> {
        if order < 1 {
            return Err(Error::param("order", "cutoff order must be >= 1"));
        }
        let t = CutoffFunction {
            order,
            step: SmoothstepTable::new(order),
        };
        let slope = t.max_slope();
        if slope > CUTOFF_SLOPE_BOUND {
            return Err(Error::param(
                "order",
                format!("cutoff slope {slope} exceeds {CUTOFF_SLOPE_BOUND}"),
            ));
        }
        Ok(t)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn value(&self, x: f64) -> f64 {
        let a = x.abs();
        if a <= 1.0 {
            1.0
        } else if a >= 2.0 {
            0.0
        } else {
            1.0 - self.step.eval(0, a - 1.0)
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let a = x.abs();
        if a <= 1.0 || a >= 2.0 {
            0.0
        } else {
            -x.signum() * self.step.eval(1, a - 1.0)
        }
    }

    /// `‖t'‖_∞` by sampling.
    pub fn max_slope(&self) -> f64 {
        (0..=10_000)
            .map(|k| self.derivative(1.0 + k as f64 / 10_000.0).abs())
            .fold(0.0, f64::max)
    }
}

impl Default for CutoffFunction {
    fn default() -> Self {
        CutoffFunction::smoothstep(2).expect("quintic cutoff satisfies the slope bound")
    }
}

/// `f̃_n(x, y) = (Σ_{r<=n} f^{(r)}(x) (iy)^r / r!) t(y / ⟨x⟩)`.
#[derive(Debug, Clone)]
pub struct AlmostAnalyticExtension {
    f: SharedFunction,
    order: usize,
    cutoff: CutoffFunction,
    inv_factorial: Vec<f64>,
}

pub fn extend(f: SharedFunction, n: usize, cutoff: CutoffFunction) -> Result<AlmostAnalyticExtension> {
    if f.max_order() < n + 1 {
        return Err(Error::param(
            "n",
            format!("order {n} needs {} derivatives, function has {}", n + 1, f.max_order()),
        ));
    }
    Ok(AlmostAnalyticExtension {
        f,
        order: n,
        cutoff,
        inv_factorial: (0..=n + 1).map(|r| 1.0 / factorial(r)).collect(),
    })
}

fn ipow(y: f64, r: usize) -> C64 {
    // (iy)^r
    let m = y.powi(r as i32);
    match r % 4 {
        0 => C64::new(m, 0.0),
        1 => C64::new(0.0, m),
        2 => C64::new(-m, 0.0),
        _ => C64::new(0.0, -m),
    }
}

impl AlmostAnalyticExtension {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn function(&self) -> &SharedFunction {
        &self.f
    }

    pub fn cutoff(&self) -> &CutoffFunction {
        &self.cutoff
    }

    /// `s(x, y) = t(y / ⟨x⟩)`.
    pub fn s(&self, x: f64, y: f64) -> f64 {
        self.cutoff.value(y / bracket(x))
    }

    /// `(∂_x s, ∂_y s)`.
    pub fn s_gradient(&self, x: f64, y: f64) -> (f64, f64) {
        let b = bracket(x);
        let tp = self.cutoff.derivative(y / b);
        (-tp * y * x / (b * b * b), tp / b)
    }

    fn taylor(&self, x: f64, y: f64) -> C64 {
        (0..=self.order)
            .map(|r| ipow(y, r) * (self.f.derivative(r, x) * self.inv_factorial[r]))
            .sum()
    }

    pub fn value(&self, x: f64, y: f64) -> C64 {
        let s = self.s(x, y);
        if s == 0.0 {
            return C64::new(0.0, 0.0);
        }
        self.taylor(x, y) * s
    }

    /// `∂f̃/∂z̄ = ½ f^{(n+1)}(iy)^n/n! s + ½ (s_x + i s_y) Σ_r f^{(r)} (iy)^r / r!`.
    pub fn dbar(&self, x: f64, y: f64) -> C64 {
        let n = self.order;
        let s = self.s(x, y);
        let (sx, sy) = self.s_gradient(x, y);
        let mut out = C64::new(0.0, 0.0);
        if s != 0.0 {
            let top = self.f.derivative(n + 1, x) * self.inv_factorial[n];
            out += ipow(y, n) * (0.5 * top * s);
        }
        if sx != 0.0 || sy != 0.0 {
            out += C64::new(0.5 * sx, 0.5 * sy) * self.taylor(x, y);
        }
        out
    }

    /// Right-hand side of the pointwise `∂̄` bound.
    pub fn dbar_bound(&self, x: f64, y: f64) -> f64 {
        let n = self.order;
        let b = bracket(x);
        let ay = y.abs();
        let first = 0.5 * self.inv_factorial[n] * (self.f.derivative(n + 1, x) * self.s(x, y)).abs() * ay.powi(n as i32);
        let second = if b < ay && ay < 2.0 * b {
            3.0 / b
                * (0..=n)
                    .map(|r| self.f.derivative(r, x).abs() * ay.powi(r as i32) * self.inv_factorial[r])
                    .sum::<f64>()
        } else {
            0.0
        };
        first + second
    }

    /// Samples `(x, y, Re f̃, Im f̃, Re ∂̄f̃, Im ∂̄f̃)` on a grid as CSV.
    pub fn write_csv<W: Write>(&self, mut w: W, grid: &SamplingGrid) -> std::io::Result<()> {
        writeln!(w, "x,y,re_ext,im_ext,re_dbar,im_dbar")?;
        for (x, y) in grid.points() {
            let v = self.value(x, y);
            let d = self.dbar(x, y);
            writeln!(w, "{x:.17e},{y:.17e},{:.17e},{:.17e},{:.17e},{:.17e}", v.re, v.im, d.re, d.im)?;
        }
        Ok(())
    }
}

/// Rectangular sample grid including both end points on each axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SamplingGrid {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub nx: usize,
    pub ny: usize,
}

impl SamplingGrid {
    /// `n x n` grid over the support (padded by a quarter of its width) and
    /// `|y| <= 2R + 2`.
    pub fn around(ext: &AlmostAnalyticExtension, n: usize) -> Self {
        let (a, b) = ext.f.support();
        let pad = 0.25 * (b - a);
        let r = a.abs().max(b.abs());
        SamplingGrid {
            x_range: (a - pad, b + pad),
            y_range: (-(2.0 * r + 2.0), 2.0 * r + 2.0),
            nx: n,
            ny: n,
        }
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let lin = |(lo, hi): (f64, f64), n: usize, k: usize| {
            if n <= 1 {
                lo
            } else {
                lo + (hi - lo) * k as f64 / (n - 1) as f64
            }
        };
        (0..self.ny).flat_map(move |j| (0..self.nx).map(move |i| (lin(self.x_range, self.nx, i), lin(self.y_range, self.ny, j))))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DbarViolation {
    pub x: f64,
    pub y: f64,
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DbarBoundReport {
    pub samples: usize,
    pub violations: Vec<DbarViolation>,
    /// `min (rhs - lhs)` over the grid.
    pub min_slack: f64,
    /// Largest `| |∂̄f̃|/|y|^n - |f^{(n+1)}|/(2 n!) |` over samples with `0 < |y| <= 1`.
    pub order_defect: f64,
    pub passed: bool,
}

pub fn dbar_bound_check(ext: &AlmostAnalyticExtension, grid: &SamplingGrid) -> DbarBoundReport {
    let n = ext.order;
    let mut violations = Vec::new();
    let mut min_slack = f64::INFINITY;
    let mut order_defect = 0.0f64;
    let mut samples = 0;
    for (x, y) in grid.points() {
        samples += 1;
        let lhs = ext.dbar(x, y).norm();
        let rhs = ext.dbar_bound(x, y);
        min_slack = min_slack.min(rhs - lhs);
        if lhs > rhs * (1.0 + 1e-12) + f64::MIN_POSITIVE {
            violations.push(DbarViolation { x, y, lhs, rhs });
        }
        if y != 0.0 && y.abs() <= 1.0 {
            let scaled = lhs / y.abs().powi(n as i32);
            let target = ext.f.derivative(n + 1, x).abs() * 0.5 * ext.inv_factorial[n];
            order_defect = order_defect.max((scaled - target).abs());
        }
    }
    DbarBoundReport {
        samples,
        passed: violations.is_empty(),
        violations,
        min_slack,
        order_defect,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureScheme {
    Midpoint,
    GaussPanels,
}

/// Quadrature for the `(x, y)` plane. The integral is taken in `(x, η)` with
/// `y = η ⟨x⟩`, so the cutoff switches on at `η = 1` and vanishes at `η = 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct QuadratureSpec {
    /// Rectangle `[x_lo, x_hi] x [-y_max, y_max]`; `None` uses the support and `2R + 2`.
    pub rectangle: Option<(f64, f64, f64)>,
    /// Panels across the x-support.
    pub x_panels: usize,
    /// Geometric layers `η ∈ [2^{-k-1}, 2^{-k}]` below the cutoff.
    pub y_levels: usize,
    /// Equal panels per geometric layer.
    pub y_subpanels: usize,
    /// Panels on the cutoff strip `η ∈ [1, 2]`.
    pub cutoff_panels: usize,
    /// Nodes per panel and axis.
    pub order: usize,
    /// Half-width of the excluded strip around the real axis.
    pub eps_y: f64,
    pub scheme: QuadratureScheme,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            rectangle: None,
            x_panels: 64,
            y_levels: 12,
            y_subpanels: 2,
            cutoff_panels: 8,
            order: 4,
            eps_y: 0.0,
            scheme: QuadratureScheme::GaussPanels,
        }
    }
}

impl QuadratureSpec {
    /// One refinement step: twice the panels, one more layer.
    pub fn refined(&self) -> Self {
        QuadratureSpec {
            x_panels: 2 * self.x_panels,
            y_levels: self.y_levels + 1,
            y_subpanels: 2 * self.y_subpanels,
            cutoff_panels: 2 * self.cutoff_panels,
            ..*self
        }
    }

    fn validate(&self, f: &dyn SmoothCompactFunction, n: usize) -> Result<()> {
        if self.x_panels < 8 || self.y_levels < 8 {
            return Err(Error::param("quadrature", "resolution must be >= 8 per axis"));
        }
        if self.order < 1 || self.cutoff_panels < 1 || self.y_subpanels < 1 {
            return Err(Error::param("quadrature", "order and cutoff panels must be >= 1"));
        }
        if !(self.eps_y >= 0.0) {
            return Err(Error::param("eps_y", "must be >= 0"));
        }
        if self.eps_y == 0.0 && n < 2 {
            return Err(Error::param("n", "eps_y = 0 needs n >= 2"));
        }
        if let Some((lo, hi, ymax)) = self.rectangle {
            let (a, b) = f.support();
            let r = a.abs().max(b.abs());
            if lo > a || hi < b || ymax < 2.0 * r + 2.0 {
                return Err(Error::param(
                    "rectangle",
                    format!("[{lo}, {hi}] x [-{ymax}, {ymax}] does not cover [{a}, {b}] x [-{0}, {0}]", 2.0 * r + 2.0),
                ));
            }
        }
        Ok(())
    }

    fn rule(&self) -> (Vec<f64>, Vec<f64>) {
        match self.scheme {
            QuadratureScheme::GaussPanels => {
                let (x, w) = gauss_legendre(self.order);
                (x.iter().map(|t| 0.5 * (t + 1.0)).collect(), w.iter().map(|v| 0.5 * v).collect())
            }
            QuadratureScheme::Midpoint => {
                let q = self.order;
                ((0..q).map(|i| (i as f64 + 0.5) / q as f64).collect(), vec![1.0 / q as f64; q])
            }
        }
    }

    /// `x` panels honouring the breakpoints of `f`.
    fn x_panels_for(&self, f: &dyn SmoothCompactFunction) -> Vec<(f64, f64)> {
        let (a, b) = f.support();
        let mut cuts: Vec<f64> = vec![a];
        cuts.extend(f.breakpoints().into_iter().filter(|&p| p > a && p < b));
        cuts.push(b);
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let total = b - a;
        let mut panels = Vec::new();
        for w in cuts.windows(2) {
            let len = w[1] - w[0];
            // narrow pieces carry the steepest derivatives
            let m = ((self.x_panels as f64 * len / total).round() as usize).max(self.x_panels / 4);
            for k in 0..m {
                panels.push((w[0] + len * k as f64 / m as f64, w[0] + len * (k + 1) as f64 / m as f64));
            }
        }
        panels
    }

    /// `η` panels on `(0, 2]`: geometric layers, a bottom panel and the cutoff strip.
    fn eta_panels(&self) -> Vec<(f64, f64)> {
        let mut p = Vec::new();
        let floor = 0.5f64.powi(self.y_levels as i32);
        p.push((0.0, floor));
        let m = self.y_subpanels as f64;
        for k in (0..self.y_levels).rev() {
            let (lo, hi) = (0.5f64.powi(k as i32 + 1), 0.5f64.powi(k as i32));
            for j in 0..self.y_subpanels {
                let j = j as f64;
                p.push((lo + (hi - lo) * j / m, lo + (hi - lo) * (j + 1.0) / m));
            }
        }
        for k in 0..self.cutoff_panels {
            let c = self.cutoff_panels as f64;
            p.push((1.0 + k as f64 / c, 1.0 + (k + 1) as f64 / c));
        }
        p
    }

    /// Nodes `(x, y, weight)` over `y > 0`, weights including the Jacobian `⟨x⟩`.
    pub fn upper_half_nodes(&self, f: &dyn SmoothCompactFunction) -> Vec<Vec<(f64, f64, f64)>> {
        let (t, w) = self.rule();
        let eta = self.eta_panels();
        self.x_panels_for(f)
            .into_iter()
            .map(|(x0, x1)| {
                let mut nodes = Vec::new();
                for (tx, wx) in t.iter().zip(&w) {
                    let x = x0 + (x1 - x0) * tx;
                    let b = bracket(x);
                    let eta_min = self.eps_y / b;
                    for &(e0, e1) in &eta {
                        let lo = e0.max(eta_min);
                        if lo >= e1 {
                            continue;
                        }
                        for (te, we) in t.iter().zip(&w) {
                            let e = lo + (e1 - lo) * te;
                            nodes.push((x, e * b, wx * (x1 - x0) * we * (e1 - lo) * b));
                        }
                    }
                }
                nodes
            })
            .collect()
    }
}

/// Unitary `Q` and Hermitian tridiagonal `T = Q^* A Q` (complex entries kept).
struct Tridiagonal {
    q: DMatrix<C64>,
    diag: Vec<C64>,
    upper: Vec<C64>,
    lower: Vec<C64>,
}

fn tridiagonalize(a: &DMatrix<C64>) -> Result<Tridiagonal> {
    let n = a.nrows();
    if n == 0 {
        return Ok(Tridiagonal {
            q: DMatrix::zeros(0, 0),
            diag: vec![],
            upper: vec![],
            lower: vec![],
        });
    }
    let q = SymmetricTridiagonal::new(a.clone()).q();
    let t = q.adjoint() * a * &q;
    let scale = a.iter().map(|v| v.norm()).fold(0.0, f64::max).max(1.0);
    for j in 0..n {
        for i in 0..n {
            if i.abs_diff(j) > 1 && t[(i, j)].norm() > 1e-10 * scale {
                return Err(Error::Numerical("tridiagonal reduction lost accuracy".into()));
            }
        }
    }
    Ok(Tridiagonal {
        diag: (0..n).map(|i| t[(i, i)]).collect(),
        upper: (0..n - 1).map(|i| t[(i, i + 1)]).collect(),
        lower: (0..n - 1).map(|i| t[(i + 1, i)]).collect(),
        q,
    })
}

impl Tridiagonal {
    /// Adds `w (z - T)^{-1}` to `acc` by column-wise Thomas solves.
    fn accumulate_resolvent(&self, z: C64, w: C64, acc: &mut DMatrix<C64>, work: &mut [C64]) -> Result<()> {
        let n = self.diag.len();
        // LU of z - T: pivots p_i, multipliers m_i
        let (piv, mult) = work.split_at_mut(n);
        piv[0] = z - self.diag[0];
        for i in 1..n {
            if piv[i - 1].norm() == 0.0 {
                return Err(Error::Numerical(format!("singular resolvent at z = {z}")));
            }
            mult[i - 1] = -self.lower[i - 1] / piv[i - 1];
            piv[i] = z - self.diag[i] - mult[i - 1] * (-self.upper[i - 1]);
        }
        if piv[n - 1].norm() == 0.0 {
            return Err(Error::Numerical(format!("singular resolvent at z = {z}")));
        }
        let mut x = vec![C64::new(0.0, 0.0); n];
        for j in 0..n {
            // forward: L y = e_j, y_i = 0 for i < j
            for v in x.iter_mut().take(j) {
                *v = C64::new(0.0, 0.0);
            }
            x[j] = C64::new(1.0, 0.0);
            for i in j + 1..n {
                x[i] = -mult[i - 1] * x[i - 1];
            }
            // backward: U x = y
            x[n - 1] /= piv[n - 1];
            for i in (0..n - 1).rev() {
                x[i] = (x[i] + self.upper[i] * x[i + 1]) / piv[i];
            }
            for i in 0..n {
                acc[(i, j)] += w * x[i];
            }
        }
        Ok(())
    }
}

/// Hermitian part `(M + M^*)/2`.
pub fn hermitian_part(m: &DMatrix<C64>) -> DMatrix<C64> {
    (m + m.adjoint()) * C64::new(0.5, 0.0)
}

/// `f(A) = U f(Λ) U^*` by eigendecomposition.
pub fn matrix_function_spectral(a: &DMatrix<C64>, f: &dyn SmoothCompactFunction) -> Result<DMatrix<C64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::param("A", "matrix must be square"));
    }
    let eig = a.clone().symmetric_eigen();
    let fl = DMatrix::from_diagonal(&eig.eigenvalues.map(|e| C64::new(f.value(e), 0.0)));
    Ok(&eig.eigenvectors * fl * eig.eigenvectors.adjoint())
}

/// `f(A) = -(1/π) ∬ ∂̄f̃(z) (z - A)^{-1} dx dy` by quadrature; the `y < 0` half
/// is the adjoint of the `y > 0` half for real `f`.
pub fn matrix_function_hs(
    a: &DMatrix<C64>,
    f: SharedFunction,
    n: usize,
    quad: &QuadratureSpec,
) -> Result<DMatrix<C64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::param("A", "matrix must be square"));
    }
    let dim = a.nrows();
    let herm_defect = (a - a.adjoint()).iter().map(|v| v.norm()).fold(0.0, f64::max);
    if herm_defect > 1e-10 * a.iter().map(|v| v.norm()).fold(1.0, f64::max) {
        return Err(Error::param("A", "matrix is not Hermitian"));
    }
    quad.validate(f.as_ref(), n)?;
    let ext = extend(f.clone(), n, CutoffFunction::default())?;
    let tri = tridiagonalize(a)?;
    let panels = quad.upper_half_nodes(f.as_ref());
    let partials: Vec<DMatrix<C64>> = panels
        .par_iter()
        .map(|nodes| {
            let mut acc = DMatrix::<C64>::zeros(dim, dim);
            let mut work = vec![C64::new(0.0, 0.0); 2 * dim];
            for &(x, y, w) in nodes {
                let d = ext.dbar(x, y);
                if d.re == 0.0 && d.im == 0.0 {
                    continue;
                }
                tri.accumulate_resolvent(C64::new(x, y), d * w, &mut acc, &mut work)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut sum = DMatrix::<C64>::zeros(dim, dim);
    for p in &partials {
        sum += p;
    }
    let full = &tri.q * sum * tri.q.adjoint();
    Ok(hermitian_part(&full) * C64::new(-2.0 / PI, 0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LemmaRow {
    pub l: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LemmaReport {
    pub dim: usize,
    pub order: usize,
    pub decay: f64,
    pub rows: Vec<LemmaRow>,
    /// Smallest listed `l` from which the inequality holds for every larger listed `l`.
    pub onset: Option<usize>,
}

/// `∬ |∂̄f̃| |y|^{-2d-2} e^{-C3 |y| l} dx dy <= 2 C3^{-n+2d+2} |||f|||_{n+1} |supp f| l^{-n+2d+1}`.
pub fn lemma_integral_check(
    f: SharedFunction,
    n: usize,
    decay: f64,
    dim: usize,
    ls: &[usize],
) -> Result<LemmaReport> {
    if !(1..=2).contains(&dim) {
        return Err(Error::param("dim", "d in {1,2}"));
    }
    if n < 2 * dim + 2 {
        return Err(Error::param("n", format!("n = {n} < 2d + 2 = {}", 2 * dim + 2)));
    }
    if !(decay > 0.0) {
        return Err(Error::param("C3", "decay must be positive"));
    }
    let (a, b) = f.support();
    if a < -0.5 || b > 0.5 {
        return Err(Error::param("f", format!("support [{a}, {b}] not inside [-1/2, 1/2]")));
    }
    let ext = extend(f.clone(), n, CutoffFunction::default())?;
    let spec = QuadratureSpec {
        x_panels: 512,
        y_levels: 40,
        cutoff_panels: 8,
        order: 6,
        ..QuadratureSpec::default()
    };
    let nodes: Vec<(f64, f64, f64)> = spec
        .upper_half_nodes(f.as_ref())
        .into_iter()
        .flatten()
        .map(|(x, y, w)| (y, w, ext.dbar(x, y).norm()))
        .collect();
    let p = 2 * dim + 2;
    let norm = f.seminorm(n + 1);
    let supp = f.support_length();
    let rows = ls
        .iter()
        .map(|&l| {
            let lf = l as f64;
            let lhs: f64 = 2.0
                * nodes
                    .iter()
                    .map(|&(y, w, d)| if d == 0.0 { 0.0 } else { w * d * y.powi(-(p as i32)) * (-decay * y * lf).exp() })
                    .sum::<f64>();
            let expo = n as i32 - p as i32;
            let rhs = 2.0 * decay.powi(-expo) * norm * supp * lf.powi(-expo - 1);
            LemmaRow {
                l,
                lhs,
                rhs,
                holds: lhs <= rhs,
            }
        })
        .collect::<Vec<_>>();
    let mut onset = None;
    for (i, r) in rows.iter().enumerate().rev() {
        if r.holds {
            onset = Some(rows[i].l);
        } else {
            break;
        }
    }
    Ok(LemmaReport {
        dim,
        order: n,
        decay,
        rows,
        onset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plateau(e: f64, n: usize) -> SharedFunction {
        Arc::new(plateau_function(e, n).unwrap())
    }

    #[test]
    fn bracket_examples() {
        assert_eq!(bracket(0.0), 1.0);
        assert!((bracket(3f64.sqrt()) - 2.0).abs() < 1e-15);
        for k in -50..50 {
            let x = k as f64 * 0.37;
            assert!(bracket(x) >= x.abs().max(1.0));
        }
    }

    #[test]
    fn smoothstep_endpoint_conditions() {
        for k in 1..7 {
            let t = SmoothstepTable::new(k);
            assert!(t.eval(0, 0.0).abs() < 1e-12);
            assert!((t.eval(0, 1.0) - 1.0).abs() < 1e-9);
            for r in 1..=k {
                assert!(t.eval(r, 0.0).abs() < 1e-9);
                assert!(t.eval(r, 1.0).abs() < 1e-6 * t.eval(r, 0.5).abs().max(1.0), "k={k} r={r}");
            }
        }
    }

    #[test]
    fn plateau_examples() {
        let e = 0.8;
        let g = plateau_function(e, 3).unwrap();
        assert_eq!(g.value(e / 2.0), 1.0);
        assert_eq!(g.value(-e / 2.0), 0.0);
        assert_eq!(g.value(2.0 * e), 0.0);
        for k in 0..=400 {
            let x = -e + 3.0 * e * k as f64 / 400.0;
            let v = g.value(x);
            assert!((0.0..=1.0 + 1e-12).contains(&v));
        }
    }

    #[test]
    fn cutoff_properties() {
        let t = CutoffFunction::default();
        assert_eq!(t.value(0.99), 1.0);
        assert_eq!(t.value(-2.01), 0.0);
        assert!((t.max_slope() - 15.0 / 8.0).abs() < 1e-6);
        assert!(CutoffFunction::smoothstep(3).is_err());
    }

    #[test]
    fn extension_examples() {
        let g = plateau(1.0, 3);
        let ext = extend(g.clone(), 3, CutoffFunction::default()).unwrap();
        for &x in &[-0.3, 0.2, 1.1, 1.4] {
            assert_eq!(ext.value(x, 0.0).re, g.value(x));
            assert_eq!(ext.value(x, 0.0).im, 0.0);
        }
        for &y in &[-3.0, 0.1, 2.0] {
            assert_eq!(ext.value(2.0, y), C64::new(0.0, 0.0));
            assert_eq!(ext.dbar(-0.9, y), C64::new(0.0, 0.0));
        }
        assert!(extend(g, 5, CutoffFunction::default()).is_err());
    }

    #[derive(Debug)]
    struct Affine;
    impl SmoothCompactFunction for Affine {
        fn support(&self) -> (f64, f64) {
            (-1.0, 1.0)
        }
        fn max_order(&self) -> usize {
            3
        }
        fn derivative(&self, r: usize, x: f64) -> f64 {
            match r {
                0 => 1.0 + 0.5 * x,
                1 => 0.5,
                _ => 0.0,
            }
        }
    }

    #[test]
    fn first_order_extension_is_linear_in_iy() {
        let ext = extend(Arc::new(Affine), 1, CutoffFunction::default()).unwrap();
        let v = ext.value(0.0, 0.3);
        assert!((v - C64::new(1.0, 0.15)).norm() < 1e-15);
    }

    #[test]
    fn dbar_matches_finite_differences() {
        let ext = extend(plateau(1.0, 4), 4, CutoffFunction::default()).unwrap();
        let h = 1e-5;
        for &(x, y) in &[(-0.3, 0.4), (1.2, 0.9), (0.7, 1.5), (-0.2, 1.7), (1.3, -2.2)] {
            let dx = (ext.value(x + h, y) - ext.value(x - h, y)) / (2.0 * h);
            let dy = (ext.value(x, y + h) - ext.value(x, y - h)) / (2.0 * h);
            let fd = (dx + C64::new(0.0, 1.0) * dy) * 0.5;
            let d = ext.dbar(x, y);
            assert!((fd - d).norm() < 1e-5 * (1.0 + d.norm()), "({x},{y}) {fd} vs {d}");
        }
    }

    #[test]
    fn bound_check_passes_for_plateau() {
        let ext = extend(plateau(0.5, 3), 3, CutoffFunction::default()).unwrap();
        let r = dbar_bound_check(&ext, &SamplingGrid::around(&ext, 200));
        assert!(r.passed, "{:?}", r.violations.first());
        assert_eq!(r.samples, 40_000);
        assert!(r.order_defect < 1e-8);
    }

    #[test]
    fn shifted_weight_examples() {
        let g = plateau(1.0, 3);
        let f0 = shifted_weight(g.clone(), 0.7, 0).unwrap();
        for &x in &[-0.4, 0.1, 1.3] {
            for r in 0..4 {
                assert_eq!(f0.derivative(r, x), g.derivative(r, x));
            }
        }
        let f = shifted_weight(g.clone(), 1.0, 2).unwrap();
        let x0 = 0.4;
        assert!((f.value(x0) - 1.4f64.powi(2)).abs() < 1e-14);
        assert!((f.derivative(1, x0) - 2.0 * 1.4).abs() < 1e-14);
        let h = 1e-4;
        for &x in &[-0.3, 1.2] {
            for r in 0..3 {
                let fd = (f.derivative(r, x + h) - f.derivative(r, x - h)) / (2.0 * h);
                assert!((fd - f.derivative(r + 1, x)).abs() < 1e-4 * (1.0 + fd.abs()));
            }
        }
        assert!(f.seminorm(4) <= f.c4(4) * g.seminorm(4));
        assert!(shifted_weight(g, 0.2, 2).is_err());
    }

    #[test]
    fn lemma_rejects_low_order() {
        assert!(lemma_integral_check(plateau(0.2, 3), 3, 1.0, 1, &[8]).is_err());
    }
}
