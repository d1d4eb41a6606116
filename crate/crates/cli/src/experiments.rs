//! Dispatch from a validated config to the core computations. Every
//! experiment returns its payload in memory; the runner writes it out.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use lifshitz_core::floquet::{
    brillouin_zone, check_regularity, compute_bands, estimate_lipschitz, find_band_edges, h0_factory, EdgeKind,
    HamiltonianBands, DEFAULT_FD_STEP,
};
use lifshitz_core::hs::{
    dbar_bound_check, extend, matrix_function_hs, matrix_function_spectral, plateau_function, CutoffFunction,
    QuadratureSpec, SamplingGrid, SharedFunction,
};
use lifshitz_core::ids::{
    average_ids, energy_grid, ids_difference_experiment, ids_dirichlet_box, ids_periodic_approx, lifshitz_fit,
    DecayOptions, IdsCurve, DEFAULT_MASS_WINDOW, DEFAULT_THETA_RESOLUTION,
};
use lifshitz_core::lattice::{AndersonModel, BoundaryCondition, GridSpec};
use lifshitz_core::linalg::{operator_norm, random_hermitian, C64};
use lifshitz_core::probes::{
    band_lipschitz, combes_thomas_profile, fixed_theta_check, gap_probability, m_regularity_test, msa_schedule,
    theta_average_check, GapBoundary, MsaConstants, DEFAULT_EPS_PROBES, EDGE_RESOLUTION,
};
use lifshitz_core::Error;

use crate::config::{build_model, BoxBoundary, Experiment, ExperimentConfig, GapBoundaryConfig, IdsMethod};

/// Files of one run plus the outcome of any built-in check.
#[derive(Debug, Clone, PartialEq)]
pub struct Payload {
    pub files: Vec<(String, Vec<u8>)>,
    pub summary: String,
    /// `Some(false)` when an inequality or tolerance check failed.
    pub check_passed: Option<bool>,
}

impl Payload {
    fn new(summary: String) -> Self {
        Payload {
            files: Vec::new(),
            summary,
            check_passed: None,
        }
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) {
        let mut bytes = serde_json::to_vec_pretty(value).expect("payload serializes");
        bytes.push(b'\n');
        self.files.push((name.to_string(), bytes));
    }

    fn csv(&mut self, name: &str, write: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) {
        let mut buf = Vec::new();
        write(&mut buf).expect("writing to memory");
        self.files.push((name.to_string(), buf));
    }

    pub fn file(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|f| f.0 == name).map(|f| f.1.as_slice())
    }
}

fn seed(cfg: &ExperimentConfig) -> u64 {
    cfg.execution.seed.unwrap_or(0)
}

fn samples(cfg: &ExperimentConfig) -> usize {
    cfg.execution.samples.unwrap_or(1)
}

fn model(cfg: &ExperimentConfig) -> Result<AndersonModel, Error> {
    let m = cfg
        .model
        .as_ref()
        .ok_or_else(|| Error::param("model", "missing"))?;
    build_model(m, seed(cfg))
}

fn box_bc(b: BoxBoundary) -> BoundaryCondition {
    match b {
        BoxBoundary::Dirichlet => BoundaryCondition::Dirichlet,
        BoxBoundary::Periodic => BoundaryCondition::Periodic,
        BoxBoundary::Theta { theta } => BoundaryCondition::Theta(theta),
    }
}

fn plateau(energy: f64, order: usize) -> Result<SharedFunction, Error> {
    Ok(Arc::new(plateau_function(energy, order)?))
}

pub fn execute(cfg: &ExperimentConfig) -> Result<Payload, Error> {
    match &cfg.experiment {
        Experiment::Bandstructure {
            l,
            resolution,
            num_bands,
            gap_tolerance,
            lipschitz_window,
        } => bandstructure(cfg, *l, *resolution, *num_bands, gap_tolerance.unwrap_or(1e-8), *lipschitz_window),
        Experiment::Ids {
            method,
            half_width,
            energy_min,
            energy_max,
            energy_points,
            theta_resolution,
        } => ids(
            cfg,
            *method,
            *half_width,
            &energy_grid(*energy_min, *energy_max, *energy_points),
            theta_resolution.unwrap_or(DEFAULT_THETA_RESOLUTION),
        ),
        Experiment::Lifshitz {
            half_width,
            energy_min,
            energy_max,
            energy_points,
            edge,
            mass_window,
        } => lifshitz(
            cfg,
            *half_width,
            &energy_grid(*energy_min, *energy_max, *energy_points),
            edge.unwrap_or(0.0),
            mass_window.map_or(DEFAULT_MASS_WINDOW, |w| (w[0], w[1])),
        ),
        Experiment::IdsDiff {
            ls,
            plateau_energy,
            plateau_order,
            reference_half_width,
            reference_samples,
            theta_resolution,
        } => {
            let m = model(cfg)?;
            let g = plateau_function(*plateau_energy, *plateau_order)?;
            let mut opts = DecayOptions::new(samples(cfg), *reference_half_width);
            opts.reference_samples = *reference_samples;
            opts.theta_resolution = theta_resolution.unwrap_or(DEFAULT_THETA_RESOLUTION);
            let table = ids_difference_experiment(&m, &g, ls, &opts)?;
            let first = table.rows.first().map_or(f64::NAN, |r| r.delta);
            let last = table.rows.last().map_or(f64::NAN, |r| r.delta);
            let mut p = Payload::new(format!(
                "ids-diff: Δ from {first:.3e} to {last:.3e}, decreasing beyond floor: {}",
                table.decreasing_beyond_floor()
            ));
            p.csv("decay.csv", |w| table.write_csv(w, &[]));
            p.json(
                "decay.json",
                &json!({ "table": table, "decreasing_beyond_floor": table.decreasing_beyond_floor() }),
            );
            Ok(p)
        }
        Experiment::HsCheck {
            matrices,
            matrix_dim,
            plateau_energy,
            plateau_order,
            tolerance,
            scheme,
            dbar_grid,
        } => hs_check(
            cfg,
            *matrices,
            *matrix_dim,
            *plateau_energy,
            *plateau_order,
            *tolerance,
            *scheme,
            dbar_grid.unwrap_or(200),
        ),
        Experiment::CtDecay {
            cells,
            z_re,
            z_im,
            anchor,
            max_distance,
            boundary,
        } => {
            let m = model(cfg)?;
            let grid = GridSpec::with_cells(m.dim(), m.points_per_cell(), *cells)?;
            let h = m.h0(&grid, box_bc(*boundary))?;
            let prof = combes_thomas_profile(&h, C64::new(*z_re, *z_im), anchor.unwrap_or([0, 0]), *max_distance)?;
            let mut p = Payload::new(format!(
                "ct-decay: rate {:.6} (R² {:.6}) at dist {:.4}",
                prof.fit.rate, prof.fit.r_squared, prof.distance_to_spectrum
            ));
            p.check_passed = Some(prof.fit.rate > 0.0);
            p.csv("profile.csv", |w| prof.write_csv(w));
            p.json("profile.json", &prof);
            Ok(p)
        }
        Experiment::GapProb { ls, alpha, boundary } => {
            let m = model(cfg)?;
            let b = match boundary {
                GapBoundaryConfig::Periodic => GapBoundary::Periodic,
                GapBoundaryConfig::Quasimomentum { theta } => GapBoundary::Quasimomentum(*theta),
            };
            let ests = ls
                .iter()
                .map(|&l| gap_probability(&m, l, *alpha, b, samples(cfg)))
                .collect::<Result<Vec<_>, _>>()?;
            let mut p = Payload::new(format!(
                "gap-prob: {}",
                ests.iter()
                    .map(|e| format!("l={} p={:.4} [{:.4}, {:.4}]", e.l, e.estimate, e.interval.0, e.interval.1))
                    .collect::<Vec<_>>()
                    .join("; ")
            ));
            p.csv("gap.csv", |w| {
                use std::io::Write;
                writeln!(w, "l,alpha,window,samples,hits,estimate,wilson_lo,wilson_hi")?;
                for e in &ests {
                    writeln!(
                        w,
                        "{},{:.17e},{:.17e},{},{},{:.17e},{:.17e},{:.17e}",
                        e.l, e.alpha, e.window, e.samples, e.hits, e.estimate, e.interval.0, e.interval.1
                    )?;
                }
                Ok(())
            });
            p.json("gap.json", &json!({ "energy_shift": m.energy_shift, "estimates": ests }));
            Ok(p)
        }
        Experiment::ThetaBounds {
            l,
            energy_average,
            energy_fixed,
            theta0,
            theta_resolution,
            xi,
        } => {
            let m = model(cfg)?;
            let res = theta_resolution.unwrap_or(DEFAULT_THETA_RESOLUTION);
            let xi = match xi {
                Some(x) => *x,
                None => band_lipschitz(&m, (0.0, 1.0), 4 * EDGE_RESOLUTION)?,
            };
            let avg = theta_average_check(&m, *l, *energy_average, samples(cfg), res)?;
            let fixed = fixed_theta_check(&m, *l, *energy_fixed, *theta0, samples(cfg), xi, res)?;
            let mut p = Payload::new(format!(
                "theta-bounds: averaged {} (slack {:.3e}), fixed {} (slack {:.3e})",
                if avg.holds { "holds" } else { "FAILS" },
                avg.slack,
                if fixed.holds { "holds" } else { "FAILS" },
                fixed.slack
            ));
            p.check_passed = Some(avg.holds && fixed.holds);
            p.json("bounds.json", &json!({ "xi": xi, "theta_average": avg, "fixed_theta": fixed }));
            Ok(p)
        }
        Experiment::MsaSchedule {
            l0,
            m0,
            q0,
            zeta,
            steps,
            c1,
            c2,
            c3,
            xi,
            dim,
        } => {
            let s = msa_schedule(
                *l0,
                *m0,
                *q0,
                *zeta,
                *steps,
                MsaConstants {
                    c1: *c1,
                    c2: *c2,
                    c3: *c3,
                    xi: *xi,
                    dim: *dim,
                },
            )?;
            let mut p = Payload::new(format!(
                "msa-schedule: l = {:?}, m_J/m_0 = {:.6}, lower bound {:.6e}",
                &s.lengths[..s.lengths.len().min(4)],
                s.mass_ratios.last().copied().unwrap_or(1.0),
                s.mass_lower_bound
            ));
            p.csv("schedule.csv", |w| s.write_csv(w));
            p.json("schedule.json", &s);
            Ok(p)
        }
        Experiment::MRegularity {
            l,
            energy,
            delta,
            mass,
            eps_probes,
            alpha,
        } => m_regularity(cfg, *l, *energy, *delta, *mass, eps_probes.as_deref(), *alpha),
    }
}

fn bandstructure(
    cfg: &ExperimentConfig,
    l: usize,
    resolution: usize,
    num_bands: usize,
    gap_tolerance: f64,
    lipschitz_window: Option<[f64; 2]>,
) -> Result<Payload, Error> {
    let m = model(cfg)?;
    let zone = brillouin_zone(l, m.dim())?;
    let shift = m.energy_shift;
    let factory = h0_factory(&m.v0, zone)?;
    let shifted = move |t: [f64; 2]| {
        let mut h = factory(t)?;
        if shift != 0.0 {
            h.matrix = h.matrix.with_added_diagonal(&vec![-shift; h.matrix.dim()]);
        }
        Ok(h)
    };
    let bands = compute_bands(&shifted, zone, resolution, num_bands)?;
    let edges = find_band_edges(&bands, gap_tolerance);
    let source = HamiltonianBands::new(m.dim(), num_bands, &shifted);
    let lower: Vec<f64> = edges.iter().filter(|e| e.kind == EdgeKind::Lower).map(|e| e.energy).collect();
    let regularity = match lower.first() {
        Some(&e) => Some(check_regularity(&bands, &source, e, DEFAULT_FD_STEP)?),
        None => None,
    };
    let lipschitz = match lipschitz_window {
        Some([a, b]) => Some(estimate_lipschitz(&bands, (a, b))?),
        None => None,
    };
    let mut p = Payload::new(format!(
        "bandstructure: {} bands, {} edges, lowest edge regular: {}",
        bands.num_bands,
        edges.len(),
        regularity.as_ref().is_some_and(|r| r.regular)
    ));
    p.csv("bands.csv", |w| bands.write_csv(w));
    p.json(
        "bands.json",
        &json!({
            "energy_shift": shift,
            "edges": edges,
            "regularity": regularity,
            "lipschitz": lipschitz,
        }),
    );
    Ok(p)
}

fn ids(cfg: &ExperimentConfig, method: IdsMethod, l: usize, energies: &[f64], res: usize) -> Result<Payload, Error> {
    let m = model(cfg)?;
    let curves: Vec<IdsCurve> = (0..samples(cfg) as u64)
        .into_par_iter()
        .map(|r| match method {
            IdsMethod::Dirichlet => {
                let grid = GridSpec::centered(m.dim(), m.points_per_cell(), l)?;
                let sample = m.box_sample(&grid, r)?;
                ids_dirichlet_box(&m.anderson(&grid, BoundaryCondition::Dirichlet, &sample)?, energies)
            }
            IdsMethod::Periodic => {
                let sample = m.cell_sample(l, r)?;
                ids_periodic_approx(&m, &sample, l, energies, res)
            }
        })
        .collect::<Result<_, _>>()?;
    let avg = average_ids(&curves)?;
    let mut p = Payload::new(format!("ids: {} samples on {} energies", avg.samples, avg.energies.len()));
    p.csv("ids.csv", |w| avg.write_csv(w, &[("energy_shift", format!("{:.17e}", m.energy_shift))]));
    Ok(p)
}

fn lifshitz(
    cfg: &ExperimentConfig,
    l: usize,
    energies: &[f64],
    edge: f64,
    window: (f64, f64),
) -> Result<Payload, Error> {
    let m = model(cfg)?;
    let grid = GridSpec::centered(m.dim(), m.points_per_cell(), l)?;
    let curves: Vec<IdsCurve> = (0..samples(cfg) as u64)
        .into_par_iter()
        .map(|r| {
            let sample = m.box_sample(&grid, r)?;
            ids_dirichlet_box(&m.anderson(&grid, BoundaryCondition::Dirichlet, &sample)?, energies)
        })
        .collect::<Result<_, _>>()?;
    let avg = average_ids(&curves)?;
    let fit = lifshitz_fit(&avg, edge, window, m.dim())?;
    let mut p = Payload::new(format!(
        "lifshitz: κ = {:.4} ± {:.4} (target {}), lifshitz-like: {}",
        fit.kappa, fit.half_width, fit.target, fit.lifshitz_like
    ));
    p.csv("ids.csv", |w| avg.write_csv(w, &[("energy_shift", format!("{:.17e}", m.energy_shift))]));
    p.json("fit.json", &fit);
    Ok(p)
}

#[derive(Debug, Serialize)]
struct HsRow {
    seed: u64,
    error_default: f64,
    error_refined: f64,
    ratio: f64,
}

#[allow(clippy::too_many_arguments)]
fn hs_check(
    cfg: &ExperimentConfig,
    matrices: usize,
    dim: usize,
    energy: f64,
    order: usize,
    tolerance: f64,
    scheme: Option<lifshitz_core::hs::QuadratureScheme>,
    dbar_grid: usize,
) -> Result<Payload, Error> {
    let g = plateau(energy, order)?;
    let mut quad = QuadratureSpec::default();
    if let Some(s) = scheme {
        quad.scheme = s;
    }
    let refined = quad.refined();
    let base = seed(cfg);
    let mut rows = Vec::with_capacity(matrices);
    for k in 0..matrices as u64 {
        let a = random_hermitian(dim, base.wrapping_add(k));
        let exact = matrix_function_spectral(&a, g.as_ref())?;
        let e0 = operator_norm(&(matrix_function_hs(&a, g.clone(), order, &quad)? - &exact));
        let e1 = operator_norm(&(matrix_function_hs(&a, g.clone(), order, &refined)? - &exact));
        rows.push(HsRow {
            seed: base.wrapping_add(k),
            error_default: e0,
            error_refined: e1,
            ratio: e0 / e1,
        });
    }
    let ext = extend(g.clone(), order, CutoffFunction::default())?;
    let dbar = dbar_bound_check(&ext, &SamplingGrid::around(&ext, dbar_grid));
    let worst = rows.iter().map(|r| r.error_default).fold(0.0, f64::max);
    let min_ratio = rows.iter().map(|r| r.ratio).fold(f64::INFINITY, f64::min);
    let passed = worst <= tolerance && min_ratio >= 4.0 && dbar.passed;
    let mut p = Payload::new(format!(
        "hs-check: worst error {worst:.3e} (tol {tolerance:e}), min refinement ratio {min_ratio:.1}, ∂̄ violations {}",
        dbar.violations.len()
    ));
    p.check_passed = Some(passed);
    p.json(
        "hs.json",
        &json!({
            "quadrature": quad,
            "rows": rows,
            "worst_error": worst,
            "min_ratio": min_ratio,
            "dbar": dbar,
            "passed": passed,
        }),
    );
    Ok(p)
}

#[derive(Debug, Serialize)]
struct RegularityRow {
    realization: u64,
    sup_norm: f64,
    passed: bool,
    gap_hit: Option<bool>,
}

fn m_regularity(
    cfg: &ExperimentConfig,
    l: usize,
    energy: f64,
    delta: f64,
    mass: f64,
    eps: Option<&[f64]>,
    alpha: Option<f64>,
) -> Result<Payload, Error> {
    let m = model(cfg)?;
    let probes = eps.map_or(DEFAULT_EPS_PROBES.to_vec(), <[f64]>::to_vec);
    let half = (l - 1) / 2;
    let window = alpha.map(|a| (l as f64).powf(-a));
    let rows: Vec<(RegularityRow, Option<lifshitz_core::probes::RegularityTestResult>)> = (0..samples(cfg) as u64)
        .into_par_iter()
        .map(|r| {
            let sample = m.cell_sample(half, r)?;
            let h = m.periodic_approx(half, &sample, BoundaryCondition::Periodic)?;
            let res = m_regularity_test(&h, energy, delta, mass, &probes)?;
            let gap_hit = window.map(|w| {
                h.eigenvalues()
                    .iter()
                    .any(|&e| e >= -lifshitz_core::probes::EDGE_TOLERANCE && e < w)
            });
            Ok((
                RegularityRow {
                    realization: r,
                    sup_norm: res.sup_norm,
                    passed: res.passed,
                    gap_hit,
                },
                (r == 0).then_some(res),
            ))
        })
        .collect::<Result<_, Error>>()?;
    let n = rows.len() as f64;
    let pass_rate = rows.iter().filter(|r| r.0.passed).count() as f64 / n;
    let gap_rate = window.map(|_| rows.iter().filter(|r| r.0.gap_hit == Some(true)).count() as f64 / n);
    let example = rows.iter().find_map(|r| r.1.clone());
    let rows: Vec<RegularityRow> = rows.into_iter().map(|r| r.0).collect();
    let mut p = Payload::new(format!(
        "m-regularity: pass rate {pass_rate:.4}{}",
        gap_rate.map_or(String::new(), |g| format!(", gap hit rate {g:.4}"))
    ));
    p.json(
        "regularity.json",
        &json!({
            "energy_shift": m.energy_shift,
            "probes": probes,
            "pass_rate": pass_rate,
            "gap_hit_rate": gap_rate,
            "gap_window": window,
            "first_sample": example,
            "samples": rows,
        }),
    );
    Ok(p)
}
