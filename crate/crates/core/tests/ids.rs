use std::f64::consts::PI;

use lifshitz_core::hs::{plateau_function, SmoothCompactFunction};
use lifshitz_core::ids::{
    average_ids, dirichlet_functional, energy_grid, ids_dirichlet_box, ids_periodic_approx, lifshitz_fit,
    periodic_approx_atoms, smoothed_functional, DisorderAverage, IdsCurve,
};
use lifshitz_core::lattice::{
    AndersonModel, BoundaryCondition, DisorderModel, GridSpec, PeriodicPotential, SingleSitePotential,
};
use lifshitz_core::Error;
use proptest::prelude::*;

fn model(dim: usize, p: usize, omega_max: f64, seed: u64) -> AndersonModel {
    let v0 = PeriodicPotential::from_fn(dim, p, |x| 0.2 * (2.0 * PI * x[0]).cos()).unwrap();
    let u = SingleSitePotential::indicator(dim, p, 1.0, 1.0).unwrap();
    AndersonModel::new(v0, u, DisorderModel::uniform(omega_max, seed)).unwrap()
}

fn dense_eigenvalues(h: &lifshitz_core::lattice::AssembledHamiltonian) -> Vec<f64> {
    let m = h.matrix.to_dense_real();
    let mut ev: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

#[test]
fn strict_counting_at_ties() {
    let atoms = vec![(0.0, 1.0), (1.0, 1.0), (1.0, 0.5)];
    let c = IdsCurve::from_atoms(atoms, &[0.0, 1.0, 2.0], 1.0, 1).unwrap();
    assert_eq!(c.values, vec![0.0, 1.0, 2.5]);
    assert_eq!(c.at(1.0), 1.0);
    assert_eq!(c.at(1.0 + 1e-15), 2.5);
}

#[test]
fn free_chain_periodic_ids_approaches_arccos() {
    let m = model(1, 1, 0.0, 0);
    let m = AndersonModel::new(PeriodicPotential::zero(1, 1), m.u.clone(), m.disorder.clone()).unwrap();
    let s = m.cell_sample(3, 0).unwrap();
    let r = 8;
    let energies = energy_grid(0.0, 4.0, 81);
    let c = ids_periodic_approx(&m, &s, 3, &energies, r).unwrap();
    let err = energies
        .iter()
        .zip(&c.values)
        .map(|(&e, &n)| (n - (1.0 - e / 2.0).clamp(-1.0, 1.0).acos() / PI).abs())
        .fold(0.0, f64::max);
    assert!(err <= 1.0 / (r as f64 * 7.0) + 1e-12, "{err}");
}

#[test]
fn dirichlet_functional_matches_eigenvalue_sum() {
    let m = model(1, 2, 1.0, 4);
    let grid = GridSpec::centered(1, 2, 40).unwrap();
    let h = m.anderson(&grid, BoundaryCondition::Dirichlet, &m.box_sample(&grid, 0).unwrap()).unwrap();
    let g = plateau_function(0.5, 4).unwrap();
    let exact: f64 = dense_eigenvalues(&h).iter().map(|&e| g.value(e)).sum::<f64>() / grid.volume();
    let got = dirichlet_functional(&h, &g, 64).unwrap();
    // the counting function jumps inside panels, so agreement is limited by panel width
    assert!((got - exact).abs() < 2e-3 * exact.abs().max(1.0), "{got} vs {exact}");
}

#[test]
fn smoothed_functional_over_atoms_is_exact() {
    let atoms = vec![(0.1, 0.25), (0.3, 0.5), (2.0, 1.0)];
    let g = plateau_function(0.5, 3).unwrap();
    let c = IdsCurve::from_atoms(atoms.clone(), &energy_grid(-1.0, 3.0, 5), 1.0, 1).unwrap();
    let want: f64 = atoms.iter().map(|&(e, w)| w * g.value(e)).sum();
    assert_eq!(smoothed_functional(&g, &c).unwrap(), want);
    let short = IdsCurve::from_atoms(atoms, &energy_grid(0.0, 0.5, 5), 1.0, 1).unwrap();
    assert!(matches!(smoothed_functional(&g, &short), Err(Error::SupportOutsideGrid { .. })));
}

#[test]
fn lifshitz_fit_recovers_exact_exponent() {
    for dim in [1usize, 2] {
        let energies = energy_grid(0.0, 2.0, 4001);
        let exponent = dim as f64 / 2.0;
        let mean: Vec<f64> = energies
            .iter()
            .map(|&e| if e > 0.0 { (-e.powf(-exponent)).exp() } else { 0.0 })
            .collect();
        let avg = DisorderAverage {
            stderr: vec![0.0; energies.len()],
            energies,
            mean,
            samples: 1,
        };
        let fit = lifshitz_fit(&avg, 0.0, (1e-4, 1e-1), dim).unwrap();
        assert!((fit.kappa + exponent).abs() < 1e-9, "{}", fit.kappa);
        assert!(fit.lifshitz_like);
    }
}

#[test]
fn averaging_rejects_mismatched_grids() {
    let a = IdsCurve::from_atoms(vec![(0.0, 1.0)], &[0.0, 1.0], 1.0, 1).unwrap();
    let b = IdsCurve::from_atoms(vec![(0.0, 1.0)], &[0.0, 2.0], 1.0, 1).unwrap();
    assert!(matches!(average_ids(&[a, b]), Err(Error::GridMismatch)));
    assert!(matches!(average_ids(&[]), Err(Error::InsufficientData(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dirichlet_counts_match_dense_oracle(
        dim in 1usize..=2,
        p in 1usize..=2,
        half in 1usize..=4,
        omega in 0.0f64..2.0,
        seed in 0u64..500,
    ) {
        let m = model(dim, p, omega, seed);
        let grid = GridSpec::centered(dim, p, half).unwrap();
        prop_assume!(grid.num_points() <= 400);
        let h = m.anderson(&grid, BoundaryCondition::Dirichlet, &m.box_sample(&grid, 0).unwrap()).unwrap();
        let ev = dense_eigenvalues(&h);
        let energies = energy_grid(-1.0, 8.0 * (p * p) as f64, 97);
        let c = ids_dirichlet_box(&h, &energies).unwrap();
        for (e, n) in energies.iter().zip(&c.values) {
            let want = ev.iter().filter(|&&x| x < *e).count() as f64 / grid.volume();
            // counts differ only if an eigenvalue sits within round-off of a grid energy
            let near = ev.iter().any(|&x| (x - e).abs() < 1e-9);
            prop_assert!(near || *n == want, "E={e}: {n} vs {want}");
        }
    }

    #[test]
    fn ids_is_monotone_and_normalized(
        dim in 1usize..=2,
        p in 1usize..=2,
        l in 1usize..=2,
        r in 1usize..=4,
        seed in 0u64..500,
    ) {
        let m = model(dim, p, 1.0, seed);
        let s = m.cell_sample(l, 0).unwrap();
        let top = 4.0 * dim as f64 * (p * p) as f64 + 3.0;
        let energies = energy_grid(-1.0, top, 60);
        let c = ids_periodic_approx(&m, &s, l, &energies, r).unwrap();
        prop_assert!(c.values.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(c.values[0] >= 0.0);
        let full = (p as f64).powi(dim as i32);
        prop_assert!((c.total_mass - full).abs() < 1e-12);
        prop_assert!((c.values.last().unwrap() - full).abs() < 1e-12);
    }

    #[test]
    fn periodic_ids_is_translation_invariant(
        dim in 1usize..=2,
        l in 1usize..=2,
        sx in -3i64..=3,
        sy in -3i64..=3,
        seed in 0u64..500,
    ) {
        let m = model(dim, 1, 1.0, seed);
        let s = m.cell_sample(l, 2).unwrap();
        let shift = [sx, if dim == 2 { sy } else { 0 }];
        let a = periodic_approx_atoms(&m, &s, l, 3).unwrap();
        let b = periodic_approx_atoms(&m, &s.torus_shifted(shift), l, 3).unwrap();
        let mut ea: Vec<f64> = a.iter().map(|x| x.0).collect();
        let mut eb: Vec<f64> = b.iter().map(|x| x.0).collect();
        ea.sort_by(f64::total_cmp);
        eb.sort_by(f64::total_cmp);
        for (x, y) in ea.iter().zip(&eb) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }
}
