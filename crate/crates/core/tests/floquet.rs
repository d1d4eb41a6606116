use std::f64::consts::PI;

use lifshitz_core::floquet::{
    brillouin_zone, check_regularity, compute_bands, estimate_lipschitz, find_band_edges, h0_factory, wrap_phase,
    EdgeKind, HamiltonianBands, DEFAULT_FD_STEP,
};
use lifshitz_core::lattice::{assemble_h0, BoundaryCondition, GridSpec, PeriodicPotential};
use proptest::prelude::*;

fn free_band_oracle(l: usize, theta: f64) -> Vec<f64> {
    let s = (2 * l + 1) as f64;
    let mut v: Vec<f64> = (0..2 * l + 1)
        .map(|k| 2.0 - 2.0 * (theta + 2.0 * PI * k as f64 / s).cos())
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

fn cosine_v0(p: usize, amp: f64) -> PeriodicPotential {
    PeriodicPotential::from_fn(1, p, |x| amp * (2.0 * PI * x[0]).cos()).unwrap()
}

#[test]
fn free_chain_bands_match_folded_dispersion() {
    for l in [1usize, 2, 5] {
        let zone = brillouin_zone(l, 1).unwrap();
        let v0 = PeriodicPotential::zero(1, 1);
        let bands = compute_bands(h0_factory(&v0, zone).unwrap(), zone, 9, 2 * l + 1).unwrap();
        for (t, vals) in bands.thetas.iter().zip(&bands.values) {
            for (a, b) in vals.iter().zip(free_band_oracle(l, t[0])) {
                assert!((a - b).abs() < 1e-12, "l={l} θ={} {a} vs {b}", t[0]);
            }
        }
    }
}

#[test]
fn free_edges_and_unit_hessian() {
    for dim in [1usize, 2] {
        let zone = brillouin_zone(0, dim).unwrap();
        let v0 = PeriodicPotential::zero(dim, 1);
        let f = h0_factory(&v0, zone).unwrap();
        let bands = compute_bands(&f, zone, 16, 1).unwrap();
        let edges = find_band_edges(&bands, 1e-8);
        assert_eq!(edges[0].kind, EdgeKind::Lower);
        assert!(edges[0].energy.abs() < 1e-12);
        let src = HamiltonianBands::new(dim, 1, &f);
        let report = check_regularity(&bands, &src, edges[0].energy, DEFAULT_FD_STEP).unwrap();
        assert!(report.regular);
        assert_eq!(report.minimizers.len(), 1);
        let m = &report.minimizers[0];
        assert!(m.theta[0].abs() < 1e-15);
        for i in 0..dim {
            assert!((m.hessian[i * dim + i] - 2.0).abs() < 1e-6, "{:?}", m.hessian);
        }
        if dim == 2 {
            assert!(m.hessian[1].abs() < 1e-6);
        }
    }
}

#[test]
fn free_lipschitz_constant_is_at_most_two() {
    let zone = brillouin_zone(0, 1).unwrap();
    let v0 = PeriodicPotential::zero(1, 1);
    let bands = compute_bands(h0_factory(&v0, zone).unwrap(), zone, 256, 1).unwrap();
    let xi = estimate_lipschitz(&bands, (0.0, 4.0)).unwrap();
    assert!(xi <= 2.0 + 1e-12 && xi > 1.99, "{xi}");
    // near the bottom the slope is 2 sin θ with E = 2 - 2 cos θ ≤ 0.1
    let low = estimate_lipschitz(&bands, (0.0, 0.1)).unwrap();
    let bound = 2.0 * (1.0f64 - 0.95 * 0.95).sqrt();
    assert!(low <= bound + 0.05, "{low} vs {bound}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn wrap_phase_is_a_representative(t in -50.0f64..50.0) {
        let w = wrap_phase(t);
        prop_assert!((-PI..=PI).contains(&w));
        let k = (t - w) / (2.0 * PI);
        prop_assert!((k - k.round()).abs() < 1e-9);
    }

    #[test]
    fn bands_are_even_in_theta(
        l in 0usize..=3,
        p in 1usize..=3,
        amp in -1.0f64..1.0,
        frac in 0.0f64..1.0,
    ) {
        let zone = brillouin_zone(l, 1).unwrap();
        let v0 = cosine_v0(p, amp);
        let f = h0_factory(&v0, zone).unwrap();
        let t = frac * zone.half_width;
        let a = f([t, 0.0]).unwrap().eigenvalues();
        let b = f([-t, 0.0]).unwrap().eigenvalues();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn zone_centre_equals_periodic_box(l in 0usize..=3, p in 1usize..=3, amp in -1.0f64..1.0) {
        let zone = brillouin_zone(l, 1).unwrap();
        let v0 = cosine_v0(p, amp);
        let at_zero = h0_factory(&v0, zone).unwrap()([0.0, 0.0]).unwrap().eigenvalues();
        let grid = GridSpec::with_cells(1, p, 2 * l + 1).unwrap();
        let per = assemble_h0(&grid, &v0, BoundaryCondition::Periodic).unwrap().eigenvalues();
        for (x, y) in at_zero.iter().zip(&per) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn theta_box_interlaces_with_dirichlet(
        cells in 2usize..=8,
        p in 1usize..=2,
        amp in -1.0f64..1.0,
        phase in -PI..PI,
    ) {
        // H_θ - H_D is the wrap hop, a rank-2 perturbation with inertia (1, 1)
        let v0 = cosine_v0(p, amp);
        let grid = GridSpec::with_cells(1, p, cells).unwrap();
        let th = assemble_h0(&grid, &v0, BoundaryCondition::Theta([phase, 0.0])).unwrap().eigenvalues();
        let di = assemble_h0(&grid, &v0, BoundaryCondition::Dirichlet).unwrap().eigenvalues();
        let n = th.len();
        for k in 0..n {
            if k >= 1 {
                prop_assert!(di[k - 1] <= th[k] + 1e-10);
            }
            if k + 1 < n {
                prop_assert!(th[k] <= di[k + 1] + 1e-10);
            }
        }
    }

    #[test]
    fn box_phase_is_period_times_theta(l in 0usize..=20, frac in -1.0f64..1.0) {
        let zone = brillouin_zone(l, 1).unwrap();
        let t = frac * zone.half_width;
        let ph = zone.box_phase([t, 0.0]);
        prop_assert!((ph[0] - (2 * l + 1) as f64 * t).abs() < 1e-12);
    }
}
