use homlab::fslattice::*;
use homlab::grid::{Grid, GridFunction, Quantity};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn drift_sums_to_zero(phi in prop::collection::vec(-20.0f64..20.0, 36), beta in 0.0f64..1.0, two_d in any::<bool>()) {
        let grid = if two_d { Grid::new(2, 6, 1).unwrap() } else { Grid::new(1, 36, 1).unwrap() };
        for pot in [PotentialSpec::Quadratic, PotentialSpec::QuadTanh { beta }] {
            let mut out = vec![0.0; grid.len()];
            lattice_drift(&pot, &grid, &phi, &mut out);
            let scale: f64 = out.iter().map(|v| v.abs()).sum::<f64>() + 1.0;
            prop_assert!(out.iter().sum::<f64>().abs() <= 64.0 * f64::EPSILON * scale);
        }
    }
}

#[test]
fn dynamics_commute_with_lattice_shifts() {
    let (n, d) = (8, 2);
    let grid = Grid::new(d, n, 1).unwrap();
    let pot = PotentialSpec::QuadTanh { beta: 0.4 };
    let phi0 = initial_heights(n, d, 0.125, |r| (r[0] * 6.0).sin() + r[1], 1.0, 3).unwrap();
    let k = [3i64, -2];
    let shifted: Vec<f64> = (0..grid.len())
        .map(|i| {
            let c = grid.coords(i);
            phi0[grid.index_wrapped(&[c[0] as i64 + k[0], c[1] as i64 + k[1]])]
        })
        .collect();
    let base = LatticeNoise::new(12);
    let moved = LatticeNoise {
        offset: [k[0], k[1], 0],
        ..base
    };
    let a = simulate_lattice(&pot, n, d, 0.05, 2.0, &phi0, Some(&base), 10).unwrap();
    let b = simulate_lattice(&pot, n, d, 0.05, 2.0, &shifted, Some(&moved), 10).unwrap();
    for s in 0..a.steps() {
        for i in 0..grid.len() {
            let c = grid.coords(i);
            let j = grid.index_wrapped(&[c[0] as i64 + k[0], c[1] as i64 + k[1]]);
            assert_eq!(b.frame(s)[i].to_bits(), a.frame(s)[j].to_bits());
        }
    }
}

/// The site average of a quadratic-potential field is a Brownian motion with
/// variance `2 t / N^d`.
#[test]
fn site_average_variance_sum_rule() {
    let (n, d, t) = (6, 2, 1.0);
    let phi0 = vec![0.0; n * n];
    let means: Vec<f64> = (0..200)
        .map(|r| {
            let traj = simulate_lattice(&PotentialSpec::Quadratic, n, d, 0.05, t, &phi0, Some(&LatticeNoise::new(r)), 20).unwrap();
            traj.frame(traj.steps() - 1).iter().sum::<f64>() / (n * n) as f64
        })
        .collect();
    let m = means.len() as f64;
    let mu = means.iter().sum::<f64>() / m;
    let var = means.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (m - 1.0);
    let want = 2.0 * t / (n * n) as f64;
    let sigma = want * (2.0 / (m - 1.0)).sqrt();
    assert!((var - want).abs() <= 3.0 * sigma, "{var} vs {want}");
}

#[test]
fn rescaled_constant_field_matches_a_constant_limit() {
    let traj = simulate_lattice(&PotentialSpec::Quadratic, 16, 1, 0.1, 1.0, &vec![8.0; 16], None, 5).unwrap();
    let r = rescale_field(&traj, 1.0 / 8.0).unwrap();
    let mut limit = GridFunction::trajectory(r.field.grid, 1, Quantity::U, r.field.dt);
    for &t in &r.field.times {
        limit.push_frame(t, &vec![1.0; r.field.grid.len()]);
    }
    let rep = compare_hydrodynamic(&[&r.field], &limit, 0.0).unwrap();
    assert!(rep.final_error.mean < 1e-14 && rep.integrated.mean < 1e-14);
}
