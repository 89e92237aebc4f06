use homlab::grid::{Grid, GridFunction, Quantity};
use homlab::linspde::*;
use homlab::rng;
use homlab::stats::Estimate;
use rand::Rng;

#[test]
fn grid_solution_matches_the_kernel_formula_at_random_points() {
    let cells = 4;
    let g = Grid::new(1, cells, 64).unwrap();
    let dt = 2e-3;
    let bump = BumpSpec::default();
    let noise = NoiseRealization::new(17, 1, dt).unwrap();
    let quad = KernelQuadrature {
        points: 48,
        tolerance: 1e-4,
    };
    let mut r = rng::stream(5, &[1]);
    for _ in 0..10 {
        let i = r.random_range(0..g.len());
        let t = dt * r.random_range(25..150) as f64;
        let v = simulate_spde(&noise, bump, g, 0.0, t, &GridFunction::zeros(g, 1, Quantity::V), &[t]).unwrap();
        let rms = (v.values.iter().map(|x| x * x).sum::<f64>() / g.len() as f64).sqrt();
        let x = g.position(i);
        let (hk, _) = heat_kernel_value(&noise, bump, cells, &x[..1], 0.0, t, &quad).unwrap();
        assert!((v.values[i] - hk).abs() <= 0.05 * hk.abs().max(rms), "x={} t={t}: {} vs {hk}", x[0], v.values[i]);
    }
}

#[test]
fn gradient_moments_are_finite_and_saturate() {
    let g = Grid::new(1, 32, 8).unwrap();
    let prof = moment_growth_profile(BumpSpec::default(), g, 0.01, &[0.01, 5.0, 10.0], 200, 3).unwrap();
    let early = prof.rows[0].edv2;
    let (mid, late) = (prof.rows[1].edv2, prof.rows[2].edv2);
    assert!(early.mean.is_finite() && early.mean > 0.0);
    assert!(late.mean < mid.mean + 3.0 * (mid.stderr.powi(2) + late.stderr.powi(2)).sqrt() + 0.1 * mid.mean);
}

/// Gradient energy on unit cells `0` and `k` of the same replicas.
fn cell_energies(k: i64) -> (Vec<f64>, Vec<f64>) {
    let g = Grid::new(1, 16, 8).unwrap();
    let bump = BumpSpec::default();
    let t = 4.0;
    let a = g.unit_cell_nodes(&[0]);
    let b = g.unit_cell_nodes(&[k]);
    (0..200)
        .map(|rep| {
            let noise = NoiseRealization::replica(9, rep, 1, 0.05).unwrap();
            let v = simulate_spde(&noise, bump, g, 0.0, t, &GridFunction::zeros(g, 1, Quantity::V), &[t]).unwrap();
            let eng = LinearSpde::new(g, 0.05, bump).unwrap();
            let dv = eng.gradient(&v.values);
            let e = |nodes: &[usize]| nodes.iter().map(|&i| dv[i] * dv[i]).sum::<f64>() / nodes.len() as f64;
            (e(&a), e(&b))
        })
        .unzip()
}

#[test]
fn gradient_law_is_stationary_in_space() {
    let (a, b) = cell_energies(7);
    let (ea, eb) = (Estimate::from_samples(&a), Estimate::from_samples(&b));
    let sigma = (ea.stderr.powi(2) + eb.stderr.powi(2)).sqrt();
    assert!((ea.mean - eb.mean).abs() <= 3.0 * sigma, "{ea:?} {eb:?}");
}

#[test]
fn localized_solutions_on_disjoint_noise_are_uncorrelated() {
    let g = Grid::new(1, 16, 4).unwrap();
    let bump = BumpSpec::default();
    let n = 300;
    let (xs, ys): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|rep| {
            let noise = NoiseRealization::replica(4, rep, 1, 0.05).unwrap();
            let a = simulate_localized(&noise, bump, g, &[0], 1.0, 0.0, 2.0, &[2.0]).unwrap();
            let b = simulate_localized(&noise, bump, g, &[8], 1.0, 0.0, 2.0, &[2.0]).unwrap();
            (a.values[2], b.values[34])
        })
        .unzip();
    let (mx, my) = (xs.iter().sum::<f64>() / n as f64, ys.iter().sum::<f64>() / n as f64);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let corr = cov / (vx * vy).sqrt();
    assert!(corr.abs() <= 3.0 / (n as f64).sqrt(), "{corr}");
}

#[test]
fn decorrelation_gap_shrinks_with_the_radius() {
    let t = decorrelation(BumpSpec::default(), Grid::new(1, 32, 4).unwrap(), 0.05, 16.0, &[1.0, 2.0, 4.0], 60, 2).unwrap();
    assert!(t.rows.windows(2).all(|w| w[1].gap.mean < w[0].gap.mean), "{:?}", t.rows);
}
