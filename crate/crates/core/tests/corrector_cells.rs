use homlab::corrector::*;
use homlab::env::{build_environment, CoefficientField, EnvKind, EnvSpec, Temporal};
use homlab::monotone::TimeDerivative;

fn one_four() -> CoefficientField {
    build_environment(EnvSpec::periodic(1, 1.0, vec![1.0, 4.0])).unwrap()
}

fn static_checkerboard(seed: u64) -> CoefficientField {
    build_environment(EnvSpec::checkerboard(1, 1.0, 4.0, Temporal::Static, 1e6, seed)).unwrap()
}

fn ladder(sides: Vec<usize>, per_cell: usize) -> CellLadder {
    CellLadder {
        sides,
        per_cell,
        dt: 0.25,
        time_factor: 1.0,
        derivative: TimeDerivative::Central,
    }
}

#[test]
fn identity_effective_law_is_the_identity() {
    let f = build_environment(EnvSpec::identity(2)).unwrap();
    let (v, rec) = estimate_effective(&f, &[1.0, 0.0], &DEFAULT_LAMBDAS, &ladder(vec![2, 4], 4), 1e-10).unwrap();
    assert!((v[0] - 1.0).abs() < 1e-10 && v[1].abs() < 1e-10);
    assert!(rec.within_tolerance);
    let axes = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
    let law = build_effective_law(&f, &axes, &[1e-2, 1e-3], &ladder(vec![2, 4], 4), 1e-10).unwrap();
    assert!((law.certificates.lipschitz - 1.0).abs() < 1e-8);
    assert!(law.certificates.pass);
}

#[test]
fn harmonic_mean_oracle() {
    let f = one_four();
    for p in [-2.0, -1.0, 1.0, 2.0] {
        let (v, _) = estimate_effective(&f, &[p], &DEFAULT_LAMBDAS, &ladder(vec![4, 8], 16), 1e-8).unwrap();
        let want = 2.0 / (1.0 / 1.0 + 1.0 / 4.0) * p;
        assert!((v[0] - want).abs() <= 0.01 * want.abs(), "p={p}: {} vs {want}", v[0]);
    }
}

#[test]
fn law_certificates_of_the_linear_case() {
    let law = build_effective_law(&one_four(), &tensor_grid(1, 2.0, 5), &[1e-3, 1e-4], &ladder(vec![4, 8], 16), 1e-8).unwrap();
    assert!((law.certificates.lipschitz - 1.6).abs() < 0.016);
    assert!((law.certificates.monotonicity - 1.6).abs() < 0.016);
    assert!(law.certificates.min_inner >= -1e-8);
}

#[test]
fn flux_orthogonality_is_small_and_shrinks() {
    let f = one_four();
    let sol = solve_regularized_cell(&f, &[1.0], 1e-4, 0.0, &CellGeometry::periodic_static(1, 8, 16), 1e-12).unwrap();
    assert!(flux_orthogonality(&sol).abs() <= 0.05);
    let vals: Vec<f64> = [(4e-2, 2), (2e-2, 4), (1e-2, 8)]
        .iter()
        .map(|&(lambda, side)| {
            let s = solve_regularized_cell(&f, &[1.0], lambda, 0.0, &CellGeometry::periodic_static(1, side, 16), 1e-12).unwrap();
            flux_orthogonality(&s).abs()
        })
        .collect();
    assert!(vals.windows(2).all(|w| w[1] < w[0]), "{vals:?}");
}

#[test]
fn sublinearity_of_periodic_and_random_correctors() {
    let id = build_environment(EnvSpec::identity(1)).unwrap();
    let geo = CellGeometry::periodic_static(1, 32, 8);
    let t = sublinearity_diagnostic(&id, &[1.0], &[4.0, 8.0, 16.0], 1e-4, &geo, 1e-12).unwrap();
    assert!(t.rows.iter().all(|r| r.space_time == 0.0 && r.slice == 0.0));

    let t = sublinearity_diagnostic(&one_four(), &[1.0], &[4.0, 8.0, 16.0], 1e-4, &geo, 1e-12).unwrap();
    assert!((t.fit.slope + 2.0).abs() <= 0.3, "{:?}", t.fit);
    assert!(t.decreasing);

    let t = sublinearity_diagnostic(&static_checkerboard(3), &[1.0], &[4.0, 8.0, 16.0], 1e-4, &geo, 1e-12).unwrap();
    assert!(t.decreasing, "{:?}", t.rows);
}

#[test]
fn regularized_energy_is_stable_along_the_lambda_ladder() {
    let f = static_checkerboard(11);
    let (_, rec) = estimate_effective(&f, &[1.0], &DEFAULT_LAMBDAS, &ladder(vec![8, 16], 8), 1e-8).unwrap();
    let e: Vec<f64> = rec.entries.iter().map(|e| e.regularized_energy).collect();
    let max = e.iter().cloned().fold(f64::MIN, f64::max);
    let min = e.iter().cloned().fold(f64::MAX, f64::min);
    assert!(min > 0.0 && max / min <= 10.0, "{e:?}");
}

#[test]
fn effective_law_is_frame_independent() {
    let spec = EnvSpec::checkerboard(1, 1.0, 4.0, Temporal::Renewal { rate: 1.0 }, 1e6, 21);
    let f = build_environment(spec).unwrap();
    let g = f.shift(&[5], 3.0);
    let cells = ladder(vec![8, 16], 8);
    let lambdas = [1e-2, 1e-3];
    let (a, ra) = estimate_effective(&f, &[1.0], &lambdas, &cells, 1e-8).unwrap();
    let (b, rb) = estimate_effective(&g, &[1.0], &lambdas, &cells, 1e-8).unwrap();
    assert!((a[0] - b[0]).abs() <= ra.error.max(rb.error) + 0.05 * a[0], "{a:?} {b:?} {} {}", ra.error, rb.error);
}

#[test]
fn weighted_box_energy_constant_is_size_independent() {
    let f = build_environment(
        EnvSpec::checkerboard(1, 1.0, 4.0, Temporal::Renewal { rate: 1.0 }, 1e6, 8).with_kind(EnvKind::MonotoneGradient, 0.2),
    )
    .unwrap();
    let c: Vec<f64> = [8usize, 16]
        .iter()
        .map(|&l| {
            let sol = solve_regularized_cell(&f, &[1.0], 0.1, 0.5, &CellGeometry::zero_box(1, l, 4, 0.25), 1e-10).unwrap();
            sol.weighted_energy().constant
        })
        .collect();
    assert!(c[0] > 0.0 && c[1] / c[0] < 2.0 && c[0] / c[1] < 2.0, "{c:?}");
}
