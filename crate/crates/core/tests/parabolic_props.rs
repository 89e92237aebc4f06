use homlab::corrector::{EffectiveLaw, Provenance};
use homlab::env::{build_environment, EnvKind, EnvSpec};
use homlab::grid::{GridFunction, Quantity};
use homlab::multiscale::*;
use proptest::prelude::*;
use std::f64::consts::PI;

fn torus(per_cell: usize, dt: f64) -> Torus {
    Torus {
        dim: 1,
        side: 2,
        per_cell,
        dt,
    }
}

fn linear_law(c: f64) -> EffectiveLaw {
    let p: Vec<Vec<f64>> = (-4..=4).map(|i| vec![i as f64]).collect();
    let v = p.iter().map(|x| vec![c * x[0]]).collect();
    EffectiveLaw::from_samples(p, v, 1e-8, Provenance::default()).unwrap()
}

fn oscillatory(spec: EnvSpec, u0: &GridFunction, t: Torus, eps: f64, t_final: f64) -> GridFunction {
    let field = build_environment(spec).unwrap();
    solve_oscillatory(
        &ParabolicProblem {
            coefficients: Coefficients::Field { field: &field, epsilon: eps },
            torus: t,
            u0,
            f: &Forcing::Constant(0.0),
            t_final,
            record_every: 1,
        },
        1e-12,
    )
    .unwrap()
    .u
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn comparison_principle(a in prop::collection::vec(-1.0f64..1.0, 4), gap in prop::collection::vec(0.0f64..0.5, 4)) {
        let t = torus(16, 1.0 / 512.0);
        let g = t.grid().unwrap();
        let wave = |c: &[f64], x: f64| c[0] + c[1] * (PI * x).sin() + c[2] * (2.0 * PI * x).cos() + c[3] * (3.0 * PI * x).sin();
        let lo = GridFunction::from_fn(g, Quantity::U, |x| wave(&a, x[0]));
        let hi = GridFunction::from_fn(g, Quantity::U, |x| wave(&a, x[0]) + gap[0] + gap[1] * (PI * x[0]).sin().powi(2));
        let spec = EnvSpec::periodic(1, 1.0, vec![1.0, 4.0]).with_kind(EnvKind::MonotoneGradient, 0.3);
        let u = oscillatory(spec.clone(), &lo, t, 0.5, 1.0 / 64.0);
        let v = oscillatory(spec, &hi, t, 0.5, 1.0 / 64.0);
        for (x, y) in u.values.iter().zip(&v.values) {
            prop_assert!(*x <= *y + 1e-9);
        }
    }
}

#[test]
fn l2_norm_does_not_increase_without_forcing() {
    let t = torus(16, 1.0 / 512.0);
    let g = t.grid().unwrap();
    let u0 = GridFunction::from_fn(g, Quantity::U, |x| (PI * x[0]).sin() + 0.5 * (3.0 * PI * x[0]).cos());
    let spec = EnvSpec::periodic(1, 1.0, vec![1.0, 4.0]).with_kind(EnvKind::MonotoneGradient, 0.3);
    let u = oscillatory(spec, &u0, t, 0.5, 1.0 / 16.0);
    let norms: Vec<f64> = (0..u.steps()).map(|k| u.frame(k).iter().map(|v| v * v).sum::<f64>()).collect();
    assert!(norms.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
}

#[test]
fn time_stepping_is_first_order() {
    let law = linear_law(1.6);
    let run = |dt: f64| {
        let t = torus(16, dt);
        let u0 = GridFunction::from_fn(t.grid().unwrap(), Quantity::U, |x| (PI * x[0]).sin());
        let u = solve_homogenized(&law, &u0, &Forcing::Constant(0.0), 0.125, t, 1, 1e-13).unwrap().u;
        u.frame(u.steps() - 1).to_vec()
    };
    let reference = run(1.0 / 4096.0);
    let err = |dt: f64| run(dt).iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let (e1, e2) = (err(1.0 / 64.0), err(1.0 / 128.0));
    let order = (e1 / e2).log2();
    assert!(order >= 0.9, "{order}");
}

#[test]
fn weighted_error_is_symmetric() {
    let t = torus(8, 1.0 / 64.0);
    let g = t.grid().unwrap();
    let u = GridFunction::from_fn(g, Quantity::U, |x| x[0].cos());
    let v = GridFunction::from_fn(g, Quantity::U, |x| (2.0 * x[0]).sin());
    let a = weighted_error(&u, &v, 1.0).unwrap();
    let b = weighted_error(&v, &u, 1.0).unwrap();
    assert_eq!(a.errors, b.errors);
    assert_eq!(weighted_error(&u, &u, 1.0).unwrap().errors, vec![0.0]);
}

#[test]
fn energy_is_stable_across_epsilon() {
    let t = Torus {
        dim: 1,
        side: 2,
        per_cell: 64,
        dt: 1.0 / 1024.0,
    };
    let u0 = GridFunction::from_fn(t.grid().unwrap(), Quantity::U, |x| (PI * x[0]).sin());
    let e: Vec<f64> = [0.5, 0.25, 0.125]
        .iter()
        .map(|&eps| energy_diagnostic(&oscillatory(EnvSpec::periodic(1, 1.0, vec![1.0, 4.0]), &u0, t, eps, 0.125), 1.0))
        .collect();
    let mean = e.iter().sum::<f64>() / 3.0;
    assert!(e.iter().all(|v| (v - mean).abs() <= 0.5 * mean), "{e:?}");
}
