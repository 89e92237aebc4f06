//! Oscillatory and homogenized nonlinear parabolic problems on a torus.
//!
//! `d_t u - div a(D u, x / eps, t / eps^2) = f` is stepped by implicit Euler;
//! each step is the strongly monotone spatial system
//! `u / dt - div a(D u) = u_prev / dt + f` solved by the preconditioned
//! fixed-point iteration. The homogenized problem replaces `a` by a tabulated
//! effective law.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corrector::EffectiveLaw;
use crate::env::{CoefficientField, EnvSpec, Spatial};
use crate::error::{invalid, Error, Result};
use crate::grid::{forward_gradient, Grid, GridFunction, Quantity, MAX_DIM};
use crate::monotone::{sample_laws, Boundary, NodeFlux, Operator, Problem, SolverOptions, TimeDerivative};
use crate::rng;
use crate::stats::Estimate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Torus {
    pub dim: usize,
    /// Side `L` of the torus.
    pub side: usize,
    /// Grid points per unit length.
    pub per_cell: usize,
    pub dt: f64,
}

impl Torus {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dim, self.side, self.per_cell)
    }

    /// Checks that `eps = 1/k` with `k` dividing `m` and at least eight grid
    /// points per `eps`-cell, and that `dt <= eps^2 / 8`.
    pub fn check_epsilon(&self, eps: f64) -> Result<()> {
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(invalid("epsilon", "must lie in (0, 1]"));
        }
        let k = (1.0 / eps).round();
        if ((1.0 / eps) - k).abs() > 1e-9 * k {
            return Err(invalid("epsilon", "must be the reciprocal of an integer"));
        }
        let k = k as usize;
        if self.per_cell % k != 0 || self.per_cell / k < 8 {
            return Err(invalid("epsilon", "needs at least 8 grid points per eps-cell"));
        }
        if self.dt > eps * eps / 8.0 * (1.0 + 1e-12) {
            return Err(invalid("dt", "must satisfy dt <= eps^2 / 8"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Forcing {
    Constant(f64),
    /// One frame (time independent) or one frame per time step `k dt`,
    /// `k = 0..=steps`.
    Grid(GridFunction),
}

impl Forcing {
    fn frame(&self, k: usize, len: usize) -> Result<std::borrow::Cow<'_, [f64]>> {
        match self {
            Forcing::Constant(c) => Ok(vec![*c; len].into()),
            Forcing::Grid(g) => {
                if g.grid.len() != len || g.components != 1 {
                    return Err(Error::MeshMismatch("forcing grid".into()));
                }
                let i = if g.steps() == 1 { 0 } else { k };
                if i >= g.steps() {
                    return Err(Error::MeshMismatch("forcing has too few frames".into()));
                }
                Ok(g.frame(i).into())
            }
        }
    }
}

pub enum Coefficients<'a> {
    /// `a(p, x / eps, t / eps^2)`.
    Field { field: &'a CoefficientField, epsilon: f64 },
    Law(&'a EffectiveLaw),
}

pub struct ParabolicProblem<'a> {
    pub coefficients: Coefficients<'a>,
    pub torus: Torus,
    /// Initial datum, one frame on `torus.grid()`.
    pub u0: &'a GridFunction,
    pub f: &'a Forcing,
    pub t_final: f64,
    /// Keep every `record_every`-th step (the first and last are always kept).
    pub record_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub u: GridFunction,
    pub max_iterations: usize,
    /// Nodes and steps at which a gradient left the tabulated range of the
    /// effective law (linear extrapolation was used).
    pub hull_exits: usize,
}

fn step_count(t_final: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && t_final >= 0.0 && t_final.is_finite()) {
        return Err(invalid("T", "need dt > 0 and T >= 0"));
    }
    let n = (t_final / dt).round();
    if (n * dt - t_final).abs() > 1e-9 * t_final.max(dt) {
        return Err(invalid("T", "must be a multiple of dt"));
    }
    Ok(n as usize)
}

fn run(problem: &ParabolicProblem, tol: f64) -> Result<Trajectory> {
    let torus = problem.torus;
    let grid = torus.grid()?;
    let d = grid.dim;
    let len = grid.len();
    if problem.u0.grid != grid || problem.u0.components != 1 {
        return Err(Error::MeshMismatch("u0 is not on the torus grid".into()));
    }
    let steps = step_count(problem.t_final, torus.dt)?;
    let stride = problem.record_every.max(1);
    let (m, lip) = match &problem.coefficients {
        Coefficients::Field { field, epsilon } => {
            torus.check_epsilon(*epsilon)?;
            if field.dim() != d {
                return Err(Error::MeshMismatch("field dimension".into()));
            }
            let c = field.constants();
            (c.monotonicity, c.lipschitz)
        }
        Coefficients::Law(law) => {
            if law.d != d {
                return Err(Error::MeshMismatch("law dimension".into()));
            }
            let c = law.certificates;
            if !c.pass || !(c.monotonicity > 0.0) || !c.lipschitz.is_finite() {
                return Err(Error::Certification("effective law is not certified strongly monotone".into()));
            }
            (c.monotonicity, c.lipschitz.max(c.monotonicity))
        }
    };
    let op = Operator {
        grid,
        nt: 1,
        dt: torus.dt,
        mass: 1.0 / torus.dt,
        lambda_tt: 0.0,
        transport: false,
        derivative: TimeDerivative::Backward,
        boundary: Boundary::Periodic,
    };
    let opts = SolverOptions {
        tol,
        ..SolverOptions::default()
    };
    let mut u = problem.u0.frame(0).to_vec();
    let mut out = GridFunction::trajectory(grid, 1, Quantity::U, torus.dt * stride as f64);
    out.push_frame(0.0, &u);
    let origin = [0.0; MAX_DIM];
    let mut static_laws = None;
    let mut max_iterations = 0;
    let mut hull_exits = 0;
    let mut rhs = vec![0.0; len];
    for k in 1..=steps {
        let t = k as f64 * torus.dt;
        let f = problem.f.frame(k, len)?;
        for i in 0..len {
            rhs[i] = u[i] / torus.dt + f[i];
        }
        let sol = match &problem.coefficients {
            Coefficients::Field { field, epsilon } => {
                let fresh;
                let laws = if field.is_static() {
                    static_laws.get_or_insert(sample_laws(field, &grid, &[0.0], &origin[..d], *epsilon)?)
                } else {
                    fresh = sample_laws(field, &grid, &[t], &origin[..d], *epsilon)?;
                    &fresh
                };
                solve_step(op, laws, &rhs, m, lip, &u, &opts)?
            }
            Coefficients::Law(law) => {
                let sol = solve_step(op, *law, &rhs, m, lip, &u, &opts)?;
                let mut q = [0.0; MAX_DIM];
                for i in 0..len {
                    for (a, v) in q.iter_mut().enumerate().take(d) {
                        *v = sol.grad[a * len + i];
                    }
                    if !law.in_hull(&q[..d]) {
                        hull_exits += 1;
                    }
                }
                sol
            }
        };
        max_iterations = max_iterations.max(sol.iterations);
        u = sol.u;
        if k % stride == 0 || k == steps {
            out.push_frame(t, &u);
        }
    }
    Ok(Trajectory {
        u: out,
        max_iterations,
        hull_exits,
    })
}

fn solve_step(
    op: Operator,
    laws: &dyn NodeFlux,
    rhs: &[f64],
    m: f64,
    lip: f64,
    init: &[f64],
    opts: &SolverOptions,
) -> Result<crate::monotone::Solution> {
    Problem {
        op,
        laws,
        p: [0.0; MAX_DIM],
        rhs: Some(rhs),
        monotonicity: m,
        lipschitz: lip,
    }
    .solve(Some(init), opts)
}

/// Implicit-Euler trajectory of the oscillatory problem.
pub fn solve_oscillatory(problem: &ParabolicProblem, tol: f64) -> Result<Trajectory> {
    if !matches!(problem.coefficients, Coefficients::Field { .. }) {
        return Err(invalid("coefficients", "expected a coefficient field"));
    }
    run(problem, tol)
}

/// Same scheme with the effective law in place of `a`.
pub fn solve_homogenized(
    law: &EffectiveLaw,
    u0: &GridFunction,
    f: &Forcing,
    t_final: f64,
    torus: Torus,
    record_every: usize,
    tol: f64,
) -> Result<Trajectory> {
    run(
        &ParabolicProblem {
            coefficients: Coefficients::Law(law),
            torus,
            u0,
            f,
            t_final,
            record_every,
        },
        tol,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedErrorReport {
    pub theta: f64,
    pub times: Vec<f64>,
    /// `|u - v|_{L^2(rho_theta)}` at each recorded time.
    pub errors: Vec<f64>,
    /// `(int_0^T |u - v|^2_{L^2(rho_theta)} dt)^{1/2}`, trapezoid rule.
    pub integrated: f64,
    pub epsilon: Option<f64>,
    pub seeds: Vec<u64>,
}

/// `rho_theta(x) h^d` per node, `x` the signed torus coordinate.
pub fn weights(grid: &Grid, theta: f64) -> Vec<f64> {
    let hv = grid.cell_volume();
    (0..grid.len())
        .map(|i| {
            let x = grid.signed_position(i);
            let r2: f64 = x[..grid.dim].iter().map(|v| v * v).sum();
            (-theta * (1.0 + r2).sqrt()).exp() * hv
        })
        .collect()
}

pub fn weighted_error(u: &GridFunction, v: &GridFunction, theta: f64) -> Result<WeightedErrorReport> {
    if u.grid != v.grid || u.components != v.components || u.steps() != v.steps() {
        return Err(Error::MeshMismatch("trajectories live on different meshes".into()));
    }
    if u.times.iter().zip(&v.times).any(|(a, b)| (a - b).abs() > 1e-9 * (1.0 + a.abs())) {
        return Err(Error::MeshMismatch("trajectories have different time meshes".into()));
    }
    if !(theta >= 0.0) {
        return Err(invalid("theta", "must be non-negative"));
    }
    let w = weights(&u.grid, theta);
    let len = u.grid.len();
    let errors: Vec<f64> = (0..u.steps())
        .map(|k| {
            let (a, b) = (u.frame(k), v.frame(k));
            let mut s = 0.0;
            for c in 0..u.components {
                for i in 0..len {
                    let e = a[c * len + i] - b[c * len + i];
                    s += e * e * w[i];
                }
            }
            s.sqrt()
        })
        .collect();
    let mut integral = 0.0;
    for k in 1..errors.len() {
        let dt = u.times[k] - u.times[k - 1];
        integral += 0.5 * dt * (errors[k].powi(2) + errors[k - 1].powi(2));
    }
    Ok(WeightedErrorReport {
        theta,
        times: u.times.clone(),
        errors,
        integrated: integral.sqrt(),
        epsilon: None,
        seeds: Vec::new(),
    })
}

/// `sup_t |u(t)|^2_{L^2(rho)} + int_0^T |D u|^2_{L^2(rho)} dt`.
pub fn energy_diagnostic(u: &GridFunction, theta: f64) -> f64 {
    let grid = u.grid;
    let w = weights(&grid, theta);
    let len = grid.len();
    let mut g = vec![0.0; grid.dim * len];
    let mut sup: f64 = 0.0;
    let mut dissipation = 0.0;
    let mut prev = None;
    for k in 0..u.steps() {
        let f = u.frame(k);
        sup = sup.max(f.iter().zip(&w).map(|(v, w)| v * v * w).sum());
        forward_gradient(&grid, f, &mut g);
        let e: f64 = (0..grid.dim)
            .map(|a| (0..len).map(|i| g[a * len + i].powi(2) * w[i]).sum::<f64>())
            .sum();
        if let Some((t0, e0)) = prev {
            dissipation += 0.5 * (u.times[k] - t0) * (e + e0);
        }
        prev = Some((u.times[k], e));
    }
    sup + dissipation
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub epsilon: f64,
    pub seed: u64,
    pub report: WeightedErrorReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub epsilon: f64,
    pub error: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStudy {
    pub rows: Vec<StudyRow>,
    pub summary: Vec<StudySummary>,
    /// Ratios of consecutive mean errors along the ladder.
    pub ratios: Vec<f64>,
    /// Fraction of seeds whose own errors drop by the required ratio at every
    /// rung.
    pub per_seed_fraction: f64,
    pub max_ratio: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyParams {
    pub t_final: f64,
    pub theta: f64,
    pub tol: f64,
    pub record_every: usize,
    /// Required decrease per rung.
    pub max_ratio: f64,
    /// Required fraction of seeds that decrease at every rung.
    pub seed_fraction: f64,
}

impl Default for StudyParams {
    fn default() -> Self {
        StudyParams {
            t_final: 0.0625,
            theta: 1.0,
            tol: 1e-10,
            record_every: 1,
            max_ratio: 0.8,
            seed_fraction: 0.9,
        }
    }
}

/// Environment realization `r` of a spec; non-random specs are returned as is.
pub fn replica_spec(spec: &EnvSpec, r: u64) -> EnvSpec {
    let mut s = spec.clone();
    if matches!(s.spatial, Spatial::Checkerboard) {
        s.seed = rng::hash(spec.seed, &[rng::domain::ENV_CELL, r]);
    }
    s
}

/// For each `eps` and environment replica, the weighted error between the
/// oscillatory solution and the single homogenized solution.
#[allow(clippy::too_many_arguments)]
pub fn convergence_study(
    spec: &EnvSpec,
    law: &EffectiveLaw,
    u0: &GridFunction,
    f: &Forcing,
    torus: Torus,
    epsilon_ladder: &[f64],
    n_replicas: usize,
    params: &StudyParams,
) -> Result<ConvergenceStudy> {
    if epsilon_ladder.is_empty() || epsilon_ladder.windows(2).any(|w| w[1] >= w[0]) {
        return Err(invalid("epsilon_ladder", "must be decreasing"));
    }
    if n_replicas == 0 {
        return Err(invalid("n_replicas", "must be positive"));
    }
    for &e in epsilon_ladder {
        torus.check_epsilon(e)?;
    }
    let limit = solve_homogenized(law, u0, f, params.t_final, torus, params.record_every, params.tol)?;
    let jobs: Vec<(usize, u64)> = (0..epsilon_ladder.len())
        .flat_map(|e| (0..n_replicas as u64).map(move |r| (e, r)))
        .collect();
    let rows: Vec<StudyRow> = jobs
        .par_iter()
        .map(|&(e, r)| {
            let rspec = replica_spec(spec, r);
            let seed = rspec.seed;
            let field = crate::env::build_environment(rspec)?;
            let eps = epsilon_ladder[e];
            let traj = solve_oscillatory(
                &ParabolicProblem {
                    coefficients: Coefficients::Field { field: &field, epsilon: eps },
                    torus,
                    u0,
                    f,
                    t_final: params.t_final,
                    record_every: params.record_every,
                },
                params.tol,
            )?;
            let mut report = weighted_error(&traj.u, &limit.u, params.theta)?;
            report.epsilon = Some(eps);
            report.seeds = vec![seed];
            Ok(StudyRow { epsilon: eps, seed, report })
        })
        .collect::<Result<_>>()?;
    let ne = epsilon_ladder.len();
    let summary: Vec<StudySummary> = (0..ne)
        .map(|e| {
            let xs: Vec<f64> = rows[e * n_replicas..(e + 1) * n_replicas]
                .iter()
                .map(|r| r.report.integrated)
                .collect();
            StudySummary {
                epsilon: epsilon_ladder[e],
                error: Estimate::from_samples(&xs),
            }
        })
        .collect();
    let ratios: Vec<f64> = summary.windows(2).map(|w| w[1].error.mean / w[0].error.mean).collect();
    let good = (0..n_replicas)
        .filter(|&r| (1..ne).all(|e| rows[e * n_replicas + r].report.integrated <= params.max_ratio * rows[(e - 1) * n_replicas + r].report.integrated))
        .count();
    let per_seed_fraction = good as f64 / n_replicas as f64;
    let pass = ratios.iter().all(|&q| q <= params.max_ratio) && per_seed_fraction >= params.seed_fraction;
    Ok(ConvergenceStudy {
        rows,
        summary,
        ratios,
        per_seed_fraction,
        max_ratio: params.max_ratio,
        pass,
    })
}
