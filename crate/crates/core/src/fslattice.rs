//! Interacting diffusions of interface heights and the continuous model.
//!
//! The lattice dynamics is
//! `d Phi(x) = sum_a [V'(D_a^+ Phi)(x) - V'(D_a^+ Phi)(x - e_a)] dt + sqrt(2) dB(x)`
//! on the periodic box of side `N`, stepped by Euler–Maruyama. The continuous
//! model is assembled from the splitting `U = eps V(t / eps^2, x / eps) + W`,
//! where `V` solves the forced heat equation and `W` a divergence-form problem
//! with the shifted nonlinearity `A(p + DV) - DV`.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{build_environment, EnvKind, EnvSpec};
use crate::error::{invalid, Error, Result};
use crate::grid::{Grid, GridFunction, Quantity, MAX_DIM};
use crate::linspde::{BumpSpec, Channel, LinearSpde, NoiseRealization};
use crate::multiscale::{self, Coefficients, Forcing, ParabolicProblem, Torus, WeightedErrorReport};
use crate::rng::{self, domain};
use crate::stats::Estimate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum PotentialSpec {
    /// `V(r) = r^2 / 2`.
    Quadratic,
    /// `V(r) = r^2 / 2 + beta log cosh r`, `beta > -1`.
    QuadTanh { beta: f64 },
}

impl PotentialSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PotentialSpec::Quadratic => Ok(()),
            PotentialSpec::QuadTanh { beta } if beta > -1.0 && beta.is_finite() => Ok(()),
            PotentialSpec::QuadTanh { .. } => Err(invalid("potential.beta", "must be finite and > -1")),
        }
    }

    pub fn value(&self, r: f64) -> f64 {
        match *self {
            PotentialSpec::Quadratic => 0.5 * r * r,
            // log cosh r = |r| + log(1 + e^{-2|r|}) - log 2, stable for large r
            PotentialSpec::QuadTanh { beta } => {
                let a = r.abs();
                0.5 * r * r + beta * (a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2)
            }
        }
    }

    #[inline]
    pub fn derivative(&self, r: f64) -> f64 {
        match *self {
            PotentialSpec::Quadratic => r,
            PotentialSpec::QuadTanh { beta } => r + beta * r.tanh(),
        }
    }

    pub fn curvature(&self, r: f64) -> f64 {
        match *self {
            PotentialSpec::Quadratic => 1.0,
            PotentialSpec::QuadTanh { beta } => 1.0 + beta / r.cosh().powi(2),
        }
    }

    /// `(inf V'', sup V'')`.
    pub fn curvature_bounds(&self) -> (f64, f64) {
        match *self {
            PotentialSpec::Quadratic => (1.0, 1.0),
            PotentialSpec::QuadTanh { beta } => (1.0f64.min(1.0 + beta), 1.0f64.max(1.0 + beta)),
        }
    }
}

/// Independent `N(0, 1)` draws per `(step, site)`. Sites are keyed by their
/// coordinates plus `offset`, reduced mod `N`, so a run with shifted data and
/// offset `k` sees the noise of the original run shifted by `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatticeNoise {
    pub seed: u64,
    pub offset: [i64; MAX_DIM],
}

impl LatticeNoise {
    pub fn new(seed: u64) -> Self {
        LatticeNoise {
            seed,
            offset: [0; MAX_DIM],
        }
    }

    fn draw(&self, step: u64, c: &[usize], n: usize) -> f64 {
        let mut words = [domain::LATTICE, step, 0, 0, 0];
        for (a, &x) in c.iter().enumerate() {
            words[2 + a] = rng::word((x as i64 + self.offset[a]).rem_euclid(n as i64));
        }
        StandardNormal.sample(&mut rng::stream(self.seed, &words))
    }
}

/// Drift `sum_a [V'(D_a^+ Phi)(x) - V'(D_a^+ Phi)(x - e_a)]` on a lattice grid
/// (`per_cell = 1`).
pub fn lattice_drift(potential: &PotentialSpec, grid: &Grid, phi: &[f64], out: &mut [f64]) {
    let len = grid.len();
    out[..len].iter_mut().for_each(|v| *v = 0.0);
    for a in 0..grid.dim {
        for i in 0..len {
            let fwd = potential.derivative(phi[grid.neighbor(i, a, true)] - phi[i]);
            let bwd = potential.derivative(phi[i] - phi[grid.neighbor(i, a, false)]);
            out[i] += fwd - bwd;
        }
    }
}

/// Euler–Maruyama trajectory on the box of side `n`; `noise = None` gives the
/// deterministic gradient flow.
#[allow(clippy::too_many_arguments)]
pub fn simulate_lattice(
    potential: &PotentialSpec,
    n: usize,
    d: usize,
    dt: f64,
    t_final: f64,
    phi0: &[f64],
    noise: Option<&LatticeNoise>,
    record_every: usize,
) -> Result<GridFunction> {
    potential.validate()?;
    let grid = Grid::new(d, n, 1)?;
    if phi0.len() != grid.len() || phi0.iter().any(|v| !v.is_finite()) {
        return Err(Error::MeshMismatch("initial field must have one finite value per site".into()));
    }
    let (_, sup) = potential.curvature_bounds();
    if !(dt > 0.0) || dt * sup * 2.0 * d as f64 >= 1.0 {
        return Err(Error::Unstable(format!(
            "explicit step dt = {dt} violates dt * sup V'' * 2d < 1"
        )));
    }
    let steps = (t_final / dt).round();
    if !(t_final >= 0.0) || (steps * dt - t_final).abs() > 1e-9 * t_final.max(dt) {
        return Err(invalid("T", "must be a non-negative multiple of dt"));
    }
    let steps = steps as u64;
    let stride = record_every.max(1) as u64;
    let len = grid.len();
    let amp = (2.0 * dt).sqrt();
    let mut phi = phi0.to_vec();
    let mut drift = vec![0.0; len];
    let mut out = GridFunction::trajectory(grid, 1, Quantity::Phi, dt * stride as f64);
    out.push_frame(0.0, &phi);
    let coords: Vec<[usize; MAX_DIM]> = (0..len).map(|i| grid.coords(i)).collect();
    for k in 0..steps {
        lattice_drift(potential, &grid, &phi, &mut drift);
        match noise {
            Some(nz) => {
                let xi: Vec<f64> = coords.par_iter().map(|c| nz.draw(k, &c[..d], n)).collect();
                for i in 0..len {
                    phi[i] += dt * drift[i] + amp * xi[i];
                }
            }
            None => {
                for i in 0..len {
                    phi[i] += dt * drift[i];
                }
            }
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Unstable(format!("non-finite height at step {}", k + 1)));
        }
        if (k + 1) % stride == 0 || k + 1 == steps {
            out.push_frame((k + 1) as f64 * dt, &phi);
        }
    }
    Ok(out)
}

/// `Phi0(x) = u0(eps x) / eps + sigma xi(x)` with i.i.d. standard normal `xi`.
pub fn initial_heights(n: usize, d: usize, eps: f64, u0: impl Fn(&[f64]) -> f64, sigma: f64, seed: u64) -> Result<Vec<f64>> {
    let grid = Grid::new(d, n, 1)?;
    Ok((0..grid.len())
        .map(|i| {
            let c = grid.coords(i);
            let mut r = [0.0; MAX_DIM];
            let mut words = [domain::INITIAL, 0, 0, 0];
            for a in 0..d {
                r[a] = eps * c[a] as f64;
                words[1 + a] = c[a] as u64;
            }
            let xi: f64 = StandardNormal.sample(&mut rng::stream(seed, &words));
            u0(&r[..d]) / eps + sigma * xi
        })
        .collect())
}

/// Piecewise constant field `eps Phi_{t / eps^2}` on the torus of side
/// `N eps`. Node `i` of `field.grid` is the centre of the cube
/// `[x - eps/2, x + eps/2)^d` of site `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct RescaledField {
    pub epsilon: f64,
    pub field: GridFunction,
}

impl RescaledField {
    /// `Phi^eps(r)` at frame `k`.
    pub fn eval(&self, r: &[f64], k: usize) -> f64 {
        let g = &self.field.grid;
        let c: Vec<i64> = r.iter().map(|&x| (x / self.epsilon + 0.5).floor() as i64).collect();
        self.field.frame(k)[g.index_wrapped(&c)]
    }
}

pub fn rescale_field(traj: &GridFunction, epsilon: f64) -> Result<RescaledField> {
    let n = traj.grid.cells;
    if traj.grid.per_cell != 1 {
        return Err(invalid("trajectory", "expected a lattice trajectory"));
    }
    let side = n as f64 * epsilon;
    let cells = side.round();
    if !(epsilon > 0.0) || cells < 1.0 || (side - cells).abs() > 1e-9 {
        return Err(invalid("epsilon", "N eps must be a positive integer"));
    }
    let per = n / cells as usize;
    let grid = Grid::new(traj.grid.dim, cells as usize, per)?;
    let mut field = GridFunction::trajectory(grid, 1, Quantity::Phi, traj.dt * epsilon * epsilon);
    for k in 0..traj.steps() {
        let frame: Vec<f64> = traj.frame(k).iter().map(|v| epsilon * v).collect();
        field.push_frame(traj.times[k] * epsilon * epsilon, &frame);
    }
    Ok(RescaledField { epsilon, field })
}

/// Source of the gradient that shifts the nonlinearity of `W`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientSource {
    /// `DV` of the solution started from zero at time 0.
    Transient,
    /// `DV` of the solution started at `-burn_in`, the attractor estimate.
    Attractor { burn_in: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousModel {
    pub bump: BumpSpec,
    /// Shifted-linear description of `A`; its seed is replaced by `seed_env`
    /// when random.
    pub cal_a: EnvSpec,
    pub torus: Torus,
    pub t_final: f64,
    pub source: GradientSource,
    pub record_every: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousRun {
    pub epsilon: f64,
    pub seed_noise: u64,
    pub seed_env: u64,
    /// `eps V_{t / eps^2}(x / eps)`.
    pub v_part: GridFunction,
    pub w: GridFunction,
    /// `v_part + w`.
    pub u: GridFunction,
}

/// Heat-equation part on the `eps`-scaled grid: the field `V` at every
/// recorded macroscopic step and the shifting gradient at every step.
fn micro_fields(model: &ContinuousModel, eps: f64, seed_noise: u64) -> Result<(GridFunction, GridFunction, Vec<usize>)> {
    let t = &model.torus;
    let k = (1.0 / eps).round() as usize;
    let micro = Grid::new(t.dim, t.side * k, t.per_cell / k)?;
    let dtau = t.dt / (eps * eps);
    let steps = (model.t_final / t.dt).round() as usize;
    let stride = model.record_every.max(1);
    let recorded: Vec<usize> = (0..=steps).filter(|&s| s % stride == 0 || s == steps).collect();
    let eng = LinearSpde::new(micro, dtau, model.bump)?;
    let noise = NoiseRealization::new(seed_noise, t.dim, dtau)?;
    let mut channels = vec![Channel::full(0.0)];
    if let GradientSource::Attractor { burn_in } = model.source {
        if !(burn_in > 0.0) {
            return Err(invalid("burn_in", "must be positive"));
        }
        let b = (burn_in / dtau).round() * dtau;
        channels.push(Channel::full(-b));
    }
    let times: Vec<f64> = (0..=steps).map(|s| s as f64 * dtau).collect();
    let mut v = GridFunction::trajectory(micro, 1, Quantity::V, dtau * stride as f64);
    let mut z = GridFunction::trajectory(micro, t.dim, Quantity::Z, dtau);
    let mut next = 0;
    eng.run(&noise, &channels, times[steps], &times, |s, st| {
        let vr = eng.to_real(&st[0]);
        if recorded.get(next) == Some(&s) {
            v.push_frame(times[s], &vr);
            next += 1;
        }
        let grad = match channels.len() {
            1 => eng.gradient(&vr),
            _ => eng.gradient(&eng.to_real(&st[1])),
        };
        z.push_frame(times[s], &grad);
        Ok(())
    })?;
    Ok((v, z, recorded))
}

/// `U^eps = eps V_{t/eps^2}(x/eps) + W^eps` for one noise and one environment
/// realization.
pub fn simulate_continuous_model(
    model: &ContinuousModel,
    epsilon: f64,
    u0: &GridFunction,
    seed_noise: u64,
    seed_env: u64,
) -> Result<ContinuousRun> {
    model.bump.validate()?;
    model.torus.check_epsilon(epsilon)?;
    if model.cal_a.kind != EnvKind::ShiftedLinear {
        return Err(invalid("cal_a.kind", "the continuous model needs a shifted-linear environment"));
    }
    let (v, z, _) = micro_fields(model, epsilon, seed_noise)?;
    let mut spec = model.cal_a.clone();
    if spec.is_random() {
        spec.seed = seed_env;
    }
    let field = build_environment(spec)?.with_external(Arc::new(z))?;
    let w = multiscale::solve_oscillatory(
        &ParabolicProblem {
            coefficients: Coefficients::Field { field: &field, epsilon },
            torus: model.torus,
            u0,
            f: &Forcing::Constant(0.0),
            t_final: model.t_final,
            record_every: model.record_every,
        },
        model.tol,
    )?
    .u;
    let grid = model.torus.grid()?;
    if v.steps() != w.steps() {
        return Err(Error::MeshMismatch("V and W recorded on different steps".into()));
    }
    let mut v_part = GridFunction::trajectory(grid, 1, Quantity::V, w.dt);
    let mut u = GridFunction::trajectory(grid, 1, Quantity::U, w.dt);
    for k in 0..w.steps() {
        let vp: Vec<f64> = v.frame(k).iter().map(|x| epsilon * x).collect();
        let sum: Vec<f64> = vp.iter().zip(w.frame(k)).map(|(a, b)| a + b).collect();
        v_part.push_frame(w.times[k], &vp);
        u.push_frame(w.times[k], &sum);
    }
    Ok(ContinuousRun {
        epsilon,
        seed_noise,
        seed_env,
        v_part,
        w,
        u,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HydroReport {
    pub per_seed: Vec<WeightedErrorReport>,
    /// Weighted error at the last recorded time.
    pub final_error: Estimate,
    /// `(int_0^T |.|^2 dt)^{1/2}` per seed.
    pub integrated: Estimate,
    /// `int_0^T |.|^2 dt` per seed.
    pub integrated_sq: Estimate,
}

/// Weighted errors of each random field against the deterministic limit.
pub fn compare_hydrodynamic(fields: &[&GridFunction], limit: &GridFunction, theta: f64) -> Result<HydroReport> {
    if fields.is_empty() {
        return Err(invalid("fields", "nothing to compare"));
    }
    let per_seed = fields
        .iter()
        .map(|f| multiscale::weighted_error(f, limit, theta))
        .collect::<Result<Vec<_>>>()?;
    let pick = |g: &dyn Fn(&WeightedErrorReport) -> f64| Estimate::from_samples(&per_seed.iter().map(g).collect::<Vec<_>>());
    Ok(HydroReport {
        final_error: pick(&|r| *r.errors.last().unwrap()),
        integrated: pick(&|r| r.integrated),
        integrated_sq: pick(&|r| r.integrated * r.integrated),
        per_seed,
    })
}
