//! Preconditioned fixed-point solver for discrete strongly monotone
//! space(-time) problems
//!
//! ```text
//! F(u) = mass u - lambda d_tt u + d_t u - div_h a(D_h u + p, x, t) - rhs = 0
//! ```
//!
//! on a periodic grid, or on a box with zero data obtained by pinning the
//! index-0 planes. `D_h` is the forward difference, `div_h` the backward
//! difference (its negative adjoint), and the flux at node `x` is evaluated
//! with the coefficient of the dual point `x + h/2 (1, ..., 1)`.
//!
//! The iteration is `u <- u - M^{-1} F(u)` with the constant-coefficient
//! operator `M = mass - lambda d_tt + d_t - beta Delta_h`, inverted exactly by
//! FFT (periodic) or by sine transforms in space and a tridiagonal solve in
//! time (box). With `beta = (m + Lambda) / 2` for fields with symmetric
//! Jacobian, increments contract by `(Lambda - m) / (Lambda + m)` in the norm
//! `|z|_E^2 = <(mass z^2 + lambda |d_t^+ z|^2) / beta + |D_h z|^2>`, which is
//! the norm used for residuals.

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::env::{CoefficientField, LocalLaw};
use crate::error::{invalid, Error, Result};
use crate::fft::{Dst1, NdFft};
use crate::grid::{backward_divergence, Grid, MAX_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    Periodic,
    /// Zero on the index-0 planes in space and (if there is a time axis) time.
    Dirichlet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeDerivative {
    #[default]
    Central,
    Backward,
}

/// The linear, constant-coefficient part of the operator and its mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Operator {
    pub grid: Grid,
    /// Number of time nodes; 1 means no time axis.
    pub nt: usize,
    pub dt: f64,
    pub mass: f64,
    /// Coefficient of `-d_tt`.
    pub lambda_tt: f64,
    /// Whether `d_t` is present.
    pub transport: bool,
    pub derivative: TimeDerivative,
    pub boundary: Boundary,
}

impl Operator {
    pub fn len(&self) -> usize {
        self.nt * self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn has_time(&self) -> bool {
        self.nt > 1
    }

    /// Whether node `idx` of the space-time array is pinned to zero.
    pub fn pinned(&self, idx: usize) -> bool {
        if self.boundary == Boundary::Periodic {
            return false;
        }
        let len = self.grid.len();
        let (t, i) = (idx / len, idx % len);
        if self.has_time() && t == 0 {
            return true;
        }
        let c = self.grid.coords(i);
        c[..self.grid.dim].contains(&0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Use the symmetric-Jacobian damping `beta = (m + Lambda) / 2`; otherwise
    /// `beta = Lambda^2 / m`, valid for any strongly monotone Lipschitz field.
    pub symmetric: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_iter: 2000,
            symmetric: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub u: Vec<f64>,
    /// `a(D u + p)`, component-major per time slice: `[t][component][node]`.
    pub flux: Vec<f64>,
    /// `D u`, same layout as `flux`.
    pub grad: Vec<f64>,
    /// `|M^{-1} F(u)|_E` at the returned iterate.
    pub residual: f64,
    pub iterations: usize,
    /// Residual (increment energy) at every iterate.
    pub history: Vec<f64>,
    pub beta: f64,
}

/// A vector field `q -> a(q)` attached to every node of a space-time array.
pub trait NodeFlux: Sync {
    fn flux_at(&self, node: usize, q: &[f64], out: &mut [f64]);
    /// Number of nodes covered, or `None` if the field is the same everywhere.
    fn nodes(&self) -> Option<usize>;
}

impl NodeFlux for [LocalLaw] {
    #[inline]
    fn flux_at(&self, node: usize, q: &[f64], out: &mut [f64]) {
        self[node].flux(q, out);
    }

    fn nodes(&self) -> Option<usize> {
        Some(self.len())
    }
}

impl NodeFlux for Vec<LocalLaw> {
    #[inline]
    fn flux_at(&self, node: usize, q: &[f64], out: &mut [f64]) {
        self[node].flux(q, out);
    }

    fn nodes(&self) -> Option<usize> {
        Some(self.len())
    }
}

/// Problem data: the operator, coefficient laws for every node (layout
/// `[t][node]`), the constant slope `p` and an optional right-hand side.
pub struct Problem<'a> {
    pub op: Operator,
    pub laws: &'a dyn NodeFlux,
    pub p: [f64; MAX_DIM],
    pub rhs: Option<&'a [f64]>,
    /// Monotonicity and Lipschitz constants of the laws.
    pub monotonicity: f64,
    pub lipschitz: f64,
}

/// Laws at the dual points `(origin + x + h/2) / eps` and times `t / eps^2`.
pub fn sample_laws(
    field: &CoefficientField,
    grid: &Grid,
    times: &[f64],
    origin: &[f64],
    eps: f64,
) -> Result<Vec<LocalLaw>> {
    if field.dim() != grid.dim {
        return Err(Error::MeshMismatch("field and grid dimensions differ".into()));
    }
    let len = grid.len();
    let d = grid.dim;
    let half = 0.5 * grid.h();
    let mut ys = vec![[0.0; MAX_DIM]; len];
    for (i, y) in ys.iter_mut().enumerate() {
        let x = grid.position(i);
        for a in 0..d {
            y[a] = (origin[a] + x[a] + half) / eps;
        }
    }
    let mut out = Vec::with_capacity(times.len() * len);
    let stat = field.is_static();
    for (k, &t) in times.iter().enumerate() {
        if stat && k > 0 {
            out.extend_from_within(0..len);
            continue;
        }
        let tau = t / (eps * eps);
        for y in &ys {
            out.push(field.law_at(&y[..d], tau)?);
        }
    }
    Ok(out)
}

struct Workspace {
    q: Vec<f64>,
    div: Vec<f64>,
}

struct Preconditioner {
    op: Operator,
    beta: f64,
    periodic: Option<(NdFft, Vec<Complex64>)>,
    dirichlet: Option<DirichletSolver>,
}

struct DirichletSolver {
    dst: Dst1,
    /// Eigenvalues of `-Delta_h` per interior spatial mode.
    mu: Vec<f64>,
    interior_shape: Vec<usize>,
}

impl Preconditioner {
    fn new(op: Operator, beta: f64) -> Self {
        let g = op.grid;
        let n = g.n();
        let d = g.dim;
        let h2 = g.h() * g.h();
        match op.boundary {
            Boundary::Periodic => {
                let mut shape = vec![op.nt];
                shape.extend(std::iter::repeat_n(n, d));
                let fft = NdFft::new(&shape);
                let s2: Vec<f64> = (0..n)
                    .map(|j| 4.0 / h2 * (std::f64::consts::PI * j as f64 / n as f64).sin().powi(2))
                    .collect();
                let len = g.len();
                let mut symbol = Vec::with_capacity(op.len());
                for k in 0..op.nt {
                    let theta = 2.0 * std::f64::consts::PI * k as f64 / op.nt as f64;
                    let mut time = Complex64::new(op.mass, 0.0);
                    if op.has_time() {
                        time += op.lambda_tt * 4.0 / (op.dt * op.dt) * (0.5 * theta).sin().powi(2);
                        if op.transport {
                            time += match op.derivative {
                                TimeDerivative::Central => Complex64::new(0.0, theta.sin() / op.dt),
                                TimeDerivative::Backward => {
                                    (Complex64::new(1.0, 0.0) - Complex64::from_polar(1.0, -theta)) / op.dt
                                }
                            };
                        }
                    }
                    for i in 0..len {
                        let c = g.coords(i);
                        let mu: f64 = (0..d).map(|a| s2[c[a]]).sum();
                        symbol.push(time + beta * mu);
                    }
                }
                Preconditioner {
                    op,
                    beta,
                    periodic: Some((fft, symbol)),
                    dirichlet: None,
                }
            }
            Boundary::Dirichlet => {
                let ni = n - 1;
                let s2: Vec<f64> = (1..=ni)
                    .map(|k| 4.0 / h2 * (std::f64::consts::PI * k as f64 / (2 * n) as f64).sin().powi(2))
                    .collect();
                let nodes = ni.pow(d as u32);
                let mu = (0..nodes)
                    .map(|i| {
                        let mut r = i;
                        let mut s = 0.0;
                        for _ in 0..d {
                            s += s2[r % ni];
                            r /= ni;
                        }
                        s
                    })
                    .collect();
                let nt_i = if op.has_time() { op.nt - 1 } else { 1 };
                let mut interior_shape = vec![nt_i];
                interior_shape.extend(std::iter::repeat_n(ni, d));
                Preconditioner {
                    op,
                    beta,
                    periodic: None,
                    dirichlet: Some(DirichletSolver {
                        dst: Dst1::new(ni),
                        mu,
                        interior_shape,
                    }),
                }
            }
        }
    }

    /// Solves `M z = r` in place.
    fn apply(&self, r: &mut [f64]) {
        if let Some((fft, symbol)) = &self.periodic {
            let mut buf: Vec<Complex64> = r.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft.forward(&mut buf);
            for (b, s) in buf.iter_mut().zip(symbol) {
                *b = if s.norm_sqr() == 0.0 {
                    Complex64::new(0.0, 0.0)
                } else {
                    *b / s
                };
            }
            fft.inverse(&mut buf);
            for (v, b) in r.iter_mut().zip(&buf) {
                *v = b.re;
            }
            return;
        }
        let ds = self.dirichlet.as_ref().expect("dirichlet solver");
        let op = &self.op;
        let g = op.grid;
        let d = g.dim;
        let n = g.n();
        let ni = n - 1;
        let len = g.len();
        let nodes = ni.pow(d as u32);
        let t_off = usize::from(op.has_time());
        let nt_i = ds.interior_shape[0];
        // gather interior
        let mut w = vec![0.0; nt_i * nodes];
        let interior_index = |k: usize| -> usize {
            let mut r = k;
            let mut idx = 0;
            let mut stride = 1;
            for _ in (0..d).rev() {
                idx += (r % ni + 1) * stride;
                r /= ni;
                stride *= n;
            }
            idx
        };
        for t in 0..nt_i {
            for k in 0..nodes {
                w[t * nodes + k] = r[(t + t_off) * len + interior_index(k)];
            }
        }
        for a in 1..=d {
            ds.dst.transform_axis(&mut w, &ds.interior_shape, a);
        }
        let scale = (2.0 / n as f64).powi(d as i32);
        if op.has_time() {
            let dt = op.dt;
            let mut lower = -op.lambda_tt / (dt * dt);
            let mut upper = -op.lambda_tt / (dt * dt);
            let mut diag_t = op.mass + 2.0 * op.lambda_tt / (dt * dt);
            if op.transport {
                match op.derivative {
                    TimeDerivative::Central => {
                        lower -= 0.5 / dt;
                        upper += 0.5 / dt;
                    }
                    TimeDerivative::Backward => {
                        diag_t += 1.0 / dt;
                        lower -= 1.0 / dt;
                    }
                }
            }
            let mut cp = vec![0.0; nt_i];
            let mut dp = vec![0.0; nt_i];
            for k in 0..nodes {
                let diag = diag_t + self.beta * ds.mu[k];
                // Thomas algorithm along time
                cp[0] = upper / diag;
                dp[0] = w[k] / diag;
                for t in 1..nt_i {
                    let den = diag - lower * cp[t - 1];
                    cp[t] = upper / den;
                    dp[t] = (w[t * nodes + k] - lower * dp[t - 1]) / den;
                }
                w[(nt_i - 1) * nodes + k] = dp[nt_i - 1];
                for t in (0..nt_i - 1).rev() {
                    w[t * nodes + k] = dp[t] - cp[t] * w[(t + 1) * nodes + k];
                }
            }
        } else {
            for k in 0..nodes {
                w[k] /= op.mass + self.beta * ds.mu[k];
            }
        }
        for a in 1..=d {
            ds.dst.transform_axis(&mut w, &ds.interior_shape, a);
        }
        r.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..nt_i {
            for k in 0..nodes {
                r[(t + t_off) * len + interior_index(k)] = w[t * nodes + k] * scale;
            }
        }
    }
}

impl Problem<'_> {
    fn check(&self) -> Result<()> {
        let op = &self.op;
        if op.nt == 0 {
            return Err(invalid("nt", "must be positive"));
        }
        if let Some(nodes) = self.laws.nodes() {
            if nodes != op.len() {
                return Err(Error::MeshMismatch(format!(
                    "{nodes} laws for {} nodes",
                    op.len()
                )));
            }
        }
        if let Some(r) = self.rhs {
            if r.len() != op.len() {
                return Err(Error::MeshMismatch("right-hand side size".into()));
            }
        }
        if !(self.monotonicity > 0.0 && self.lipschitz >= self.monotonicity) {
            return Err(invalid("constants", "need 0 < m <= Lambda"));
        }
        if op.has_time() && !(op.dt > 0.0) {
            return Err(invalid("dt", "must be positive"));
        }
        if op.boundary == Boundary::Dirichlet && op.grid.n() < 2 {
            return Err(invalid("grid", "box needs at least two nodes per axis"));
        }
        if op.mass < 0.0 || op.lambda_tt < 0.0 {
            return Err(invalid("mass", "coefficients must be non-negative"));
        }
        Ok(())
    }

    /// `F(u)`, also storing `D u` and `a(D u + p)`.
    fn residual(&self, u: &[f64], out: &mut [f64], grad: &mut [f64], flux: &mut [f64], ws: &mut Workspace) {
        let op = &self.op;
        let g = op.grid;
        let d = g.dim;
        let len = g.len();
        let inv_h = 1.0 / g.h();
        let nt = op.nt;
        let mut q = [0.0; MAX_DIM];
        let mut f = [0.0; MAX_DIM];
        for t in 0..nt {
            let ut = &u[t * len..(t + 1) * len];
            let gt = &mut grad[t * d * len..(t + 1) * d * len];
            let ft = &mut flux[t * d * len..(t + 1) * d * len];
            for i in 0..len {
                for a in 0..d {
                    let v = (ut[g.neighbor(i, a, true)] - ut[i]) * inv_h;
                    gt[a * len + i] = v;
                    q[a] = v + self.p[a];
                }
                self.laws.flux_at(t * len + i, &q[..d], &mut f[..d]);
                for a in 0..d {
                    ft[a * len + i] = f[a];
                }
            }
            ws.q.copy_from_slice(ft);
            backward_divergence(&g, &ws.q, &mut ws.div);
            let tp = (t + 1) % nt;
            let tm = (t + nt - 1) % nt;
            let up = &u[tp * len..(tp + 1) * len];
            let um = &u[tm * len..(tm + 1) * len];
            let o = &mut out[t * len..(t + 1) * len];
            for i in 0..len {
                let mut v = op.mass * ut[i] - ws.div[i];
                if op.has_time() {
                    v -= op.lambda_tt * (up[i] - 2.0 * ut[i] + um[i]) / (op.dt * op.dt);
                    if op.transport {
                        v += match op.derivative {
                            TimeDerivative::Central => (up[i] - um[i]) / (2.0 * op.dt),
                            TimeDerivative::Backward => (ut[i] - um[i]) / op.dt,
                        };
                    }
                }
                o[i] = v;
            }
        }
        if let Some(r) = self.rhs {
            for (o, r) in out.iter_mut().zip(r) {
                *o -= r;
            }
        }
        if op.boundary == Boundary::Dirichlet {
            for (i, o) in out.iter_mut().enumerate() {
                if op.pinned(i) {
                    *o = 0.0;
                }
            }
        }
    }

    /// `|z|_E`, averaged over nodes.
    pub fn energy_norm(&self, z: &[f64], beta: f64) -> f64 {
        let op = &self.op;
        let g = op.grid;
        let len = g.len();
        let inv_h = 1.0 / g.h();
        let nt = op.nt;
        let mut acc = 0.0;
        for t in 0..nt {
            let zt = &z[t * len..(t + 1) * len];
            let tp = (t + 1) % nt;
            let zp = &z[tp * len..(tp + 1) * len];
            for i in 0..len {
                let mut e = op.mass * zt[i] * zt[i];
                if op.has_time() {
                    e += op.lambda_tt * ((zp[i] - zt[i]) / op.dt).powi(2);
                }
                let mut s = e / beta;
                for a in 0..g.dim {
                    s += ((zt[g.neighbor(i, a, true)] - zt[i]) * inv_h).powi(2);
                }
                acc += s;
            }
        }
        (acc / op.len() as f64).sqrt()
    }

    pub fn beta(&self, symmetric: bool) -> f64 {
        let (m, l) = (self.monotonicity, self.lipschitz);
        if symmetric {
            0.5 * (m + l)
        } else {
            l * l / m
        }
    }

    /// Runs the iteration from `init` (zero if `None`).
    pub fn solve(&self, init: Option<&[f64]>, opts: &SolverOptions) -> Result<Solution> {
        self.check()?;
        if !(opts.tol > 0.0) {
            return Err(invalid("tol", "must be positive"));
        }
        let op = self.op;
        let n = op.len();
        let d = op.grid.dim;
        let beta = self.beta(opts.symmetric);
        let pre = Preconditioner::new(op, beta);
        let mut u = match init {
            Some(v) if v.len() == n => v.to_vec(),
            Some(_) => return Err(Error::MeshMismatch("initial guess size".into())),
            None => vec![0.0; n],
        };
        if op.boundary == Boundary::Dirichlet {
            for (i, v) in u.iter_mut().enumerate() {
                if op.pinned(i) {
                    *v = 0.0;
                }
            }
        }
        let mut ws = Workspace {
            q: vec![0.0; d * op.grid.len()],
            div: vec![0.0; op.grid.len()],
        };
        let mut f = vec![0.0; n];
        let mut grad = vec![0.0; d * n];
        let mut flux = vec![0.0; d * n];
        let mut grad_new = vec![0.0; d * n];
        let mut flux_new = vec![0.0; d * n];
        self.residual(&u, &mut f, &mut grad, &mut flux, &mut ws);
        let mut history = Vec::new();
        let mut first = None;
        let mut iteration = 0;
        loop {
            let mut z = f.clone();
            pre.apply(&mut z);
            let res = self.energy_norm(&z, beta);
            if !res.is_finite() {
                return Err(Error::Unstable("non-finite residual in monotone iteration".into()));
            }
            let r0 = *first.get_or_insert(res);
            if let Some(&prev) = history.last() {
                if res > prev * (1.0 + 1e-9) + 1e-14 * r0 {
                    return Err(Error::EnergyIncrease {
                        iteration,
                        previous: prev,
                        current: res,
                    });
                }
            }
            history.push(res);
            if res <= opts.tol {
                return Ok(Solution {
                    u,
                    flux,
                    grad,
                    residual: res,
                    iterations: iteration,
                    history,
                    beta,
                });
            }
            if iteration >= opts.max_iter {
                return Err(Error::NotConverged {
                    iterations: iteration,
                    residual: res,
                });
            }
            for (ui, zi) in u.iter_mut().zip(&z) {
                *ui -= zi;
            }
            self.residual(&u, &mut f, &mut grad_new, &mut flux_new, &mut ws);
            let mut inner = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for k in 0..d * n {
                let da = flux_new[k] - flux[k];
                let dg = grad_new[k] - grad[k];
                inner += da * dg;
                na += da * da;
                nb += dg * dg;
            }
            if inner < -1e-10 * (na * nb).sqrt() {
                return Err(Error::MonotonicityLost { iteration, inner });
            }
            std::mem::swap(&mut grad, &mut grad_new);
            std::mem::swap(&mut flux, &mut flux_new);
            iteration += 1;
        }
    }
}
