//! The stochastically forced heat equation
//! `dV = Delta V dt + sum_k A(x - k) . dB^k` on a periodic torus.
//!
//! Space is discretized with the standard finite-difference Laplacian, time
//! with semi-implicit Euler-Maruyama (implicit in the Laplacian, explicit
//! noise). The scheme is diagonal in Fourier space: with
//! `r_j = 1 / (1 + dt mu_j)` and `mu_j` the symbol of `-Delta_h`,
//!
//! ```text
//! V^_j <- r_j (V^_j + A^_j w^_{j mod L})
//! ```
//!
//! where `w_k = sum_i dB^k_i` are the per-site noise scalars and `w^` is
//! their `L^d` DFT. Several solutions driven by different subsets of the
//! sites (localized problems) or started at different times (shifted-start
//! problems) are advanced together on one noise path.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fft::{to_complex, NdFft};
use crate::grid::{forward_gradient, Grid, GridFunction, Quantity, MAX_DIM};
use crate::rng::{self, domain};
use crate::stats::{last_decade, loglog_fit, Estimate, SlopeFit};

/// `A_i(x) = kappa exp(-1 / (1 - |x / r0|^2))` for `|x| < r0`, identical in
/// every component `i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BumpSpec {
    pub r0: f64,
    pub kappa: f64,
}

impl Default for BumpSpec {
    fn default() -> Self {
        BumpSpec {
            r0: 0.45,
            kappa: 1.0,
        }
    }
}

impl BumpSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.r0.is_finite() && self.r0 > 0.0 && self.r0 < 0.5) {
            return Err(invalid("bump.r0", "must lie in (0, 1/2)"));
        }
        if !self.kappa.is_finite() {
            return Err(invalid("bump.kappa", "must be finite"));
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let s: f64 = x.iter().map(|v| v * v).sum::<f64>() / (self.r0 * self.r0);
        if s >= 1.0 {
            0.0
        } else {
            self.kappa * (-1.0 / (1.0 - s)).exp()
        }
    }

    /// `A` centred at the origin node of the torus.
    pub fn on_grid(&self, grid: &Grid) -> Vec<f64> {
        (0..grid.len())
            .map(|i| self.value(&grid.signed_position(i)[..grid.dim]))
            .collect()
    }
}

/// The Brownian increments `B^k_{(s+1) dt} - B^k_{s dt}` indexed by the global
/// step `s` and the site `k` in signed torus coordinates.
pub trait IncrementSource: Sync {
    fn dim(&self) -> usize;
    fn dt(&self) -> f64;
    fn increment(&self, step: i64, site: &[i64], out: &mut [f64]);
}

/// Gaussian increments generated from `(seed, step, site)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRealization {
    pub seed: u64,
    pub dim: usize,
    pub dt: f64,
}

impl NoiseRealization {
    pub fn new(seed: u64, dim: usize, dt: f64) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(invalid("dim", "must be 1, 2 or 3"));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(invalid("dt", "must be positive"));
        }
        Ok(NoiseRealization { seed, dim, dt })
    }

    /// Independent realization number `r` derived from a base seed.
    pub fn replica(base: u64, r: usize, dim: usize, dt: f64) -> Result<Self> {
        Self::new(rng::hash(base, &[domain::NOISE, r as u64]), dim, dt)
    }
}

impl IncrementSource for NoiseRealization {
    fn dim(&self) -> usize {
        self.dim
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn increment(&self, step: i64, site: &[i64], out: &mut [f64]) {
        let mut words = [domain::NOISE, rng::word(step), 0, 0, 0];
        for (a, &k) in site.iter().enumerate().take(self.dim) {
            words[2 + a] = rng::word(k);
        }
        let mut g = rng::stream(self.seed, &words);
        let s = self.dt.sqrt();
        for v in out.iter_mut().take(self.dim) {
            let z: f64 = g.sample(StandardNormal);
            *v = s * z;
        }
    }
}

/// Increments given explicitly on a torus of `cells` sites per axis for
/// steps `first_step..first_step + steps`; zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitNoise {
    pub dim: usize,
    pub dt: f64,
    pub cells: usize,
    pub first_step: i64,
    /// `[step][site][component]`, sites in row-major torus order.
    pub values: Vec<f64>,
}

impl ExplicitNoise {
    pub fn zeros(dim: usize, dt: f64, cells: usize, first_step: i64, steps: usize) -> Self {
        ExplicitNoise {
            dim,
            dt,
            cells,
            first_step,
            values: vec![0.0; steps * cells.pow(dim as u32) * dim],
        }
    }

    fn sites(&self) -> usize {
        self.cells.pow(self.dim as u32)
    }

    pub fn site_index(&self, site: &[i64]) -> usize {
        site[..self.dim]
            .iter()
            .fold(0, |acc, &k| acc * self.cells + k.rem_euclid(self.cells as i64) as usize)
    }

    pub fn set(&mut self, step: i64, site: &[i64], value: &[f64]) {
        let o = ((step - self.first_step) as usize * self.sites() + self.site_index(site)) * self.dim;
        self.values[o..o + self.dim].copy_from_slice(&value[..self.dim]);
    }

    /// Records `source` on this noise's step range.
    pub fn capture(source: &dyn IncrementSource, cells: usize, first_step: i64, steps: usize) -> Self {
        let dim = source.dim();
        let mut out = Self::zeros(dim, source.dt(), cells, first_step, steps);
        let sites = out.sites();
        let mut buf = [0.0; MAX_DIM];
        for s in 0..steps {
            for k in 0..sites {
                let site = site_coords(k, cells, dim);
                source.increment(first_step + s as i64, &site[..dim], &mut buf);
                let o = (s * sites + k) * dim;
                out.values[o..o + dim].copy_from_slice(&buf[..dim]);
            }
        }
        out
    }
}

impl IncrementSource for ExplicitNoise {
    fn dim(&self) -> usize {
        self.dim
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn increment(&self, step: i64, site: &[i64], out: &mut [f64]) {
        let rel = step - self.first_step;
        let steps = self.values.len() / (self.sites() * self.dim);
        if rel < 0 || rel as usize >= steps {
            out[..self.dim].iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let o = (rel as usize * self.sites() + self.site_index(site)) * self.dim;
        out[..self.dim].copy_from_slice(&self.values[o..o + self.dim]);
    }
}

/// Pointwise sum of two noise paths.
pub struct SumNoise<'a>(pub &'a dyn IncrementSource, pub &'a dyn IncrementSource);

impl IncrementSource for SumNoise<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn dt(&self) -> f64 {
        self.0.dt()
    }

    fn increment(&self, step: i64, site: &[i64], out: &mut [f64]) {
        let mut b = [0.0; MAX_DIM];
        self.0.increment(step, site, out);
        self.1.increment(step, site, &mut b);
        for a in 0..self.dim() {
            out[a] += b[a];
        }
    }
}

/// Signed coordinates in `[-L/2, L/2)` of torus site number `k`.
fn site_coords(mut k: usize, cells: usize, dim: usize) -> [i64; MAX_DIM] {
    let mut c = [0i64; MAX_DIM];
    for a in (0..dim).rev() {
        let v = (k % cells) as i64;
        c[a] = if 2 * v >= cells as i64 { v - cells as i64 } else { v };
        k /= cells;
    }
    c
}

/// Which sites drive a solution.
#[derive(Debug, Clone, PartialEq)]
pub enum SiteMask {
    All,
    /// Sites with minimal-image Euclidean distance `|k - center| <= radius`.
    Ball { center: Vec<i64>, radius: f64 },
}

impl SiteMask {
    fn flags(&self, cells: usize, dim: usize) -> Option<Vec<bool>> {
        match self {
            SiteMask::All => None,
            SiteMask::Ball { center, radius } => {
                let n = cells.pow(dim as u32);
                Some(
                    (0..n)
                        .map(|k| {
                            let s = site_coords(k, cells, dim);
                            let d2: f64 = (0..dim)
                                .map(|a| {
                                    let diff = (s[a] - center[a]).rem_euclid(cells as i64);
                                    let diff = diff.min(cells as i64 - diff) as f64;
                                    diff * diff
                                })
                                .sum();
                            d2 <= radius * radius * (1.0 + 1e-12)
                        })
                        .collect(),
                )
            }
        }
    }
}

/// One solution advanced by [`LinearSpde::run`].
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub mask: SiteMask,
    /// Time at which the solution starts from `init` (zero if `None`).
    pub start: f64,
    pub init: Option<Vec<f64>>,
}

impl Channel {
    pub fn full(start: f64) -> Self {
        Channel {
            mask: SiteMask::All,
            start,
            init: None,
        }
    }
}

/// Precomputed symbols of the scheme on one grid with one time step.
pub struct LinearSpde {
    grid: Grid,
    dt: f64,
    bump: BumpSpec,
    /// `-Delta_h` symbol per mode.
    mu: Vec<f64>,
    r: Vec<f64>,
    rb: Vec<Complex64>,
    residue: Vec<u32>,
    grid_fft: NdFft,
    site_fft: NdFft,
}

fn steps_of(t: f64, dt: f64, name: &'static str) -> Result<i64> {
    let s = (t / dt).round();
    if !t.is_finite() || (s * dt - t).abs() > 1e-9 * dt.max(t.abs()) {
        return Err(invalid(name, format!("{t} is not a multiple of dt = {dt}")));
    }
    Ok(s as i64)
}

impl LinearSpde {
    pub fn new(grid: Grid, dt: f64, bump: BumpSpec) -> Result<Self> {
        bump.validate()?;
        if !(dt.is_finite() && dt > 0.0) {
            return Err(invalid("dt", "must be positive"));
        }
        let n = grid.n();
        let d = grid.dim;
        let len = grid.len();
        let h2 = grid.h() * grid.h();
        let sin2: Vec<f64> = (0..n)
            .map(|j| (std::f64::consts::PI * j as f64 / n as f64).sin().powi(2) * 4.0 / h2)
            .collect();
        let mut mu = vec![0.0; len];
        let mut residue = vec![0u32; len];
        for (i, (m, res)) in mu.iter_mut().zip(residue.iter_mut()).enumerate() {
            let c = grid.coords(i);
            let mut s = 0.0;
            let mut rr = 0usize;
            for a in 0..d {
                s += sin2[c[a]];
                rr = rr * grid.cells + c[a] % grid.cells;
            }
            *m = s;
            *res = rr as u32;
        }
        let r: Vec<f64> = mu.iter().map(|m| 1.0 / (1.0 + dt * m)).collect();
        let grid_fft = NdFft::new(&vec![n; d]);
        let mut bh = to_complex(&bump.on_grid(&grid));
        grid_fft.forward(&mut bh);
        let rb = bh.iter().zip(&r).map(|(b, r)| b * r).collect();
        Ok(LinearSpde {
            grid,
            dt,
            bump,
            mu,
            r,
            rb,
            residue,
            grid_fft,
            site_fft: NdFft::new(&vec![grid.cells; d]),
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn bump(&self) -> BumpSpec {
        self.bump
    }

    /// Advances all channels from the earliest start to `t_end`, calling
    /// `on_snapshot(i, states)` with the Fourier coefficients of every channel
    /// when time reaches `snapshots[i]`. Snapshot times must be increasing and
    /// on the step grid.
    pub fn run(
        &self,
        noise: &dyn IncrementSource,
        channels: &[Channel],
        t_end: f64,
        snapshots: &[f64],
        mut on_snapshot: impl FnMut(usize, &[Vec<Complex64>]) -> Result<()>,
    ) -> Result<()> {
        if (noise.dt() - self.dt).abs() > 1e-15 * self.dt {
            return Err(invalid("dt", "noise and scheme time steps differ"));
        }
        if noise.dim() != self.grid.dim {
            return Err(invalid("dim", "noise and grid dimensions differ"));
        }
        if channels.is_empty() {
            return Err(invalid("channels", "need at least one channel"));
        }
        let d = self.grid.dim;
        let cells = self.grid.cells;
        let n_sites = cells.pow(d as u32);
        let len = self.grid.len();
        let end = steps_of(t_end, self.dt, "t_end")?;
        let starts = channels
            .iter()
            .map(|c| steps_of(c.start, self.dt, "start"))
            .collect::<Result<Vec<_>>>()?;
        let first = *starts.iter().min().unwrap();
        if end < first {
            return Err(invalid("t_end", "precedes the start time"));
        }
        let snap_steps = snapshots
            .iter()
            .map(|&t| steps_of(t, self.dt, "snapshot"))
            .collect::<Result<Vec<_>>>()?;
        if snap_steps.windows(2).any(|w| w[1] < w[0])
            || snap_steps.iter().any(|&s| s < first || s > end)
        {
            return Err(invalid("snapshots", "must be increasing and inside the run"));
        }
        let masks: Vec<Option<Vec<bool>>> = channels.iter().map(|c| c.mask.flags(cells, d)).collect();
        let mut states = Vec::with_capacity(channels.len());
        for c in channels {
            let st = match &c.init {
                None => vec![Complex64::new(0.0, 0.0); len],
                Some(v) => {
                    if v.len() != len {
                        return Err(Error::MeshMismatch("initial datum size".into()));
                    }
                    let mut s = to_complex(v);
                    self.grid_fft.forward(&mut s);
                    s
                }
            };
            states.push(st);
        }
        let sites: Vec<[i64; MAX_DIM]> = (0..n_sites).map(|k| site_coords(k, cells, d)).collect();
        let mut w = vec![0.0; n_sites];
        let mut what = vec![Complex64::new(0.0, 0.0); n_sites];
        let mut inc = [0.0; MAX_DIM];
        let mut next_snap = 0;
        let mut emit = |step: i64, states: &[Vec<Complex64>], next: &mut usize| -> Result<()> {
            while *next < snap_steps.len() && snap_steps[*next] == step {
                on_snapshot(*next, states)?;
                *next += 1;
            }
            Ok(())
        };
        emit(first, &states, &mut next_snap)?;
        for step in first..end {
            if self.bump.kappa != 0.0 {
                for (k, site) in sites.iter().enumerate() {
                    noise.increment(step, &site[..d], &mut inc);
                    w[k] = inc[..d].iter().sum();
                }
            }
            for (ci, st) in states.iter_mut().enumerate() {
                if step < starts[ci] {
                    continue;
                }
                if self.bump.kappa == 0.0 {
                    for (s, r) in st.iter_mut().zip(&self.r) {
                        *s *= r;
                    }
                    continue;
                }
                for (k, v) in what.iter_mut().enumerate() {
                    let on = masks[ci].as_ref().is_none_or(|m| m[k]);
                    *v = Complex64::new(if on { w[k] } else { 0.0 }, 0.0);
                }
                self.site_fft.forward(&mut what);
                for j in 0..len {
                    st[j] = st[j] * self.r[j] + self.rb[j] * what[self.residue[j] as usize];
                }
            }
            emit(step + 1, &states, &mut next_snap)?;
        }
        for st in &states {
            if st.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
                return Err(Error::Unstable("non-finite values in the SPDE state".into()));
            }
        }
        Ok(())
    }

    /// Real-space values from Fourier coefficients.
    pub fn to_real(&self, state: &[Complex64]) -> Vec<f64> {
        let mut s = state.to_vec();
        self.grid_fft.inverse(&mut s);
        s.iter().map(|v| v.re).collect()
    }

    /// Torus average of `V^2` (Parseval).
    pub fn mean_square(&self, state: &[Complex64]) -> f64 {
        let n = self.grid.len() as f64;
        state.iter().map(|v| v.norm_sqr()).sum::<f64>() / (n * n)
    }

    /// Torus average of `|D V|^2` with forward differences (Parseval).
    pub fn mean_grad_square(&self, state: &[Complex64]) -> f64 {
        let n = self.grid.len() as f64;
        state
            .iter()
            .zip(&self.mu)
            .map(|(v, m)| v.norm_sqr() * m)
            .sum::<f64>()
            / (n * n)
    }

    /// Torus average of `|D(V - W)|^2`.
    pub fn mean_grad_square_diff(&self, a: &[Complex64], b: &[Complex64]) -> f64 {
        let n = self.grid.len() as f64;
        a.iter()
            .zip(b)
            .zip(&self.mu)
            .map(|((x, y), m)| (x - y).norm_sqr() * m)
            .sum::<f64>()
            / (n * n)
    }

    /// Forward-difference gradient, component-major.
    pub fn gradient(&self, v: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.grid.dim * self.grid.len()];
        forward_gradient(&self.grid, v, &mut g);
        g
    }
}

fn check_init(grid: &Grid, v: &GridFunction) -> Result<Vec<f64>> {
    if v.grid != *grid || v.components != 1 || v.steps() == 0 {
        return Err(Error::MeshMismatch(
            "initial datum must be a scalar on the simulation grid".into(),
        ));
    }
    Ok(v.frame(v.steps() - 1).to_vec())
}

/// Solves on `[t0, t1]` from `v_init` and returns the snapshots at `times`
/// (which must lie in `[t0, t1]` on the step grid).
pub fn simulate_spde(
    noise: &dyn IncrementSource,
    bump: BumpSpec,
    grid: Grid,
    t0: f64,
    t1: f64,
    v_init: &GridFunction,
    times: &[f64],
) -> Result<GridFunction> {
    if !(t0 < t1) {
        return Err(invalid("t1", "must exceed t0"));
    }
    let init = check_init(&grid, v_init)?;
    let eng = LinearSpde::new(grid, noise.dt(), bump)?;
    let ch = Channel {
        mask: SiteMask::All,
        start: t0,
        init: Some(init),
    };
    trajectory(&eng, noise, &[ch], t1, times, Quantity::V).map(|mut v| v.remove(0))
}

/// Solution driven only by the sites within distance `r` of `l`, from zero
/// data at `t0`.
pub fn simulate_localized(
    noise: &dyn IncrementSource,
    bump: BumpSpec,
    grid: Grid,
    l: &[i64],
    r: f64,
    t0: f64,
    t1: f64,
    times: &[f64],
) -> Result<GridFunction> {
    if !(r >= 0.0) {
        return Err(invalid("R", "must be non-negative"));
    }
    if l.len() != grid.dim {
        return Err(invalid("l", "site has the wrong dimension"));
    }
    let eng = LinearSpde::new(grid, noise.dt(), bump)?;
    let ch = Channel {
        mask: SiteMask::Ball {
            center: l.to_vec(),
            radius: r,
        },
        start: t0,
        init: None,
    };
    trajectory(&eng, noise, &[ch], t1, times, Quantity::V).map(|mut v| v.remove(0))
}

fn trajectory(
    eng: &LinearSpde,
    noise: &dyn IncrementSource,
    channels: &[Channel],
    t_end: f64,
    times: &[f64],
    tag: Quantity,
) -> Result<Vec<GridFunction>> {
    let mut out: Vec<GridFunction> = channels
        .iter()
        .map(|_| GridFunction::trajectory(eng.grid, 1, tag, eng.dt))
        .collect();
    eng.run(noise, channels, t_end, times, |i, states| {
        for (o, s) in out.iter_mut().zip(states) {
            o.push_frame(times[i], &eng.to_real(s));
        }
        Ok(())
    })?;
    Ok(out)
}

/// Evaluates the representation formula
/// `V(x, t) = sum_k sum_s int p_L(x - y, t - s) A(y - k) dy . dB^k_s`
/// with the periodized continuous heat kernel `p_L`, left-point Ito sums
/// over the noise steps in `[t0, t)`, and midpoint quadrature over the bump
/// support. Every term is computed at two resolutions; their difference is
/// the reported error estimate.
pub struct KernelQuadrature {
    /// Minimum quadrature points per axis across the bump support.
    pub points: usize,
    pub tolerance: f64,
}

pub fn heat_kernel_value(
    noise: &dyn IncrementSource,
    bump: BumpSpec,
    cells: usize,
    x: &[f64],
    t0: f64,
    t: f64,
    quad: &KernelQuadrature,
) -> Result<(f64, f64)> {
    bump.validate()?;
    let d = noise.dim();
    if !(t > t0) {
        return Err(invalid("t", "must exceed t0"));
    }
    if quad.points == 0 {
        return Err(invalid("points", "must be positive"));
    }
    let dt = noise.dt();
    let s0 = steps_of(t0, dt, "t0")?;
    let s1 = steps_of(t, dt, "t")?;
    let n_sites = cells.pow(d as u32);
    let side = cells as f64;
    let mut value = 0.0;
    let mut value2 = 0.0;
    let mut inc = [0.0; MAX_DIM];
    if bump.kappa == 0.0 {
        return Ok((0.0, 0.0));
    }
    for step in s0..s1 {
        let tau = t - step as f64 * dt;
        let width = (2.0 * tau).sqrt();
        let q = quad
            .points
            .max((8.0 * bump.r0 / width).ceil() as usize)
            .min(quad.points * 64);
        let images = ((160.0 * tau).sqrt() / side).ceil() as i64 + 1;
        for k in 0..n_sites {
            let site = site_coords(k, cells, d);
            noise.increment(step, &site[..d], &mut inc);
            let w: f64 = inc[..d].iter().sum();
            if w == 0.0 {
                continue;
            }
            let i1 = convolve(bump, &site[..d], x, tau, side, images, q);
            let i2 = convolve(bump, &site[..d], x, tau, side, images, 2 * q);
            value += i1 * w;
            value2 += i2 * w;
        }
    }
    let err = (value - value2).abs();
    if err > quad.tolerance {
        return Err(Error::QuadratureTooCoarse {
            estimate: err,
            tolerance: quad.tolerance,
        });
    }
    Ok((value2, err))
}

/// `int p_L(x - y, tau) A(y - k) dy` by the midpoint rule with `q` points per
/// axis on the bump's bounding box.
fn convolve(bump: BumpSpec, site: &[i64], x: &[f64], tau: f64, side: f64, images: i64, q: usize) -> f64 {
    let d = site.len();
    let hq = 2.0 * bump.r0 / q as f64;
    let norm = (4.0 * std::f64::consts::PI * tau).powf(-(d as f64) / 2.0);
    let total = q.pow(d as u32);
    let n_img = ((2 * images + 1) as usize).pow(d as u32);
    let mut sum = 0.0;
    let mut z = [0.0; MAX_DIM];
    for idx in 0..total {
        let mut r = idx;
        for a in (0..d).rev() {
            z[a] = -bump.r0 + (r % q) as f64 * hq + 0.5 * hq;
            r /= q;
        }
        let a_val = bump.value(&z[..d]);
        if a_val == 0.0 {
            continue;
        }
        let mut kern = 0.0;
        for im in 0..n_img {
            let mut ri = im;
            let mut dist2 = 0.0;
            for a in (0..d).rev() {
                let wi = (ri as i64 % (2 * images + 1)) - images;
                ri /= (2 * images + 1) as usize;
                let diff = x[a] - (site[a] as f64 + z[a]) + wi as f64 * side;
                dist2 += diff * diff;
            }
            kern += (-dist2 / (4.0 * tau)).exp();
        }
        sum += a_val * kern;
    }
    sum * norm * hq.powi(d as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub t: f64,
    pub ev2: Estimate,
    pub edv2: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentProfile {
    pub rows: Vec<MomentRow>,
    /// Log-log slope of `E[V_t^2]` over the largest decade of `t`.
    pub fit: SlopeFit,
}

/// Monte-Carlo `E[V_t^2]` and `E[|DV_t|^2]` from zero data at time 0.
/// Each replica contributes its torus average, which is an unbiased estimate
/// of the pointwise moment averaged over the unit cell.
pub fn moment_growth_profile(
    bump: BumpSpec,
    grid: Grid,
    dt: f64,
    t_list: &[f64],
    n_replicas: usize,
    seed: u64,
) -> Result<MomentProfile> {
    if n_replicas < 2 {
        return Err(invalid("n_replicas", "need at least two replicas"));
    }
    if t_list.is_empty() || t_list.windows(2).any(|w| w[1] <= w[0]) || t_list[0] <= 0.0 {
        return Err(invalid("t_list", "must be positive and increasing"));
    }
    let eng = LinearSpde::new(grid, dt, bump)?;
    let t_end = *t_list.last().unwrap();
    let per: Vec<Vec<(f64, f64)>> = (0..n_replicas)
        .into_par_iter()
        .map(|r| {
            let noise = NoiseRealization::replica(seed, r, grid.dim, dt)?;
            let mut out = Vec::with_capacity(t_list.len());
            eng.run(&noise, &[Channel::full(0.0)], t_end, t_list, |_, s| {
                out.push((eng.mean_square(&s[0]), eng.mean_grad_square(&s[0])));
                Ok(())
            })?;
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<MomentRow> = t_list
        .iter()
        .enumerate()
        .map(|(i, &t)| MomentRow {
            t,
            ev2: Estimate::from_samples(&per.iter().map(|p| p[i].0).collect::<Vec<_>>()),
            edv2: Estimate::from_samples(&per.iter().map(|p| p[i].1).collect::<Vec<_>>()),
        })
        .collect();
    let idx = last_decade(t_list);
    let fit = if idx.len() >= 2 {
        loglog_fit(
            &idx.iter().map(|&i| rows[i].t).collect::<Vec<_>>(),
            &idx.iter().map(|&i| rows[i].ev2.mean).collect::<Vec<_>>(),
        )
    } else {
        loglog_fit(&[], &[])
    };
    Ok(MomentProfile { rows, fit })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub x: f64,
    pub gap: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapTable {
    pub rows: Vec<GapRow>,
    pub fit: SlopeFit,
}

impl GapTable {
    fn from_samples(xs: &[f64], per: &[Vec<f64>]) -> Self {
        let rows: Vec<GapRow> = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| GapRow {
                x,
                gap: Estimate::from_samples(&per.iter().map(|p| p[i]).collect::<Vec<_>>()),
            })
            .collect();
        let fit = loglog_fit(xs, &rows.iter().map(|r| r.gap.mean).collect::<Vec<_>>());
        GapTable { rows, fit }
    }
}

/// `E[ mean_{x in Q_1(0)} |DV_t(x) - DV^{0,R}_t(x)|^2 ]` for each `R`, with
/// the log-log slope in `R`.
pub fn decorrelation(
    bump: BumpSpec,
    grid: Grid,
    dt: f64,
    t: f64,
    r_list: &[f64],
    n_replicas: usize,
    seed: u64,
) -> Result<GapTable> {
    if n_replicas < 2 {
        return Err(invalid("n_replicas", "need at least two replicas"));
    }
    if r_list.is_empty() || r_list.iter().any(|r| !(*r >= 0.0)) {
        return Err(invalid("R", "radii must be non-negative"));
    }
    let eng = LinearSpde::new(grid, dt, bump)?;
    let d = grid.dim;
    let mut channels = vec![Channel::full(0.0)];
    for &r in r_list {
        channels.push(Channel {
            mask: SiteMask::Ball {
                center: vec![0; d],
                radius: r,
            },
            start: 0.0,
            init: None,
        });
    }
    let cell = grid.unit_cell_nodes(&[0; MAX_DIM][..d]);
    let per: Vec<Vec<f64>> = (0..n_replicas)
        .into_par_iter()
        .map(|rep| {
            let noise = NoiseRealization::replica(seed, rep, d, dt)?;
            let mut out = Vec::new();
            eng.run(&noise, &channels, t, &[t], |_, s| {
                for loc in &s[1..] {
                    let diff: Vec<Complex64> = s[0].iter().zip(loc).map(|(a, b)| a - b).collect();
                    let g = eng.gradient(&eng.to_real(&diff));
                    let len = grid.len();
                    let mut acc = 0.0;
                    for &i in &cell {
                        for a in 0..d {
                            acc += g[a * len + i].powi(2);
                        }
                    }
                    out.push(acc / cell.len() as f64);
                }
                Ok(())
            })?;
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(GapTable::from_samples(r_list, &per))
}

/// Result of the shifted-start construction on one noise path.
#[derive(Debug, Clone, PartialEq)]
pub struct EternalGradient {
    /// `DV^{n_max}_{t_eval}`, the estimate of the stationary gradient.
    pub z: GridFunction,
    /// `(n, n', mean_x |D(V^{n'} - V^n)_{t_eval}|^2)` for consecutive pairs.
    pub cauchy: Vec<(u64, u64, f64)>,
}

fn check_n_list(n_list: &[u64]) -> Result<()> {
    if n_list.is_empty() || n_list.windows(2).any(|w| w[1] <= w[0]) || n_list[0] == 0 {
        return Err(invalid("n_list", "must be positive and increasing"));
    }
    Ok(())
}

fn shifted_channels(n_list: &[u64]) -> Vec<Channel> {
    n_list
        .iter()
        .map(|&n| Channel::full(-((n * n) as f64)))
        .collect()
}

/// Runs `V^n` from zero data at `-n^2` for each `n` on one noise path.
pub fn eternal_gradient(
    noise: &dyn IncrementSource,
    bump: BumpSpec,
    grid: Grid,
    n_list: &[u64],
    t_eval: f64,
) -> Result<EternalGradient> {
    check_n_list(n_list)?;
    let n0 = n_list[0] as f64;
    if !(t_eval > -n0 * n0) {
        return Err(invalid("t_eval", "must follow the latest start time"));
    }
    let eng = LinearSpde::new(grid, noise.dt(), bump)?;
    let mut result = None;
    eng.run(noise, &shifted_channels(n_list), t_eval, &[t_eval], |_, s| {
        let cauchy = n_list
            .windows(2)
            .zip(s.windows(2))
            .map(|(n, st)| (n[0], n[1], eng.mean_grad_square_diff(&st[1], &st[0])))
            .collect();
        let v = eng.to_real(s.last().unwrap());
        let mut z = GridFunction::trajectory(grid, grid.dim, Quantity::Z, eng.dt);
        z.push_frame(t_eval, &eng.gradient(&v));
        result = Some(EternalGradient { z, cauchy });
        Ok(())
    })?;
    Ok(result.expect("snapshot at t_eval"))
}

/// `E|D(V^{n'} - V^n)_{t_eval}|^2` for consecutive pairs, fitted against
/// `t_eval + n^2`.
pub fn cauchy_study(
    bump: BumpSpec,
    grid: Grid,
    dt: f64,
    n_list: &[u64],
    t_eval: f64,
    n_replicas: usize,
    seed: u64,
) -> Result<GapTable> {
    check_n_list(n_list)?;
    if n_list.len() < 2 || n_replicas < 2 {
        return Err(invalid("n_list", "need two start times and two replicas"));
    }
    let per: Vec<Vec<f64>> = (0..n_replicas)
        .into_par_iter()
        .map(|rep| {
            let noise = NoiseRealization::replica(seed, rep, grid.dim, dt)?;
            let e = eternal_gradient(&noise, bump, grid, n_list, t_eval)?;
            Ok(e.cauchy.iter().map(|c| c.2).collect())
        })
        .collect::<Result<_>>()?;
    let xs: Vec<f64> = n_list[..n_list.len() - 1]
        .iter()
        .map(|&n| t_eval + (n * n) as f64)
        .collect();
    Ok(GapTable::from_samples(&xs, &per))
}

/// `E[ mean_x |DV_t - Z_t|^2 ]` along `t_list`, where `V` starts from zero
/// at 0 and `Z_t = DV^{n_z}_t` starts at `-n_z^2`.
pub fn attractor_study(
    bump: BumpSpec,
    grid: Grid,
    dt: f64,
    n_z: u64,
    t_list: &[f64],
    n_replicas: usize,
    seed: u64,
) -> Result<GapTable> {
    if n_replicas < 2 || t_list.is_empty() || t_list.windows(2).any(|w| w[1] <= w[0]) || t_list[0] <= 0.0 {
        return Err(invalid("t_list", "must be positive and increasing"));
    }
    let eng = LinearSpde::new(grid, dt, bump)?;
    let channels = [Channel::full(-((n_z * n_z) as f64)), Channel::full(0.0)];
    let t_end = *t_list.last().unwrap();
    let per: Vec<Vec<f64>> = (0..n_replicas)
        .into_par_iter()
        .map(|rep| {
            let noise = NoiseRealization::replica(seed, rep, grid.dim, dt)?;
            let mut out = Vec::new();
            eng.run(&noise, &channels, t_end, t_list, |_, s| {
                out.push(eng.mean_grad_square_diff(&s[1], &s[0]));
                Ok(())
            })?;
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(GapTable::from_samples(t_list, &per))
}

/// Gradient trajectory `DV` on `[t0, t1]` sampled at every `stride` steps,
/// from zero data at `t0`. Used to build environments driven by the forced
/// heat equation.
pub fn gradient_trajectory(
    noise: &dyn IncrementSource,
    bump: BumpSpec,
    grid: Grid,
    t0: f64,
    t1: f64,
    record_from: f64,
    stride: usize,
) -> Result<GridFunction> {
    let eng = LinearSpde::new(grid, noise.dt(), bump)?;
    let s_from = steps_of(record_from, eng.dt, "record_from")?;
    let s_end = steps_of(t1, eng.dt, "t1")?;
    if stride == 0 || s_from > s_end {
        return Err(invalid("stride", "invalid recording window"));
    }
    let times: Vec<f64> = (s_from..=s_end)
        .step_by(stride)
        .map(|s| s as f64 * eng.dt)
        .collect();
    let mut out = GridFunction::trajectory(grid, grid.dim, Quantity::GradV, eng.dt * stride as f64);
    eng.run(noise, &[Channel::full(t0)], t1, &times, |i, s| {
        out.push_frame(times[i], &eng.gradient(&eng.to_real(&s[0])));
        Ok(())
    })?;
    Ok(out)
}
