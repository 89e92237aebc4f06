//! Regularized space-time correctors and the effective vector field.
//!
//! For a slope `p` the corrector `chi` solves
//! `lambda chi - lambda d_tt chi + d_t chi - div a(p + D chi) = 0` on a
//! space-time cell, either periodic or a centred box `(-L/2, L/2)^{d+1}` with
//! zero data. The effective field is the cell average of the corrected flux
//! `a(p + D chi)`, extrapolated along ladders of `lambda` and cell sizes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{CoefficientField, EnvSpec};
use crate::error::{invalid, Error, Result};
use crate::grid::{Grid, GridFunction, Quantity, MAX_DIM};
use crate::monotone::{sample_laws, Boundary, NodeFlux, Operator, Problem, SolverOptions, TimeDerivative};
use crate::stats::{loglog_fit, SlopeFit};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellGeometry {
    pub dim: usize,
    /// Spatial side `L` in unit cells.
    pub side: usize,
    /// Grid points per unit length, `h = 1 / per_cell`.
    pub per_cell: usize,
    /// Temporal extent `T`; `T = dt` gives a single time slice, which is
    /// exact for static fields.
    pub time_extent: f64,
    pub dt: f64,
    pub boundary: Boundary,
    #[serde(default)]
    pub derivative: TimeDerivative,
}

impl CellGeometry {
    pub fn periodic(dim: usize, side: usize, per_cell: usize, time_extent: f64, dt: f64) -> Self {
        CellGeometry {
            dim,
            side,
            per_cell,
            time_extent,
            dt,
            boundary: Boundary::Periodic,
            derivative: TimeDerivative::Central,
        }
    }

    /// Periodic cell with one time slice, for static fields.
    pub fn periodic_static(dim: usize, side: usize, per_cell: usize) -> Self {
        Self::periodic(dim, side, per_cell, 1.0, 1.0)
    }

    /// The box `(-L/2, L/2)^{d+1}` with zero boundary data.
    pub fn zero_box(dim: usize, side: usize, per_cell: usize, dt: f64) -> Self {
        CellGeometry {
            dim,
            side,
            per_cell,
            time_extent: side as f64,
            dt,
            boundary: Boundary::Dirichlet,
            derivative: TimeDerivative::Central,
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dim, self.side, self.per_cell)
    }

    pub fn nt(&self) -> Result<usize> {
        if !(self.dt.is_finite() && self.dt > 0.0 && self.time_extent.is_finite() && self.time_extent > 0.0) {
            return Err(invalid("geometry.dt", "dt and T must be positive"));
        }
        let nt = (self.time_extent / self.dt).round();
        if (nt * self.dt - self.time_extent).abs() > 1e-9 * self.time_extent || nt < 1.0 {
            return Err(invalid("geometry.time_extent", "T must be a multiple of dt"));
        }
        Ok(nt as usize)
    }

    /// Space-time origin: the cell covers `origin + [0, L)^d x [0, T)`.
    fn origin(&self) -> ([f64; MAX_DIM], f64) {
        match self.boundary {
            Boundary::Periodic => ([0.0; MAX_DIM], 0.0),
            Boundary::Dirichlet => {
                let h = -0.5 * self.side as f64;
                ([h; MAX_DIM], -0.5 * self.time_extent)
            }
        }
    }

    fn times(&self) -> Result<Vec<f64>> {
        let (_, t0) = self.origin();
        Ok((0..self.nt()?).map(|k| t0 + k as f64 * self.dt).collect())
    }

    /// Node position relative to the cell centre (box) or origin (periodic),
    /// wrapped into `[-L/2, L/2)` on periodic cells.
    fn signed_node(&self, grid: &Grid, i: usize) -> [f64; MAX_DIM] {
        match self.boundary {
            Boundary::Periodic => grid.signed_position(i),
            Boundary::Dirichlet => {
                let mut x = grid.position(i);
                for v in x.iter_mut().take(self.dim) {
                    *v -= 0.5 * self.side as f64;
                }
                x
            }
        }
    }

    fn signed_time(&self, k: usize, nt: usize) -> f64 {
        match self.boundary {
            Boundary::Periodic => {
                let kk = if 2 * k >= nt { k as f64 - nt as f64 } else { k as f64 };
                kk * self.dt
            }
            Boundary::Dirichlet => k as f64 * self.dt - 0.5 * self.time_extent,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectorSolution {
    pub p: Vec<f64>,
    pub lambda: f64,
    pub theta: f64,
    pub geometry: CellGeometry,
    pub chi: GridFunction,
    pub grad_chi: GridFunction,
    pub flux: GridFunction,
    pub residual_norm: f64,
    pub iterations: usize,
    pub history: Vec<f64>,
    /// `a(0)` at every node, kept for the weighted energy bound.
    a0_sq: Vec<f64>,
}

impl CorrectorSolution {
    /// Space-time cell average of the corrected flux.
    pub fn mean_flux(&self) -> Vec<f64> {
        let d = self.geometry.dim;
        let len = self.chi.grid.len();
        let steps = self.flux.steps();
        (0..d)
            .map(|a| {
                let s: f64 = (0..steps).map(|k| self.flux.component(k, a).iter().sum::<f64>()).sum();
                s / (steps * len) as f64
            })
            .collect()
    }

    /// Cell average of `D chi` per component.
    pub fn mean_gradient(&self) -> Vec<f64> {
        let d = self.geometry.dim;
        let len = self.chi.grid.len();
        let steps = self.grad_chi.steps();
        (0..d)
            .map(|a| {
                let s: f64 = (0..steps).map(|k| self.grad_chi.component(k, a).iter().sum::<f64>()).sum();
                s / (steps * len) as f64
            })
            .collect()
    }

    /// `lambda <chi^2> + lambda <(d_t chi)^2> + <|D chi|^2>`, cell averaged.
    pub fn regularized_energy(&self) -> f64 {
        let nt = self.chi.steps();
        let len = self.chi.grid.len();
        let dt = self.geometry.dt;
        let mut e = 0.0;
        for k in 0..nt {
            let c = self.chi.frame(k);
            let cn = self.chi.frame((k + 1) % nt);
            let g = self.grad_chi.frame(k);
            for i in 0..len {
                e += self.lambda * c[i] * c[i];
                if nt > 1 {
                    e += self.lambda * ((cn[i] - c[i]) / dt).powi(2);
                }
            }
            e += g.iter().map(|v| v * v).sum::<f64>();
        }
        e / (nt * len) as f64
    }

    /// Ratio `C = int (lambda u^2 + lambda (d_t u)^2 + |Du|^2) rho / (1 + int |a(0)|^2 rho)`
    /// with the space-time weight `exp(-theta sqrt(1 + |x|^2 + t^2))`.
    pub fn weighted_energy(&self) -> WeightedEnergy {
        let geo = &self.geometry;
        let grid = self.chi.grid;
        let nt = self.chi.steps();
        let len = grid.len();
        let vol = grid.cell_volume() * geo.dt;
        let mut lhs = 0.0;
        let mut rhs = 0.0;
        for k in 0..nt {
            let t = geo.signed_time(k, nt);
            let c = self.chi.frame(k);
            let cn = self.chi.frame((k + 1) % nt);
            let g = self.grad_chi.frame(k);
            for i in 0..len {
                let x = geo.signed_node(&grid, i);
                let r2: f64 = x[..geo.dim].iter().map(|v| v * v).sum::<f64>() + t * t;
                let rho = (-self.theta * (1.0 + r2).sqrt()).exp();
                let mut e = self.lambda * c[i] * c[i];
                if nt > 1 {
                    e += self.lambda * ((cn[i] - c[i]) / geo.dt).powi(2);
                }
                for a in 0..geo.dim {
                    e += g[a * len + i].powi(2);
                }
                lhs += e * rho * vol;
                rhs += self.a0_sq[k * len + i] * rho * vol;
            }
        }
        WeightedEnergy {
            energy: lhs,
            a0_weighted: rhs,
            constant: lhs / (1.0 + rhs),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedEnergy {
    pub energy: f64,
    pub a0_weighted: f64,
    pub constant: f64,
}

/// Solves the regularized cell problem for slope `p`.
pub fn solve_regularized_cell(
    field: &CoefficientField,
    p: &[f64],
    lambda: f64,
    theta: f64,
    geometry: &CellGeometry,
    tol: f64,
) -> Result<CorrectorSolution> {
    solve_regularized_cell_with(field, p, lambda, theta, geometry, &SolverOptions { tol, ..SolverOptions::default() })
}

pub fn solve_regularized_cell_with(
    field: &CoefficientField,
    p: &[f64],
    lambda: f64,
    theta: f64,
    geometry: &CellGeometry,
    opts: &SolverOptions,
) -> Result<CorrectorSolution> {
    let d = geometry.dim;
    if field.dim() != d || p.len() != d {
        return Err(Error::MeshMismatch("slope, field and cell dimensions differ".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(invalid("lambda", "must be non-negative"));
    }
    if geometry.boundary == Boundary::Dirichlet && lambda <= 0.0 {
        return Err(invalid("lambda", "must be positive on a zero-boundary box"));
    }
    if !(theta >= 0.0 && theta.is_finite()) {
        return Err(invalid("theta", "must be non-negative"));
    }
    let grid = geometry.grid()?;
    let nt = geometry.nt()?;
    let times = geometry.times()?;
    let (origin, _) = geometry.origin();
    let laws = sample_laws(field, &grid, &times, &origin[..d], 1.0)?;
    let mut pv = [0.0; MAX_DIM];
    pv[..d].copy_from_slice(p);
    let k = field.constants();
    let op = Operator {
        grid,
        nt,
        dt: geometry.dt,
        mass: lambda,
        lambda_tt: lambda,
        transport: true,
        derivative: geometry.derivative,
        boundary: geometry.boundary,
    };
    let prob = Problem {
        op,
        laws: &laws,
        p: pv,
        rhs: None,
        monotonicity: k.monotonicity,
        lipschitz: k.lipschitz,
    };
    let mut sol = prob.solve(None, opts)?;
    if geometry.boundary == Boundary::Periodic {
        let mean = sol.u.iter().sum::<f64>() / sol.u.len() as f64;
        sol.u.iter_mut().for_each(|v| *v -= mean);
    }
    let len = grid.len();
    let a0_sq = laws
        .iter()
        .map(|law| {
            let mut out = [0.0; MAX_DIM];
            law.flux(&[0.0; MAX_DIM][..d], &mut out[..d]);
            out[..d].iter().map(|v| v * v).sum()
        })
        .collect();
    let mk = |values: Vec<f64>, comps: usize, tag: Quantity| GridFunction {
        grid,
        components: comps,
        tag,
        dt: geometry.dt,
        times: times.clone(),
        values,
    };
    debug_assert_eq!(sol.u.len(), nt * len);
    Ok(CorrectorSolution {
        p: p.to_vec(),
        lambda,
        theta,
        geometry: *geometry,
        chi: mk(sol.u, 1, Quantity::Chi),
        grad_chi: mk(sol.grad, d, Quantity::GradChi),
        flux: mk(sol.flux, d, Quantity::Flux),
        residual_norm: sol.residual,
        iterations: sol.iterations,
        history: sol.history,
        a0_sq,
    })
}

/// `<a(p + D chi) . D chi> / (|a(p + D chi)|_2 |D chi|_2 + eps)` over the cell.
pub fn flux_orthogonality(sol: &CorrectorSolution) -> f64 {
    let f = &sol.flux.values;
    let g = &sol.grad_chi.values;
    let n = f.len() as f64;
    let inner: f64 = f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / n;
    let nf = (f.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
    let ng = (g.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
    inner / (nf * ng + f64::EPSILON)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellLadder {
    pub sides: Vec<usize>,
    pub per_cell: usize,
    pub dt: f64,
    /// Time extent of a cell of side `L` is `time_factor * L`; static fields
    /// use a single time slice.
    pub time_factor: f64,
    #[serde(default)]
    pub derivative: TimeDerivative,
}

impl CellLadder {
    pub fn geometry(&self, field: &CoefficientField, side: usize) -> CellGeometry {
        let d = field.dim();
        if field.is_static() {
            return CellGeometry {
                derivative: self.derivative,
                ..CellGeometry::periodic_static(d, side, self.per_cell)
            };
        }
        let steps = (self.time_factor * side as f64 / self.dt).round().max(1.0);
        CellGeometry {
            derivative: self.derivative,
            ..CellGeometry::periodic(d, side, self.per_cell, steps * self.dt, self.dt)
        }
    }
}

pub const DEFAULT_LAMBDAS: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderEntry {
    pub lambda: f64,
    pub side: usize,
    pub abar: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub regularized_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationRecord {
    pub p: Vec<f64>,
    pub entries: Vec<LadderEntry>,
    pub value: Vec<f64>,
    /// Largest distance between the values of the two largest cells and two
    /// smallest `lambda`.
    pub error: f64,
    pub within_tolerance: bool,
}

/// Cell averages of `a(p + D chi)` over the ladders; the value is taken at
/// the largest cell and smallest `lambda`.
pub fn estimate_effective(
    field: &CoefficientField,
    p: &[f64],
    lambdas: &[f64],
    cells: &CellLadder,
    tol: f64,
) -> Result<(Vec<f64>, ExtrapolationRecord)> {
    if lambdas.is_empty() || cells.sides.is_empty() {
        return Err(invalid("ladders", "must not be empty"));
    }
    if lambdas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(invalid("lambda_ladder", "must be decreasing"));
    }
    if cells.sides.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("cell_ladder", "must be increasing"));
    }
    let combos: Vec<(f64, usize)> = lambdas
        .iter()
        .flat_map(|&l| cells.sides.iter().map(move |&s| (l, s)))
        .collect();
    let solver_tol = (tol * 1e-2).max(1e-13);
    let entries: Vec<LadderEntry> = combos
        .par_iter()
        .map(|&(lambda, side)| {
            let geo = cells.geometry(field, side);
            let sol = solve_regularized_cell(field, p, lambda, 0.0, &geo, solver_tol)?;
            Ok(LadderEntry {
                lambda,
                side,
                abar: sol.mean_flux(),
                residual: sol.residual_norm,
                iterations: sol.iterations,
                regularized_energy: sol.regularized_energy(),
            })
        })
        .collect::<Result<_>>()?;
    let nl = lambdas.len();
    let ns = cells.sides.len();
    let at = |li: usize, si: usize| &entries[li * ns + si].abar;
    let value = at(nl - 1, ns - 1).clone();
    let ls: Vec<usize> = (nl.saturating_sub(2)..nl).collect();
    let ss: Vec<usize> = (ns.saturating_sub(2)..ns).collect();
    let mut extreme = Vec::new();
    for &li in &ls {
        for &si in &ss {
            extreme.push(at(li, si));
        }
    }
    let mut error: f64 = 0.0;
    for a in &extreme {
        for b in &extreme {
            let dist = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            error = error.max(dist);
        }
    }
    let record = ExtrapolationRecord {
        p: p.to_vec(),
        entries,
        value: value.clone(),
        error,
        within_tolerance: error <= tol,
    };
    Ok((value, record))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SublinearityRow {
    pub r: f64,
    /// `R^{-(d+3)} int_{Q~_R} |chi|^2`.
    pub space_time: f64,
    /// `R^{-(d+2)} int_{Q_R} |chi(., 0)|^2`.
    pub slice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SublinearityTable {
    pub rows: Vec<SublinearityRow>,
    pub fit: SlopeFit,
    pub decreasing: bool,
}

/// Normalized `L^2` norms of the corrector on centred cylinders of a single
/// periodic cell solve. Integrals use the half-open windows `[-R/2, R/2)`.
pub fn sublinearity_diagnostic(
    field: &CoefficientField,
    p: &[f64],
    r_ladder: &[f64],
    lambda: f64,
    geometry: &CellGeometry,
    tol: f64,
) -> Result<SublinearityTable> {
    if geometry.boundary != Boundary::Periodic {
        return Err(invalid("geometry.boundary", "the diagnostic uses a periodic cell"));
    }
    if r_ladder.is_empty() || r_ladder.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("R_ladder", "must be increasing"));
    }
    let nt = geometry.nt()?;
    let r_max = *r_ladder.last().unwrap();
    if r_max > geometry.side as f64 || (nt > 1 && r_max > geometry.time_extent) {
        return Err(invalid("R_ladder", "windows must fit in the cell"));
    }
    let sol = solve_regularized_cell(field, p, lambda, 0.0, geometry, tol)?;
    Ok(sublinearity_of(&sol, r_ladder))
}

pub fn sublinearity_of(sol: &CorrectorSolution, r_ladder: &[f64]) -> SublinearityTable {
    let geo = &sol.geometry;
    let grid = sol.chi.grid;
    let d = geo.dim;
    let nt = sol.chi.steps();
    let len = grid.len();
    let hv = grid.cell_volume();
    let inside = |v: f64, r: f64| v >= -0.5 * r - 1e-12 && v < 0.5 * r - 1e-12;
    let rows: Vec<SublinearityRow> = r_ladder
        .iter()
        .map(|&r| {
            let mask: Vec<bool> = (0..len)
                .map(|i| {
                    let x = geo.signed_node(&grid, i);
                    x[..d].iter().all(|&v| inside(v, r))
                })
                .collect();
            let slice_int: f64 = sol
                .chi
                .frame(0)
                .iter()
                .zip(&mask)
                .filter(|(_, &m)| m)
                .map(|(c, _)| c * c)
                .sum::<f64>()
                * hv;
            let st_int = if nt == 1 {
                // static corrector: constant in time over I_R
                slice_int * r
            } else {
                (0..nt)
                    .filter(|&k| inside(geo.signed_time(k, nt), r))
                    .map(|k| {
                        sol.chi
                            .frame(k)
                            .iter()
                            .zip(&mask)
                            .filter(|(_, &m)| m)
                            .map(|(c, _)| c * c)
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    * hv
                    * geo.dt
            };
            SublinearityRow {
                r,
                space_time: st_int / r.powi(d as i32 + 3),
                slice: slice_int / r.powi(d as i32 + 2),
            }
        })
        .collect();
    let fit = if rows.len() >= 2 {
        loglog_fit(
            &rows.iter().map(|r| r.r).collect::<Vec<_>>(),
            &rows.iter().map(|r| r.space_time).collect::<Vec<_>>(),
        )
    } else {
        loglog_fit(&[], &[])
    };
    let decreasing = rows.windows(2).all(|w| w[1].space_time < w[0].space_time);
    SublinearityTable { rows, fit, decreasing }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificates {
    /// Minimum over sample pairs of `(abar(p) - abar(q)) . (p - q) / |p - q|^2`.
    pub monotonicity: f64,
    /// Maximum over sample pairs of `|abar(p) - abar(q)| / |p - q|`.
    pub lipschitz: f64,
    /// Minimum over sample pairs of `(abar(p) - abar(q)) . (p - q)`.
    pub min_inner: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// `d = 1`: linear between sorted samples, linear extrapolation outside.
    PiecewiseLinear,
    /// Tensor-product sample grid: multilinear inside, clamped-cell linear
    /// extrapolation outside.
    Multilinear,
    /// Scattered samples in `d >= 2`: least-squares affine map.
    AffineFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub lambda_ladder: Vec<f64>,
    pub cell_ladder: Option<CellLadder>,
    pub environment: Option<EnvSpec>,
    pub records: Vec<ExtrapolationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveLaw {
    pub d: usize,
    pub p_samples: Vec<Vec<f64>>,
    pub abar_values: Vec<Vec<f64>>,
    pub interpolation: Interpolation,
    pub certificates: Certificates,
    pub provenance: Provenance,
    #[serde(skip)]
    table: Table,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct Table {
    /// Sorted distinct coordinates per axis (multilinear / piecewise linear).
    axes: Vec<Vec<f64>>,
    /// Values on the tensor grid, row-major, `d` components each.
    values: Vec<f64>,
    /// Affine fit `abar(p) = b + A p`, `A` row-major.
    affine: Vec<f64>,
}

fn certify(p: &[Vec<f64>], v: &[Vec<f64>], tol: f64) -> Certificates {
    let mut mono = f64::INFINITY;
    let mut lip: f64 = 0.0;
    let mut min_inner = f64::INFINITY;
    for i in 0..p.len() {
        for j in i + 1..p.len() {
            let dp2: f64 = p[i].iter().zip(&p[j]).map(|(a, b)| (a - b).powi(2)).sum();
            if dp2 == 0.0 {
                continue;
            }
            let inner: f64 = (0..p[i].len()).map(|a| (v[i][a] - v[j][a]) * (p[i][a] - p[j][a])).sum();
            let dv2: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| (a - b).powi(2)).sum();
            mono = mono.min(inner / dp2);
            lip = lip.max((dv2 / dp2).sqrt());
            min_inner = min_inner.min(inner);
        }
    }
    if !min_inner.is_finite() {
        min_inner = 0.0;
        mono = f64::NAN;
    }
    Certificates {
        monotonicity: mono,
        lipschitz: lip,
        min_inner,
        tolerance: tol,
        pass: min_inner >= -tol,
    }
}

impl EffectiveLaw {
    /// Tabulated law with certificates computed from all sample pairs.
    pub fn from_samples(p_samples: Vec<Vec<f64>>, abar_values: Vec<Vec<f64>>, tol: f64, provenance: Provenance) -> Result<Self> {
        let d = p_samples.first().map(|p| p.len()).unwrap_or(0);
        let certificates = certify(&p_samples, &abar_values, tol);
        let mut law = EffectiveLaw {
            d,
            p_samples,
            abar_values,
            interpolation: Interpolation::PiecewiseLinear,
            certificates,
            provenance,
            table: Table::default(),
        };
        law.rebuild()?;
        Ok(law)
    }

    fn rebuild(&mut self) -> Result<()> {
        let d = self.d;
        let bad = |m: &str| Error::Decode(m.to_string());
        if !(1..=MAX_DIM).contains(&d) {
            return Err(bad("law dimension must be 1, 2 or 3"));
        }
        if self.p_samples.is_empty() || self.p_samples.len() != self.abar_values.len() {
            return Err(bad("sample and value counts differ or are zero"));
        }
        for (p, v) in self.p_samples.iter().zip(&self.abar_values) {
            if p.len() != d || v.len() != d {
                return Err(bad("sample of the wrong dimension"));
            }
            if p.iter().chain(v).any(|x| !x.is_finite()) {
                return Err(bad("non-finite sample"));
            }
        }
        let mut axes: Vec<Vec<f64>> = (0..d)
            .map(|a| {
                let mut c: Vec<f64> = self.p_samples.iter().map(|p| p[a]).collect();
                c.sort_by(f64::total_cmp);
                c.dedup();
                c
            })
            .collect();
        let count: usize = axes.iter().map(|c| c.len()).product();
        let tensor = count == self.p_samples.len() && axes.iter().all(|c| c.len() >= 2);
        if d == 1 || tensor {
            if axes.iter().any(|c| c.len() < 2) && self.p_samples.len() > 1 {
                return Err(bad("repeated samples"));
            }
            let mut values = vec![f64::NAN; count * d];
            for (p, v) in self.p_samples.iter().zip(&self.abar_values) {
                let mut idx = 0;
                for a in 0..d {
                    let k = axes[a].binary_search_by(|x| x.total_cmp(&p[a])).expect("axis value");
                    idx = idx * axes[a].len() + k;
                }
                if !values[idx * d].is_nan() {
                    return Err(bad("repeated samples"));
                }
                values[idx * d..(idx + 1) * d].copy_from_slice(v);
            }
            self.interpolation = if d == 1 {
                Interpolation::PiecewiseLinear
            } else {
                Interpolation::Multilinear
            };
            self.table = Table {
                axes: std::mem::take(&mut axes),
                values,
                affine: Vec::new(),
            };
        } else {
            self.interpolation = Interpolation::AffineFit;
            self.table = Table {
                axes: Vec::new(),
                values: Vec::new(),
                affine: affine_fit(&self.p_samples, &self.abar_values)?,
            };
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and validates a serialized law, rebuilding its interpolation.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut law: EffectiveLaw = serde_json::from_str(text)?;
        law.rebuild()?;
        Ok(law)
    }

    /// Whether `p` lies in the hull of the tabulated samples (per axis).
    pub fn in_hull(&self, p: &[f64]) -> bool {
        match self.interpolation {
            Interpolation::AffineFit => (0..self.d).all(|a| {
                let lo = self.p_samples.iter().map(|s| s[a]).fold(f64::INFINITY, f64::min);
                let hi = self.p_samples.iter().map(|s| s[a]).fold(f64::NEG_INFINITY, f64::max);
                p[a] >= lo && p[a] <= hi
            }),
            _ => (0..self.d).all(|a| {
                let ax = &self.table.axes[a];
                p[a] >= ax[0] && p[a] <= ax[ax.len() - 1]
            }),
        }
    }

    pub fn eval(&self, p: &[f64], out: &mut [f64]) {
        let d = self.d;
        match self.interpolation {
            Interpolation::AffineFit => {
                let c = &self.table.affine;
                for a in 0..d {
                    let mut s = c[a * (d + 1)];
                    for b in 0..d {
                        s += c[a * (d + 1) + 1 + b] * p[b];
                    }
                    out[a] = s;
                }
            }
            _ => {
                let axes = &self.table.axes;
                if axes[0].len() == 1 {
                    out[..d].copy_from_slice(&self.table.values[..d]);
                    return;
                }
                let mut lo = [0usize; MAX_DIM];
                let mut w = [0.0; MAX_DIM];
                for a in 0..d {
                    let ax = &axes[a];
                    let k = ax.partition_point(|&x| x <= p[a]).clamp(1, ax.len() - 1) - 1;
                    lo[a] = k;
                    w[a] = (p[a] - ax[k]) / (ax[k + 1] - ax[k]);
                }
                out[..d].iter_mut().for_each(|v| *v = 0.0);
                for corner in 0..(1usize << d) {
                    let mut weight = 1.0;
                    let mut idx = 0;
                    for a in 0..d {
                        let bit = (corner >> a) & 1;
                        weight *= if bit == 1 { w[a] } else { 1.0 - w[a] };
                        idx = idx * axes[a].len() + lo[a] + bit;
                    }
                    for c in 0..d {
                        out[c] += weight * self.table.values[idx * d + c];
                    }
                }
            }
        }
    }

    /// Identity law sampled at `p_grid`.
    pub fn identity(p_grid: Vec<Vec<f64>>) -> Result<Self> {
        let v = p_grid.clone();
        Self::from_samples(p_grid, v, 1e-8, Provenance::default())
    }
}

impl NodeFlux for EffectiveLaw {
    fn flux_at(&self, _node: usize, q: &[f64], out: &mut [f64]) {
        self.eval(q, out);
    }

    fn nodes(&self) -> Option<usize> {
        None
    }
}

/// Least-squares `abar(p) = b + A p`, returned per output row as `[b, A_row]`.
fn affine_fit(p: &[Vec<f64>], v: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = p[0].len();
    let k = d + 1;
    if p.len() < k {
        return Err(Error::Decode("too few samples for an affine fit".into()));
    }
    // normal equations
    let mut ata = vec![0.0; k * k];
    let mut atb = vec![0.0; k * d];
    for (pi, vi) in p.iter().zip(v) {
        let row: Vec<f64> = std::iter::once(1.0).chain(pi.iter().cloned()).collect();
        for r in 0..k {
            for c in 0..k {
                ata[r * k + c] += row[r] * row[c];
            }
            for c in 0..d {
                atb[r * d + c] += row[r] * vi[c];
            }
        }
    }
    // Gauss-Jordan with partial pivoting
    let mut aug = vec![0.0; k * (k + d)];
    for r in 0..k {
        aug[r * (k + d)..r * (k + d) + k].copy_from_slice(&ata[r * k..(r + 1) * k]);
        aug[r * (k + d) + k..(r + 1) * (k + d)].copy_from_slice(&atb[r * d..(r + 1) * d]);
    }
    let w = k + d;
    for col in 0..k {
        let piv = (col..k)
            .max_by(|&a, &b| aug[a * w + col].abs().total_cmp(&aug[b * w + col].abs()))
            .unwrap();
        if aug[piv * w + col].abs() < 1e-12 {
            return Err(Error::Decode("samples do not determine an affine map".into()));
        }
        for c in 0..w {
            aug.swap(col * w + c, piv * w + c);
        }
        let s = aug[col * w + col];
        for c in 0..w {
            aug[col * w + c] /= s;
        }
        for r in 0..k {
            if r != col {
                let f = aug[r * w + col];
                for c in 0..w {
                    aug[r * w + c] -= f * aug[col * w + c];
                }
            }
        }
    }
    let mut out = vec![0.0; d * k];
    for a in 0..d {
        for r in 0..k {
            out[a * k + r] = aug[r * w + k + a];
        }
    }
    Ok(out)
}

/// Tabulates `abar` on `p_grid` and certifies it pairwise.
pub fn build_effective_law(
    field: &CoefficientField,
    p_grid: &[Vec<f64>],
    lambdas: &[f64],
    cells: &CellLadder,
    tol: f64,
) -> Result<EffectiveLaw> {
    if p_grid.is_empty() {
        return Err(invalid("p_grid", "must not be empty"));
    }
    let mut values = Vec::with_capacity(p_grid.len());
    let mut records = Vec::with_capacity(p_grid.len());
    for p in p_grid {
        let (v, rec) = estimate_effective(field, p, lambdas, cells, tol)?;
        values.push(v);
        records.push(rec);
    }
    EffectiveLaw::from_samples(
        p_grid.to_vec(),
        values,
        1e-8,
        Provenance {
            lambda_ladder: lambdas.to_vec(),
            cell_ladder: Some(cells.clone()),
            environment: Some(field.spec().clone()),
            records,
        },
    )
}

/// Samples `[-p_max, p_max]^d` with `k` points per axis.
pub fn tensor_grid(d: usize, p_max: f64, k: usize) -> Vec<Vec<f64>> {
    let axis: Vec<f64> = (0..k)
        .map(|i| -p_max + 2.0 * p_max * i as f64 / (k - 1).max(1) as f64)
        .collect();
    let total = k.pow(d as u32);
    (0..total)
        .map(|mut idx| {
            let mut p = vec![0.0; d];
            for a in (0..d).rev() {
                p[a] = axis[idx % k];
                idx /= k;
            }
            p
        })
        .collect()
}
