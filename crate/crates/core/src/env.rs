//! Random space-time coefficient fields `a(p, y, tau)`.
//!
//! A field is a pure function of its [`EnvSpec`] (which includes the seed),
//! so it can be evaluated at any point, in any order, from any thread. The
//! coefficient `c(y, tau)` is either a deterministic periodic pattern or a
//! two-valued random checkerboard on unit cells. Random cells can be refreshed
//! at the jump times of independent rate-`mu` Poisson clocks; the value after
//! each jump is a fresh draw, so the process is stationary in time with the
//! same one-time marginal as the initial state.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{GridFunction, MAX_DIM};
use crate::rng::{self, domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    /// `a = p`.
    Identity,
    /// `a = c(y, tau) p`.
    ScalarLinear,
    /// `a = c p + delta p / sqrt(1 + |p|^2)`, the gradient of
    /// `c |p|^2 / 2 + delta sqrt(1 + |p|^2)`.
    MonotoneGradient,
    /// `a = c (p + z) - z` with `z(y, tau)` an external vector field.
    ShiftedLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Spatial {
    /// Cells of side `period / values.len()` along every axis; the value in a
    /// sub-cell is `values[(s_1 + ... + s_d) mod len]`.
    Periodic { period: f64, values: Vec<f64> },
    /// Each unit cell independently takes `c_min` or `c_max` with
    /// probability 1/2.
    Checkerboard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Temporal {
    Static,
    Renewal { rate: f64 },
}

/// Complete, serializable description of a field. Together with an optional
/// external `z` this determines every evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub dim: usize,
    pub c_min: f64,
    pub c_max: f64,
    #[serde(default)]
    pub delta: f64,
    pub spatial: Spatial,
    pub temporal: Temporal,
    /// Evaluation window `[-t_max, t_max]` in time.
    pub t_max: f64,
    pub seed: u64,
}

impl EnvSpec {
    pub fn identity(dim: usize) -> Self {
        EnvSpec {
            kind: EnvKind::Identity,
            dim,
            c_min: 1.0,
            c_max: 1.0,
            delta: 0.0,
            spatial: Spatial::Periodic {
                period: 1.0,
                values: vec![1.0],
            },
            temporal: Temporal::Static,
            t_max: 1e6,
            seed: 0,
        }
    }

    /// Static periodic scalar-linear field with the given sub-cell values.
    pub fn periodic(dim: usize, period: f64, values: Vec<f64>) -> Self {
        let c_min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let c_max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        EnvSpec {
            kind: EnvKind::ScalarLinear,
            dim,
            c_min,
            c_max,
            delta: 0.0,
            spatial: Spatial::Periodic { period, values },
            temporal: Temporal::Static,
            t_max: 1e6,
            seed: 0,
        }
    }

    pub fn checkerboard(dim: usize, c_min: f64, c_max: f64, temporal: Temporal, t_max: f64, seed: u64) -> Self {
        EnvSpec {
            kind: EnvKind::ScalarLinear,
            dim,
            c_min,
            c_max,
            delta: 0.0,
            spatial: Spatial::Checkerboard,
            temporal,
            t_max,
            seed,
        }
    }

    pub fn with_kind(mut self, kind: EnvKind, delta: f64) -> Self {
        self.kind = kind;
        self.delta = delta;
        self
    }

    pub fn is_random(&self) -> bool {
        matches!(self.spatial, Spatial::Checkerboard) && self.kind != EnvKind::Identity
    }
}

/// Certified structural constants: `(a(p) - a(q)) . (p - q) >= monotonicity |p - q|^2`
/// and `|a(p) - a(q)| <= lipschitz |p - q|`, and `c0 = max(lipschitz, 1 / monotonicity)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub monotonicity: f64,
    pub lipschitz: f64,
    pub c0: f64,
}

const MAX_C0: f64 = 1e6;

/// The field frozen at one point `(y, tau)`: `p -> c (p + z) - z + delta p / sqrt(1 + |p|^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LocalLaw {
    pub c: f64,
    pub delta: f64,
    pub z: [f64; MAX_DIM],
}

impl LocalLaw {
    pub const IDENTITY: LocalLaw = LocalLaw {
        c: 1.0,
        delta: 0.0,
        z: [0.0; MAX_DIM],
    };

    #[inline]
    pub fn flux(&self, q: &[f64], out: &mut [f64]) {
        let d = q.len();
        let mut nl = 0.0;
        if self.delta != 0.0 {
            let n2: f64 = q.iter().map(|v| v * v).sum();
            nl = self.delta / (1.0 + n2).sqrt();
        }
        for a in 0..d {
            out[a] = self.c * (q[a] + self.z[a]) - self.z[a] + nl * q[a];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub n_samples: usize,
    /// Minimum of `(a(p) - a(q)) . (p - q) / |p - q|^2` over the samples.
    pub min_monotone_ratio: f64,
    /// Maximum of `|a(p) - a(q)| / |p - q|` over the samples.
    pub max_lipschitz_ratio: f64,
    /// Monte-Carlo estimate of `E[ int_{Q~_1} |a(0, y, tau)|^2 ]`.
    pub mean_a0_squared: f64,
    pub constants: Constants,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct CoefficientField {
    spec: EnvSpec,
    constants: Constants,
    offset_k: [i64; MAX_DIM],
    offset_s: f64,
    external: Option<Arc<GridFunction>>,
}

impl PartialEq for CoefficientField {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.offset_k == other.offset_k
            && self.offset_s.to_bits() == other.offset_s.to_bits()
            && match (&self.external, &other.external) {
                (None, None) => true,
                (Some(a), Some(b)) => Arc::ptr_eq(a, b) || a == b,
                _ => false,
            }
    }
}

fn finite(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(invalid(name, "must be finite"))
    }
}

/// Validates the spec and computes certified constants.
pub fn build_environment(spec: EnvSpec) -> Result<CoefficientField> {
    if !(1..=MAX_DIM).contains(&spec.dim) {
        return Err(invalid("dim", format!("must be 1, 2 or 3, got {}", spec.dim)));
    }
    finite("c_min", spec.c_min)?;
    finite("c_max", spec.c_max)?;
    finite("delta", spec.delta)?;
    finite("t_max", spec.t_max)?;
    if spec.t_max <= 0.0 {
        return Err(invalid("t_max", "must be positive"));
    }
    let (m, lip) = match spec.kind {
        EnvKind::Identity => (1.0, 1.0),
        kind => {
            if spec.c_min <= 0.0 {
                return Err(invalid("c_min", "must be positive"));
            }
            if spec.c_max < spec.c_min {
                return Err(invalid("c_max", "must be at least c_min"));
            }
            if spec.delta < 0.0 {
                return Err(invalid("delta", "must be non-negative"));
            }
            if spec.delta != 0.0 && kind != EnvKind::MonotoneGradient {
                return Err(invalid("delta", "only the monotone-gradient kind is nonlinear"));
            }
            if let Spatial::Periodic { period, values } = &spec.spatial {
                if !(period.is_finite() && *period > 0.0) {
                    return Err(invalid("spatial.period", "must be positive"));
                }
                if values.is_empty() {
                    return Err(invalid("spatial.values", "must not be empty"));
                }
                if values
                    .iter()
                    .any(|v| !v.is_finite() || *v < spec.c_min || *v > spec.c_max)
                {
                    return Err(invalid("spatial.values", "must lie in [c_min, c_max]"));
                }
            }
            (spec.c_min, spec.c_max + spec.delta)
        }
    };
    if let Temporal::Renewal { rate } = spec.temporal {
        if !(rate.is_finite() && rate > 0.0) {
            return Err(invalid("temporal.rate", "must be positive"));
        }
        if !matches!(spec.spatial, Spatial::Checkerboard) {
            return Err(invalid("temporal", "renewals need a random checkerboard"));
        }
    }
    let c0 = lip.max(1.0 / m);
    if !(c0 <= MAX_C0) {
        return Err(Error::Certification(format!(
            "constant C0 = {c0:e} exceeds {MAX_C0:e}"
        )));
    }
    Ok(CoefficientField {
        spec,
        constants: Constants {
            monotonicity: m,
            lipschitz: lip,
            c0,
        },
        offset_k: [0; MAX_DIM],
        offset_s: 0.0,
        external: None,
    })
}

impl CoefficientField {
    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn constants(&self) -> Constants {
        self.constants
    }

    pub fn kind(&self) -> EnvKind {
        self.spec.kind
    }

    pub fn t_max(&self) -> f64 {
        self.spec.t_max
    }

    /// Whether the field is independent of `tau`.
    pub fn is_static(&self) -> bool {
        matches!(self.spec.temporal, Temporal::Static)
            && self.external.as_ref().is_none_or(|z| z.steps() <= 1)
    }

    /// Attaches the external `z` of a shifted-linear field. `z` has `dim`
    /// components; node `i` of its grid covers `[i h, (i + 1) h)` and snapshot
    /// `j` is used for `tau` nearest to `times[j]`.
    pub fn with_external(mut self, z: Arc<GridFunction>) -> Result<Self> {
        if self.spec.kind != EnvKind::ShiftedLinear {
            return Err(invalid("kind", "external field requires the shifted-linear kind"));
        }
        if z.grid.dim != self.spec.dim || z.components != self.spec.dim {
            return Err(Error::MeshMismatch(format!(
                "external field has dim {} with {} components, environment dim {}",
                z.grid.dim, z.components, self.spec.dim
            )));
        }
        if z.steps() == 0 {
            return Err(invalid("external", "no snapshots"));
        }
        self.external = Some(z);
        Ok(self)
    }

    /// `a'(p, y, tau) = a(p, y + k, tau + s)`. Offsets accumulate exactly, so
    /// successive shifts agree bit for bit with a single combined shift.
    pub fn shift(&self, k: &[i64], s: f64) -> CoefficientField {
        let mut out = self.clone();
        for (a, &ka) in k.iter().enumerate().take(self.spec.dim) {
            out.offset_k[a] += ka;
        }
        out.offset_s += s;
        out
    }

    /// Scalar coefficient `c(y, tau)`.
    pub fn coefficient(&self, y: &[f64], tau: f64) -> Result<f64> {
        let (yy, t) = self.absolute(y, tau)?;
        Ok(self.c_at(&yy, t))
    }

    /// The map `p -> a(p, y, tau)`.
    pub fn law_at(&self, y: &[f64], tau: f64) -> Result<LocalLaw> {
        let (yy, t) = self.absolute(y, tau)?;
        if self.spec.kind == EnvKind::Identity {
            return Ok(LocalLaw::IDENTITY);
        }
        let c = self.c_at(&yy, t);
        let mut z = [0.0; MAX_DIM];
        if self.spec.kind == EnvKind::ShiftedLinear {
            if let Some(ext) = &self.external {
                z = external_at(ext, &yy[..self.spec.dim], t)?;
            }
        }
        Ok(LocalLaw {
            c,
            delta: self.spec.delta,
            z,
        })
    }

    pub fn eval(&self, p: &[f64], y: &[f64], tau: f64) -> Result<[f64; MAX_DIM]> {
        let law = self.law_at(y, tau)?;
        let mut out = [0.0; MAX_DIM];
        law.flux(&p[..self.spec.dim], &mut out[..self.spec.dim]);
        Ok(out)
    }

    fn absolute(&self, y: &[f64], tau: f64) -> Result<([f64; MAX_DIM], f64) > {
        let t = tau + self.offset_s;
        if !(t.abs() <= self.spec.t_max) {
            return Err(Error::TimeOutOfRange {
                tau: t,
                t_max: self.spec.t_max,
            });
        }
        let mut yy = [0.0; MAX_DIM];
        for a in 0..self.spec.dim {
            yy[a] = y[a] + self.offset_k[a] as f64;
        }
        Ok((yy, t))
    }

    fn c_at(&self, y: &[f64; MAX_DIM], t: f64) -> f64 {
        if self.spec.kind == EnvKind::Identity {
            return 1.0;
        }
        let d = self.spec.dim;
        match &self.spec.spatial {
            Spatial::Periodic { period, values } => {
                let n = values.len() as i64;
                let s: i64 = (0..d)
                    .map(|a| (y[a] * n as f64 / period).floor() as i64)
                    .sum();
                values[s.rem_euclid(n) as usize]
            }
            Spatial::Checkerboard => {
                let mut words = [domain::ENV_CELL, 0, 0, 0, 0, 0];
                for a in 0..d {
                    words[1 + a] = rng::word(y[a].floor() as i64);
                }
                let (block, idx) = self.epoch(&words[1..4], t);
                words[4] = rng::word(block);
                words[5] = idx;
                if rng::unit(rng::hash(self.spec.seed, &words)) < 0.5 {
                    self.spec.c_min
                } else {
                    self.spec.c_max
                }
            }
        }
    }

    /// Identifies the renewal epoch of a cell at time `t` as (block, index).
    /// Blocks have length `1 / rate`, so each holds a Poisson(1) number of
    /// uniformly placed renewals. The state before the first renewal after
    /// `-t_max` is the initial epoch.
    fn epoch(&self, cell: &[u64], t: f64) -> (i64, u64) {
        let rate = match self.spec.temporal {
            Temporal::Static => return (0, 0),
            Temporal::Renewal { rate } => rate,
        };
        let first = (-self.spec.t_max * rate).floor() as i64;
        let mut block = (t * rate).floor() as i64;
        let mut times = Vec::new();
        while block >= first {
            self.renewals(cell, block, rate, &mut times);
            let before = times.iter().filter(|&&s| s <= t).count();
            if before > 0 {
                return (block, before as u64);
            }
            block -= 1;
        }
        (first - 1, 0)
    }

    fn renewals(&self, cell: &[u64], block: i64, rate: f64, out: &mut Vec<f64>) {
        let seed = self.spec.seed;
        let base = [domain::ENV_RENEWAL, cell[0], cell[1], cell[2], rng::word(block)];
        let count = poisson_one(rng::open_unit(rng::hash(seed, &base)));
        out.clear();
        for i in 0..count {
            let w = [base[0], base[1], base[2], base[3], base[4], i as u64 + 1];
            out.push((block as f64 + rng::unit(rng::hash(seed, &w))) / rate);
        }
    }

    /// Samples the structural inequalities and `E|a(0)|^2` over the unit
    /// space-time cell. Deterministic in the field's seed.
    pub fn certify_structure(&self, n_samples: usize) -> Result<StructureReport> {
        if n_samples == 0 {
            return Err(invalid("n_samples", "must be at least 1"));
        }
        let d = self.spec.dim;
        let seed = self.spec.seed ^ 0x5eed;
        let u = |i: usize, j: u64| rng::unit(rng::hash(seed, &[domain::SAMPLING, i as u64, j]));
        let t_max = self.spec.t_max;
        let span = 8.0;
        let mut min_ratio = f64::INFINITY;
        let mut max_ratio: f64 = 0.0;
        let mut a0 = 0.0;
        for i in 0..n_samples {
            let mut p = [0.0; MAX_DIM];
            let mut q = [0.0; MAX_DIM];
            let mut y = [0.0; MAX_DIM];
            let mut y0 = [0.0; MAX_DIM];
            for a in 0..d {
                p[a] = 6.0 * u(i, a as u64) - 3.0;
                q[a] = 6.0 * u(i, 3 + a as u64) - 3.0;
                y[a] = span * u(i, 6 + a as u64);
                y0[a] = u(i, 9 + a as u64) - 0.5;
            }
            let tau = t_max * (2.0 * u(i, 12) - 1.0);
            let tau0 = (u(i, 13) - 0.5).clamp(-t_max, t_max);
            let law = self.law_at(&y, tau)?;
            let (mut ap, mut aq) = ([0.0; MAX_DIM], [0.0; MAX_DIM]);
            law.flux(&p[..d], &mut ap[..d]);
            law.flux(&q[..d], &mut aq[..d]);
            let mut dot = 0.0;
            let mut dpq = 0.0;
            let mut daq = 0.0;
            for a in 0..d {
                dot += (ap[a] - aq[a]) * (p[a] - q[a]);
                dpq += (p[a] - q[a]).powi(2);
                daq += (ap[a] - aq[a]).powi(2);
            }
            if dpq > 0.0 {
                min_ratio = min_ratio.min(dot / dpq);
                max_ratio = max_ratio.max((daq / dpq).sqrt());
            }
            let a_zero = self.eval(&[0.0; MAX_DIM][..d], &y0, tau0)?;
            a0 += a_zero[..d].iter().map(|v| v * v).sum::<f64>();
        }
        let mean_a0_squared = a0 / n_samples as f64;
        let tol = 1e-12;
        let c = self.constants;
        let pass = min_ratio >= c.monotonicity - tol
            && max_ratio <= c.lipschitz + tol
            && mean_a0_squared.is_finite();
        Ok(StructureReport {
            n_samples,
            min_monotone_ratio: min_ratio,
            max_lipschitz_ratio: max_ratio,
            mean_a0_squared,
            constants: c,
            pass,
        })
    }

    /// Seed and parameters only; evaluation is pure, so this is a complete
    /// snapshot apart from an attached external field.
    pub fn snapshot_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Snapshot {
            spec: self.spec.clone(),
            offset_k: self.offset_k[..self.spec.dim].to_vec(),
            offset_s: self.offset_s,
        })?)
    }

    pub fn restore_json(text: &str) -> Result<CoefficientField> {
        let snap: Snapshot = serde_json::from_str(text)?;
        let field = build_environment(snap.spec)?;
        if snap.offset_k.len() != field.spec.dim {
            return Err(Error::Decode("offset_k length differs from dim".into()));
        }
        if !snap.offset_s.is_finite() {
            return Err(Error::Decode("offset_s must be finite".into()));
        }
        Ok(field.shift(&snap.offset_k, snap.offset_s))
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    spec: EnvSpec,
    offset_k: Vec<i64>,
    offset_s: f64,
}

fn external_at(z: &GridFunction, y: &[f64], t: f64) -> Result<[f64; MAX_DIM]> {
    let g = &z.grid;
    let m = g.per_cell as f64;
    let mut c = [0i64; MAX_DIM];
    for a in 0..g.dim {
        c[a] = (y[a] * m + 1e-9).floor() as i64;
    }
    let node = g.index_wrapped(&c[..g.dim]);
    let k = if z.steps() == 1 {
        0
    } else {
        let t0 = z.times[0];
        let dtau = z.times[1] - z.times[0];
        let j = ((t - t0) / dtau).round();
        if !(j >= 0.0 && j < z.steps() as f64) {
            return Err(Error::TimeOutOfRange {
                tau: t,
                t_max: z.times[z.steps() - 1],
            });
        }
        j as usize
    };
    let mut out = [0.0; MAX_DIM];
    for a in 0..g.dim {
        out[a] = z.component(k, a)[node];
    }
    Ok(out)
}

fn poisson_one(u: f64) -> usize {
    let mut k = 0;
    let mut p = (-1.0f64).exp();
    let mut cdf = p;
    while u > cdf && k < 64 {
        k += 1;
        p /= k as f64;
        cdf += p;
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Grid, Quantity};
    use proptest::prelude::*;

    fn random_field(seed: u64) -> CoefficientField {
        build_environment(EnvSpec::checkerboard(
            2,
            1.0,
            3.0,
            Temporal::Renewal { rate: 1.0 },
            50.0,
            seed,
        ))
        .unwrap()
    }

    #[test]
    fn identity_and_periodic_examples() {
        let id = build_environment(EnvSpec::identity(1)).unwrap();
        assert_eq!(id.eval(&[2.5], &[0.3], 1.0).unwrap()[0], 2.5);
        assert_eq!(id.constants().c0, 1.0);
        assert_eq!(id.shift(&[1], 0.5).eval(&[2.5], &[0.0], 0.0).unwrap()[0], 2.5);

        let f = build_environment(EnvSpec::periodic(1, 1.0, vec![1.0, 4.0])).unwrap();
        assert_eq!(f.eval(&[1.5], &[0.25], 3.0).unwrap()[0], 1.5);
        assert_eq!(f.eval(&[1.5], &[0.75], 3.0).unwrap()[0], 6.0);
        assert_eq!(f.shift(&[0], 17.3).eval(&[1.0], &[0.25], 0.0).unwrap()[0], 1.0);
        assert_eq!(f.constants().c0, 4.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut s = EnvSpec::checkerboard(1, 0.0, 1.0, Temporal::Static, 10.0, 1);
        assert!(matches!(build_environment(s.clone()), Err(Error::InvalidParameter { name: "c_min", .. })));
        s.c_min = 2.0;
        assert!(build_environment(s.clone()).is_err());
        s.c_min = 0.5;
        s.dim = 4;
        assert!(build_environment(s.clone()).is_err());
        let huge = EnvSpec::checkerboard(1, 1.0, 1.0, Temporal::Static, 10.0, 1)
            .with_kind(EnvKind::MonotoneGradient, 1e7);
        assert!(matches!(build_environment(huge), Err(Error::Certification(_))));
    }

    #[test]
    fn time_window_is_enforced() {
        let f = random_field(1);
        assert!(f.coefficient(&[0.0, 0.0], 49.0).is_ok());
        assert!(matches!(
            f.coefficient(&[0.0, 0.0], 51.0),
            Err(Error::TimeOutOfRange { .. })
        ));
        assert!(f.shift(&[0, 0], 2.0).coefficient(&[0.0, 0.0], 49.0).is_err());
    }

    #[test]
    fn certification_of_shipped_kinds() {
        let id = build_environment(EnvSpec::identity(2)).unwrap();
        let r = id.certify_structure(100).unwrap();
        assert!((r.min_monotone_ratio - 1.0).abs() < 1e-12 && (r.max_lipschitz_ratio - 1.0).abs() < 1e-12);
        assert!(r.pass);

        let f = build_environment(EnvSpec::periodic(1, 1.0, vec![1.0, 4.0])).unwrap();
        let r = f.certify_structure(10_000).unwrap();
        assert!(r.pass);
        assert!((r.min_monotone_ratio - 1.0).abs() < 1e-12);
        assert!((r.max_lipschitz_ratio - 4.0).abs() < 1e-12);

        let g = build_environment(
            EnvSpec::periodic(2, 1.0, vec![1.0]).with_kind(EnvKind::MonotoneGradient, 0.1),
        )
        .unwrap();
        let r = g.certify_structure(10_000).unwrap();
        assert!(r.pass);
        assert!(r.min_monotone_ratio >= 1.0 && r.min_monotone_ratio <= 1.1);
        assert!(r.max_lipschitz_ratio <= 1.1);

        let rnd = random_field(9).certify_structure(10_000).unwrap();
        assert!(rnd.pass);
        assert!(rnd.mean_a0_squared == 0.0);
    }

    /// Finite-difference Hessian of `H(p) = c|p|^2/2 + delta sqrt(1 + |p|^2)`
    /// on a grid of `p`, compared with the field's certified constants.
    #[test]
    fn hamiltonian_hessian_bounds() {
        let (c, delta) = (1.0, 0.1);
        let h_fn = |p: [f64; 2]| 0.5 * c * (p[0] * p[0] + p[1] * p[1]) + delta * (1.0 + p[0] * p[0] + p[1] * p[1]).sqrt();
        let f = build_environment(
            EnvSpec::periodic(2, 1.0, vec![c]).with_kind(EnvKind::MonotoneGradient, delta),
        )
        .unwrap();
        let k = f.constants();
        let e = 1e-4;
        for i in -5..=5 {
            for j in -5..=5 {
                let p = [i as f64 * 0.7, j as f64 * 0.7];
                let mut hm = [[0.0; 2]; 2];
                for a in 0..2 {
                    for b in 0..2 {
                        let sh = |sa: f64, sb: f64| {
                            let mut q = p;
                            q[a] += sa;
                            q[b] += sb;
                            h_fn(q)
                        };
                        hm[a][b] = (sh(e, e) - sh(e, -e) - sh(-e, e) + sh(-e, -e)) / (4.0 * e * e);
                    }
                }
                let tr = hm[0][0] + hm[1][1];
                let det = hm[0][0] * hm[1][1] - hm[0][1] * hm[1][0];
                let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
                let (lo, hi) = (tr / 2.0 - disc, tr / 2.0 + disc);
                assert!(lo >= k.monotonicity - 1e-5, "{lo}");
                assert!(hi <= k.lipschitz + 1e-5, "{hi}");
                // the flux is the gradient of H
                let a = f.eval(&p, &[0.0, 0.0], 0.0).unwrap();
                let g0 = (h_fn([p[0] + e, p[1]]) - h_fn([p[0] - e, p[1]])) / (2.0 * e);
                assert!((a[0] - g0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn renewals_change_values_over_time() {
        let f = random_field(4);
        let mut changes = 0;
        let mut prev = f.coefficient(&[0.5, 0.5], 0.0).unwrap();
        for i in 1..=400 {
            let c = f.coefficient(&[0.5, 0.5], i as f64 * 0.05).unwrap();
            if c != prev {
                changes += 1;
            }
            prev = c;
        }
        // 20 time units at rate 1 give ~20 renewals, about half change the value
        assert!((3..=20).contains(&changes), "{changes}");
    }

    /// Disjoint space-time windows have the same mean coefficient at 3 sigma.
    #[test]
    fn stationarity_of_checkerboard_with_renewals() {
        let f = random_field(11);
        let window = |x0: f64, t0: f64| -> Vec<f64> {
            let mut v = Vec::new();
            for i in 0..40 {
                for j in 0..40 {
                    for k in 0..5 {
                        let y = [x0 + i as f64 + 0.5, j as f64 + 0.5];
                        v.push(f.coefficient(&y, t0 + 3.0 * k as f64).unwrap());
                    }
                }
            }
            v
        };
        let a = crate::stats::Estimate::from_samples(&window(0.0, -30.0));
        let b = crate::stats::Estimate::from_samples(&window(100.0, 10.0));
        let sigma = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
        assert!((a.mean - b.mean).abs() < 3.0 * sigma, "{} vs {}", a.mean, b.mean);
        assert!((a.mean - 2.0).abs() < 3.0 * a.stderr + 1e-12);
    }

    #[test]
    fn shifted_linear_uses_external_field() {
        let grid = Grid::new(1, 2, 4).unwrap();
        let z = GridFunction::from_fn(grid, Quantity::Z, |x| x[0]);
        let spec = EnvSpec::periodic(1, 1.0, vec![1.0, 4.0]).with_kind(EnvKind::ShiftedLinear, 0.0);
        let f = build_environment(spec).unwrap().with_external(Arc::new(z)).unwrap();
        // node covering y = 0.8 is 3 (z = 0.75), c = 4
        let a = f.eval(&[1.0], &[0.8], 0.0).unwrap()[0];
        assert_eq!(a, 4.0 * (1.0 + 0.75) - 0.75);
        let r = f.certify_structure(1000).unwrap();
        assert!(r.pass && r.mean_a0_squared > 0.0);
    }

    #[test]
    fn snapshot_round_trip() {
        let f = random_field(3).shift(&[2, -1], 0.25);
        let g = CoefficientField::restore_json(&f.snapshot_json().unwrap()).unwrap();
        assert_eq!(f, g);
        assert_eq!(
            f.coefficient(&[0.3, 0.1], 1.0).unwrap(),
            g.coefficient(&[0.3, 0.1], 1.0).unwrap()
        );
    }

    proptest! {
        #[test]
        fn determinism_and_shift_composition(
            seed in any::<u64>(),
            k1 in -5i64..5, k2 in -5i64..5, j1 in -5i64..5, j2 in -5i64..5,
            s1 in -5.0f64..5.0, s2 in -5.0f64..5.0,
            y0 in -10.0f64..10.0, y1 in -10.0f64..10.0, tau in -20.0f64..20.0,
        ) {
            let f = random_field(seed);
            let g = random_field(seed);
            let y = [y0, y1];
            prop_assert_eq!(f.coefficient(&y, tau).unwrap(), g.coefficient(&y, tau).unwrap());
            let twice = f.shift(&[k1, j1], s1).shift(&[k2, j2], s2);
            let once = f.shift(&[k1 + k2, j1 + j2], s1 + s2);
            prop_assert_eq!(twice.coefficient(&y, tau).unwrap().to_bits(), once.coefficient(&y, tau).unwrap().to_bits());
            let direct = f.coefficient(&[y0 + k1 as f64, y1 + j1 as f64], tau + s1).unwrap();
            prop_assert_eq!(f.shift(&[k1, j1], s1).coefficient(&y, tau).unwrap(), direct);
        }
    }
}
