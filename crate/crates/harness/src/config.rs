//! Experiment configuration: a TOML file with the sections `environment`,
//! `geometry`, `ladders`, `seeds`, `tolerances`, `model` and `expect`.
//!
//! Loading validates every key before anything is computed and reports all
//! problems at once. The resolved configuration has every default filled in
//! and is what gets hashed and stored in the run record.

use std::fmt;

use homlab::corrector::DEFAULT_LAMBDAS;
use homlab::env::{EnvKind, EnvSpec, Temporal};
use homlab::linspde::BumpSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    SpdeMoments,
    Decorrelation,
    Attractor,
    Corrector,
    EffectiveLaw,
    Homogenize,
    FsLattice,
    FsContinuous,
    VerifyAll,
}

const TAGS: &[&str] = &[
    "spde-moments",
    "decorrelation",
    "attractor",
    "corrector",
    "effective-law",
    "homogenize",
    "fs-lattice",
    "fs-continuous",
    "verify-all",
];

impl Experiment {
    pub const ALL: [Experiment; 9] = [
        Experiment::SpdeMoments,
        Experiment::Decorrelation,
        Experiment::Attractor,
        Experiment::Corrector,
        Experiment::EffectiveLaw,
        Experiment::Homogenize,
        Experiment::FsLattice,
        Experiment::FsContinuous,
        Experiment::VerifyAll,
    ];

    pub fn tag(self) -> &'static str {
        TAGS[Self::ALL.iter().position(|e| *e == self).unwrap()]
    }

    pub fn from_tag(s: &str) -> Option<Self> {
        TAGS.iter().position(|t| *t == s).map(|i| Self::ALL[i])
    }

    /// Experiments whose replicas are indexed from a base seed.
    fn replica_based(self) -> bool {
        matches!(
            self,
            Experiment::SpdeMoments | Experiment::Decorrelation | Experiment::Attractor | Experiment::Homogenize
        )
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpatialKind {
    Periodic,
    Checkerboard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalKind {
    Static,
    Renewal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub kind: EnvKind,
    pub spatial: SpatialKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    pub period: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_max: Option<f64>,
    pub delta: f64,
    pub temporal: TemporalKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    pub t_max: f64,
    pub seed: u64,
}

impl Environment {
    pub fn identity() -> Self {
        Environment {
            kind: EnvKind::Identity,
            spatial: SpatialKind::Periodic,
            values: None,
            period: 1.0,
            c_min: None,
            c_max: None,
            delta: 0.0,
            temporal: TemporalKind::Static,
            rate: None,
            t_max: 1e6,
            seed: 0,
        }
    }

    pub fn spec(&self, dim: usize) -> EnvSpec {
        if self.kind == EnvKind::Identity {
            return EnvSpec::identity(dim);
        }
        let temporal = match self.temporal {
            TemporalKind::Static => Temporal::Static,
            TemporalKind::Renewal => Temporal::Renewal {
                rate: self.rate.unwrap_or(1.0),
            },
        };
        let mut spec = match self.spatial {
            SpatialKind::Periodic => EnvSpec::periodic(dim, self.period, self.values.clone().unwrap_or_default()),
            SpatialKind::Checkerboard => EnvSpec::checkerboard(
                dim,
                self.c_min.unwrap_or(1.0),
                self.c_max.unwrap_or(1.0),
                temporal,
                self.t_max,
                self.seed,
            ),
        };
        spec.temporal = temporal;
        spec.t_max = self.t_max;
        spec.seed = self.seed;
        spec.with_kind(self.kind, self.delta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub d: usize,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub side: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub t_final: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ladders {
    pub lambda: Vec<f64>,
    pub cells: Vec<usize>,
    pub cell_m: usize,
    pub cell_dt: f64,
    pub time_factor: f64,
    pub p_max: f64,
    pub p_points: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub t: Vec<f64>,
    #[serde(rename = "R", default, skip_serializing_if = "Vec::is_empty")]
    pub radii: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epsilon: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub base: u64,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub list: Option<Vec<u64>>,
}

impl Seeds {
    /// Explicit list, or `base, base + 1, ..` otherwise.
    pub fn resolved(&self) -> Vec<u64> {
        match &self.list {
            Some(l) => l.clone(),
            None => (0..self.count as u64).map(|i| self.base + i).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub solver: f64,
    pub certificate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Potential {
    Quadratic,
    QuadTanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Transient,
    Attractor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub kappa: f64,
    pub r0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_z: Option<u64>,
    pub p: Vec<f64>,
    pub theta: f64,
    pub forcing: f64,
    pub u0_mode: usize,
    pub potential: Potential,
    pub beta: f64,
    pub sigma: f64,
    pub source: Source,
    pub burn_in: f64,
    pub record_every: usize,
}

impl Model {
    pub fn bump(&self) -> BumpSpec {
        BumpSpec {
            r0: self.r0,
            kappa: self.kappa,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expect {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope: Option<f64>,
    pub slope_tol: f64,
    pub max_ratio: f64,
    pub seed_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orthogonality: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l2: Option<f64>,
}

/// Fully resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub environment: Option<Environment>,
    pub geometry: Geometry,
    pub ladders: Ladders,
    pub seeds: Seeds,
    pub tolerances: Tolerances,
    pub model: Model,
    pub expect: Expect,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Problem {
    pub key: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ConfigError {
    pub problems: Vec<Problem>,
}

impl ConfigError {
    pub fn keys(&self) -> Vec<&str> {
        self.problems.iter().map(|p| p.key.as_str()).collect()
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration ({} problem{})", self.problems.len(), if self.problems.len() == 1 { "" } else { "s" })?;
        for p in &self.problems {
            write!(f, "\n  {}: {}", p.key, p.message)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Tag(&'static [&'static str]),
    Text,
    Float,
    PosFloat,
    NonNeg,
    Fraction,
    PosInt,
    UInt,
    Floats,
    PosFloats,
    NonNegFloats,
    PosInts,
    UInts,
}

const SECTIONS: &[&str] = &["environment", "geometry", "ladders", "seeds", "tolerances", "model", "expect"];

const SCHEMA: &[(&str, Kind)] = &[
    ("experiment", Kind::Tag(TAGS)),
    ("output", Kind::Text),
    ("environment.kind", Kind::Tag(&["identity", "scalar-linear", "monotone-gradient", "shifted-linear"])),
    ("environment.spatial", Kind::Tag(&["periodic", "checkerboard"])),
    ("environment.values", Kind::PosFloats),
    ("environment.period", Kind::PosFloat),
    ("environment.c_min", Kind::PosFloat),
    ("environment.c_max", Kind::PosFloat),
    ("environment.delta", Kind::NonNeg),
    ("environment.temporal", Kind::Tag(&["static", "renewal"])),
    ("environment.rate", Kind::PosFloat),
    ("environment.t_max", Kind::PosFloat),
    ("environment.seed", Kind::UInt),
    ("geometry.d", Kind::PosInt),
    ("geometry.L", Kind::PosInt),
    ("geometry.m", Kind::PosInt),
    ("geometry.dt", Kind::PosFloat),
    ("geometry.T", Kind::PosFloat),
    ("ladders.lambda", Kind::PosFloats),
    ("ladders.cells", Kind::PosInts),
    ("ladders.cell_m", Kind::PosInt),
    ("ladders.cell_dt", Kind::PosFloat),
    ("ladders.time_factor", Kind::PosFloat),
    ("ladders.p_max", Kind::PosFloat),
    ("ladders.p_points", Kind::PosInt),
    ("ladders.t", Kind::PosFloats),
    ("ladders.R", Kind::NonNegFloats),
    ("ladders.epsilon", Kind::PosFloats),
    ("seeds.base", Kind::UInt),
    ("seeds.count", Kind::PosInt),
    ("seeds.list", Kind::UInts),
    ("tolerances.solver", Kind::PosFloat),
    ("tolerances.certificate", Kind::NonNeg),
    ("model.kappa", Kind::Float),
    ("model.r0", Kind::PosFloat),
    ("model.n_z", Kind::PosInt),
    ("model.p", Kind::Floats),
    ("model.theta", Kind::NonNeg),
    ("model.forcing", Kind::Float),
    ("model.u0_mode", Kind::PosInt),
    ("model.potential", Kind::Tag(&["quadratic", "quad-tanh"])),
    ("model.beta", Kind::NonNeg),
    ("model.sigma", Kind::NonNeg),
    ("model.source", Kind::Tag(&["transient", "attractor"])),
    ("model.burn_in", Kind::PosFloat),
    ("model.record_every", Kind::PosInt),
    ("expect.slope", Kind::Float),
    ("expect.slope_tol", Kind::PosFloat),
    ("expect.max_ratio", Kind::PosFloat),
    ("expect.seed_fraction", Kind::Fraction),
    ("expect.orthogonality", Kind::PosFloat),
    ("expect.l2", Kind::PosFloat),
];

fn number(v: &toml::Value) -> Option<f64> {
    match v {
        toml::Value::Float(x) => Some(*x),
        toml::Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

fn check_kind(kind: Kind, v: &toml::Value) -> Result<(), String> {
    let float_ok = |x: f64, pred: fn(f64) -> bool, what: &str| if x.is_finite() && pred(x) { Ok(()) } else { Err(format!("expected {what}")) };
    let list = |pred: &dyn Fn(&toml::Value) -> Result<(), String>, what: &str| match v {
        toml::Value::Array(a) if !a.is_empty() => a.iter().try_for_each(pred),
        _ => Err(format!("expected a non-empty array of {what}")),
    };
    match kind {
        Kind::Tag(allowed) => match v.as_str() {
            Some(s) if allowed.contains(&s) => Ok(()),
            _ => Err(format!("expected one of {}", allowed.join(", "))),
        },
        Kind::Text => v.as_str().map(|_| ()).ok_or_else(|| "expected a string".into()),
        Kind::Float => number(v).map_or(Err("expected a number".into()), |x| float_ok(x, |_| true, "a finite number")),
        Kind::PosFloat => number(v).map_or(Err("expected a number".into()), |x| float_ok(x, |x| x > 0.0, "a positive number")),
        Kind::NonNeg => number(v).map_or(Err("expected a number".into()), |x| float_ok(x, |x| x >= 0.0, "a non-negative number")),
        Kind::Fraction => number(v).map_or(Err("expected a number".into()), |x| float_ok(x, |x| (0.0..=1.0).contains(&x), "a number in [0, 1]")),
        Kind::PosInt => match v.as_integer() {
            Some(i) if i > 0 => Ok(()),
            _ => Err("expected a positive integer".into()),
        },
        Kind::UInt => match v.as_integer() {
            Some(i) if i >= 0 => Ok(()),
            _ => Err("expected a non-negative integer".into()),
        },
        Kind::Floats => list(&|x| check_kind(Kind::Float, x), "numbers"),
        Kind::PosFloats => list(&|x| check_kind(Kind::PosFloat, x), "positive numbers"),
        Kind::NonNegFloats => list(&|x| check_kind(Kind::NonNeg, x), "non-negative numbers"),
        Kind::PosInts => list(&|x| check_kind(Kind::PosInt, x), "positive integers"),
        Kind::UInts => list(&|x| check_kind(Kind::UInt, x), "non-negative integers"),
    }
}

struct Reader<'a> {
    root: &'a toml::Table,
    problems: Vec<Problem>,
}

impl<'a> Reader<'a> {
    fn get(&self, path: &str) -> Option<&'a toml::Value> {
        let mut parts = path.split('.');
        let first = self.root.get(parts.next()?)?;
        match parts.next() {
            None => Some(first),
            Some(k) => first.as_table()?.get(k),
        }
    }

    fn has(&self, path: &str) -> bool {
        self.get(path).is_some()
    }

    fn problem(&mut self, key: &str, message: impl Into<String>) {
        if !self.problems.iter().any(|p| p.key == key) {
            self.problems.push(Problem {
                key: key.into(),
                message: message.into(),
            });
        }
    }

    fn require(&mut self, path: &str) {
        if !self.has(path) {
            self.problem(path, "missing required key");
        }
    }

    fn f64(&self, path: &str) -> Option<f64> {
        self.get(path).and_then(number)
    }

    fn f64_or(&self, path: &str, default: f64) -> f64 {
        self.f64(path).unwrap_or(default)
    }

    fn usize(&self, path: &str) -> Option<usize> {
        self.get(path).and_then(|v| v.as_integer()).map(|i| i.max(0) as usize)
    }

    fn u64(&self, path: &str) -> Option<u64> {
        self.get(path).and_then(|v| v.as_integer()).map(|i| i.max(0) as u64)
    }

    fn str(&self, path: &str) -> Option<&'a str> {
        self.get(path).and_then(|v| v.as_str())
    }

    fn floats(&self, path: &str) -> Option<Vec<f64>> {
        self.get(path)?.as_array().map(|a| a.iter().filter_map(number).collect())
    }

    fn ints(&self, path: &str) -> Option<Vec<u64>> {
        self.get(path)?
            .as_array()
            .map(|a| a.iter().filter_map(|v| v.as_integer()).map(|i| i.max(0) as u64).collect())
    }
}

fn tag_value<T: for<'de> Deserialize<'de>>(s: &str) -> Option<T> {
    T::deserialize(serde::de::value::StrDeserializer::<serde::de::value::Error>::new(s)).ok()
}

/// Parses and validates a configuration. `command` is the experiment chosen
/// on the command line; when given, the file may omit `experiment`.
pub fn parse_config(text: &str, command: Option<Experiment>) -> Result<ExperimentConfig, ConfigError> {
    let root: toml::Table = toml::from_str(text).map_err(|e| ConfigError {
        problems: vec![Problem {
            key: "<file>".into(),
            message: e.message().to_string(),
        }],
    })?;
    let mut r = Reader {
        root: &root,
        problems: Vec::new(),
    };

    for (k, v) in &root {
        if SECTIONS.contains(&k.as_str()) {
            match v.as_table() {
                Some(t) => {
                    for (kk, vv) in t {
                        let path = format!("{k}.{kk}");
                        match SCHEMA.iter().find(|(p, _)| *p == path) {
                            Some((_, kind)) => {
                                if let Err(m) = check_kind(*kind, vv) {
                                    r.problem(&path, m);
                                }
                            }
                            None => r.problem(&path, "unknown key"),
                        }
                    }
                }
                None => r.problem(k, "expected a table"),
            }
        } else {
            match SCHEMA.iter().find(|(p, _)| p == k) {
                Some((_, kind)) => {
                    if let Err(m) = check_kind(*kind, v) {
                        r.problem(k, m);
                    }
                }
                None => r.problem(k, "unknown key"),
            }
        }
    }

    let file_tag = r.str("experiment").and_then(Experiment::from_tag);
    let experiment = match (command, file_tag) {
        (Some(c), Some(f)) if c != f => {
            r.problem("experiment", format!("file declares `{f}` but the command is `{c}`"));
            c
        }
        (Some(c), _) => c,
        (None, Some(f)) => f,
        (None, None) => {
            r.require("experiment");
            Experiment::VerifyAll
        }
    };

    requirements(experiment, &mut r);
    let cfg = resolve(experiment, &r);
    semantic_checks(&cfg, &mut r);
    if r.problems.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError { problems: r.problems })
    }
}

fn requirements(e: Experiment, r: &mut Reader) {
    use Experiment::*;
    let needs_env = matches!(e, Corrector | EffectiveLaw | Homogenize | FsContinuous);
    let geometry: &[&str] = match e {
        SpdeMoments | Attractor => &["d", "L", "m", "dt"],
        Decorrelation => &["d", "L", "m", "dt", "T"],
        Corrector => &["d", "L", "m"],
        EffectiveLaw => &["d"],
        Homogenize | FsContinuous => &["d", "L", "m", "dt", "T"],
        FsLattice => &["d", "dt", "T"],
        VerifyAll => &[],
    };
    for k in geometry {
        r.require(&format!("geometry.{k}"));
    }
    match e {
        SpdeMoments => r.require("ladders.t"),
        Decorrelation => r.require("ladders.R"),
        Attractor => {
            r.require("ladders.t");
            r.require("model.n_z");
        }
        Homogenize | FsLattice | FsContinuous => r.require("ladders.epsilon"),
        _ => {}
    }
    if e != VerifyAll && !matches!(e, Corrector | EffectiveLaw) && !r.has("seeds.count") && !r.has("seeds.list") {
        r.require("seeds.count");
    }
    if needs_env || r.has("environment") {
        r.require("environment.kind");
        let kind = r.str("environment.kind");
        let spatial = r.str("environment.spatial").unwrap_or("periodic");
        if kind.is_some_and(|k| k != "identity") {
            match spatial {
                "periodic" => r.require("environment.values"),
                _ => {
                    r.require("environment.c_min");
                    r.require("environment.c_max");
                }
            }
        }
        if r.str("environment.temporal") == Some("renewal") {
            r.require("environment.rate");
            if matches!(e, Corrector | EffectiveLaw) {
                r.require("geometry.dt");
            }
        }
    }
}

fn resolve(e: Experiment, r: &Reader) -> ExperimentConfig {
    let d = r.usize("geometry.d").unwrap_or(1);
    let base = r.u64("seeds.base").unwrap_or(0);
    let environment = if r.has("environment") {
        Some(Environment {
            kind: r.str("environment.kind").and_then(tag_value).unwrap_or(EnvKind::Identity),
            spatial: r.str("environment.spatial").and_then(tag_value).unwrap_or(SpatialKind::Periodic),
            values: r.floats("environment.values"),
            period: r.f64_or("environment.period", 1.0),
            c_min: r.f64("environment.c_min"),
            c_max: r.f64("environment.c_max"),
            delta: r.f64_or("environment.delta", 0.0),
            temporal: r.str("environment.temporal").and_then(tag_value).unwrap_or(TemporalKind::Static),
            rate: r.f64("environment.rate"),
            t_max: r.f64_or("environment.t_max", 1e6),
            seed: r.u64("environment.seed").unwrap_or(base),
        })
    } else if e == Experiment::VerifyAll {
        Some(Environment::identity())
    } else {
        None
    };
    let list = r.ints("seeds.list");
    let bump = BumpSpec::default();
    let mut p = r.floats("model.p").unwrap_or_default();
    if p.is_empty() {
        p = vec![0.0; d];
        p[0] = 1.0;
    }
    ExperimentConfig {
        experiment: e,
        output: r.str("output").map(String::from),
        environment,
        geometry: Geometry {
            d,
            side: r.usize("geometry.L"),
            m: r.usize("geometry.m"),
            dt: r.f64("geometry.dt"),
            t_final: r.f64("geometry.T"),
        },
        ladders: Ladders {
            lambda: r.floats("ladders.lambda").unwrap_or_else(|| DEFAULT_LAMBDAS.to_vec()),
            cells: r
                .ints("ladders.cells")
                .map(|v| v.into_iter().map(|x| x as usize).collect())
                .unwrap_or_else(|| if d == 3 { vec![4, 8] } else { vec![4, 8, 16] }),
            cell_m: r.usize("ladders.cell_m").unwrap_or(8),
            cell_dt: r.f64_or("ladders.cell_dt", 0.125),
            time_factor: r.f64_or("ladders.time_factor", 1.0),
            p_max: r.f64_or("ladders.p_max", 2.0),
            p_points: r.usize("ladders.p_points").unwrap_or(5),
            t: r.floats("ladders.t").unwrap_or_default(),
            radii: r.floats("ladders.R").unwrap_or_default(),
            epsilon: r.floats("ladders.epsilon").unwrap_or_default(),
        },
        seeds: Seeds {
            base,
            count: list.as_ref().map_or_else(|| r.usize("seeds.count").unwrap_or(1), |l| l.len()),
            list,
        },
        tolerances: Tolerances {
            solver: r.f64_or("tolerances.solver", 1e-10),
            certificate: r.f64_or("tolerances.certificate", 1e-8),
        },
        model: Model {
            kappa: r.f64_or("model.kappa", bump.kappa),
            r0: r.f64_or("model.r0", bump.r0),
            n_z: r.u64("model.n_z"),
            p,
            theta: r.f64_or("model.theta", 1.0),
            forcing: r.f64_or("model.forcing", 0.0),
            u0_mode: r.usize("model.u0_mode").unwrap_or(1),
            potential: r.str("model.potential").and_then(tag_value).unwrap_or(Potential::Quadratic),
            beta: r.f64_or("model.beta", 0.0),
            sigma: r.f64_or("model.sigma", 1.0),
            source: r.str("model.source").and_then(tag_value).unwrap_or(Source::Transient),
            burn_in: r.f64_or("model.burn_in", 64.0),
            record_every: r.usize("model.record_every").unwrap_or(1),
        },
        expect: Expect {
            slope: r.f64("expect.slope"),
            slope_tol: r.f64_or("expect.slope_tol", 0.5),
            max_ratio: r.f64_or("expect.max_ratio", 0.8),
            seed_fraction: r.f64_or("expect.seed_fraction", 0.9),
            orthogonality: r.f64("expect.orthogonality"),
            l2: r.f64("expect.l2"),
        },
    }
}

fn semantic_checks(c: &ExperimentConfig, r: &mut Reader) {
    if !(1..=3).contains(&c.geometry.d) {
        r.problem("geometry.d", "must be 1, 2 or 3");
    }
    if r.has("model.p") && c.model.p.len() != c.geometry.d {
        r.problem("model.p", format!("needs {} components", c.geometry.d));
    }
    if let (Some(count), Some(list)) = (r.usize("seeds.count"), r.ints("seeds.list")) {
        if count != list.len() {
            r.problem("seeds.count", "disagrees with the length of seeds.list");
        }
    }
    if c.seeds.list.is_some() && c.experiment.replica_based() {
        r.problem("seeds.list", format!("`{}` indexes replicas from seeds.base; use seeds.count", c.experiment));
    }
    if c.experiment.replica_based() && c.experiment != Experiment::Homogenize && r.has("seeds.count") && c.seeds.count < 2 {
        r.problem("seeds.count", "statistics need at least two replicas");
    }
    let strictly = |v: &[f64], up: bool| v.windows(2).all(|w| if up { w[1] > w[0] } else { w[1] < w[0] });
    if !strictly(&c.ladders.t, true) {
        r.problem("ladders.t", "must be increasing");
    }
    if !strictly(&c.ladders.radii, true) {
        r.problem("ladders.R", "must be increasing");
    }
    if !strictly(&c.ladders.epsilon, false) {
        r.problem("ladders.epsilon", "must be decreasing");
    }
    if c.ladders.epsilon.iter().any(|&e| e > 1.0) {
        r.problem("ladders.epsilon", "values must lie in (0, 1]");
    }
    if let Some(env) = &c.environment {
        if let (Some(lo), Some(hi)) = (env.c_min, env.c_max) {
            if lo > hi {
                r.problem("environment.c_min", "exceeds environment.c_max");
            }
        }
        if c.experiment == Experiment::FsContinuous && env.kind != EnvKind::ShiftedLinear {
            r.problem("environment.kind", "fs-continuous needs `shifted-linear`");
        }
    }
    if c.model.r0 >= 0.5 {
        r.problem("model.r0", "must lie in (0, 1/2)");
    }
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    /// SHA-256 of the resolved TOML, in hex.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn env_spec(&self) -> Option<EnvSpec> {
        self.environment.as_ref().map(|e| e.spec(self.geometry.d))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
