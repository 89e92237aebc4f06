//! Run records: everything a run produced, with the resolved configuration
//! and the seeds, serialized as JSON.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::config::{hex, ExperimentConfig};

/// Version of the record layout; restore refuses any other.
pub const ARTIFACT_VERSION: &str = "homlab-record/1";

/// A float that survives JSON: non-finite values are written as strings.
#[derive(Debug, Clone, Copy, Default)]
pub struct Num(pub f64);

impl PartialEq for Num {
    fn eq(&self, other: &Self) -> bool {
        self.0.to_bits() == other.0.to_bits() || (self.0.is_nan() && other.0.is_nan())
    }
}

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let x = self.0;
        if x.is_finite() {
            s.serialize_f64(x)
        } else if x.is_nan() {
            s.serialize_str("nan")
        } else if x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }
}

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            F(f64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::F(x) => Ok(Num(x)),
            Raw::S(s) => match s.as_str() {
                "nan" => Ok(Num(f64::NAN)),
                "inf" => Ok(Num(f64::INFINITY)),
                "-inf" => Ok(Num(f64::NEG_INFINITY)),
                _ => Err(serde::de::Error::custom(format!("not a number: {s}"))),
            },
        }
    }
}

impl fmt::Display for Num {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

/// Which columns of a table form a plot series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSpec {
    pub name: String,
    pub x: String,
    pub y: String,
    pub stderr: Option<String>,
    /// Name of the metric holding a fitted log-log slope, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_metric: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Num>>,
    #[serde(default)]
    pub plots: Vec<PlotSpec>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            plots: Vec::new(),
        }
    }

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.columns.len(), "row width of table {}", self.name);
        self.rows.push(row.iter().map(|&x| Num(x)).collect());
    }

    pub fn plot(mut self, name: &str, x: &str, y: &str, stderr: Option<&str>, slope_metric: Option<&str>) -> Self {
        self.plots.push(PlotSpec {
            name: name.into(),
            x: x.into(),
            y: y.into(),
            stderr: stderr.map(String::from),
            slope_metric: slope_metric.map(String::from),
        });
        self
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i].0).collect())
    }

    pub fn to_csv(&self) -> anyhow::Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|x| format!("{}", x.0)))?;
        }
        Ok(w.into_inner()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub name: String,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub tables: Vec<Table>,
    pub metrics: BTreeMap<String, Num>,
    /// Files written into the task directory besides the tables.
    pub files: Vec<String>,
    pub wall_clock_s: f64,
}

impl TaskRecord {
    pub fn new(name: &str) -> Self {
        TaskRecord {
            name: name.into(),
            pass: true,
            error: None,
            tables: Vec::new(),
            metrics: BTreeMap::new(),
            files: Vec::new(),
            wall_clock_s: 0.0,
        }
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.insert(name.into(), Num(value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).map(|n| n.0)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub artifact_version: String,
    pub package_version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub tasks: Vec<TaskRecord>,
    pub pass: bool,
    pub wall_clock_s: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum RestoreError {
    #[error("record was written by artifact version `{found}`, this build reads `{expected}`")]
    Version { found: String, expected: String },
    #[error("record does not parse: {0}")]
    Parse(#[from] serde_json::Error),
}

impl RunRecord {
    pub fn snapshot(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    pub fn restore(text: &str) -> Result<Self, RestoreError> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let found = v.get("artifact_version").and_then(|x| x.as_str()).unwrap_or("<missing>");
        if found != ARTIFACT_VERSION {
            return Err(RestoreError::Version {
                found: found.into(),
                expected: ARTIFACT_VERSION.into(),
            });
        }
        Ok(serde_json::from_value(v)?)
    }

    /// Digest of every numeric output (tables, metrics, pass flags, errors);
    /// wall-clock times are excluded.
    pub fn numeric_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config_hash.as_bytes());
        for t in &self.tasks {
            let mut t = t.clone();
            t.wall_clock_s = 0.0;
            h.update(serde_json::to_vec(&t).expect("task serializes"));
        }
        hex(&h.finalize())
    }

    pub fn task(&self, name: &str) -> Option<&TaskRecord> {
        self.tasks.iter().find(|t| t.name == name)
    }
}
