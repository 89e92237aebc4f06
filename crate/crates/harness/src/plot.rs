//! Plot data: one `(x, y, stderr)` CSV per plotted series plus a manifest.
//! Nothing is rendered.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::record::{Num, RunRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotEntry {
    pub file: String,
    pub task: String,
    pub table: String,
    pub x: String,
    pub y: String,
    pub rows: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fitted_slope: Option<Num>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub entries: Vec<PlotEntry>,
}

/// Writes the plot files of `record` into `dir` and returns the manifest,
/// which is also written as `manifest.json`. Rows are sorted by `x`; a
/// series without an error column gets zero `stderr`.
pub fn emit_plot_data(record: &RunRecord, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut entries = Vec::new();
    for task in &record.tasks {
        for table in &task.tables {
            for spec in &table.plots {
                let (Some(xs), Some(ys)) = (table.column(&spec.x), table.column(&spec.y)) else {
                    continue;
                };
                let es = spec
                    .stderr
                    .as_deref()
                    .and_then(|c| table.column(c))
                    .unwrap_or_else(|| vec![0.0; xs.len()]);
                let mut rows: Vec<(f64, f64, f64)> = xs.into_iter().zip(ys).zip(es).map(|((x, y), e)| (x, y, e)).collect();
                rows.sort_by(|a, b| a.0.total_cmp(&b.0));
                let file = format!("{}-{}.csv", task.name, spec.name);
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record([spec.x.as_str(), spec.y.as_str(), "stderr"])?;
                for (x, y, e) in &rows {
                    w.write_record([x.to_string(), y.to_string(), e.to_string()])?;
                }
                fs::write(dir.join(&file), w.into_inner()?)?;
                entries.push(PlotEntry {
                    file,
                    task: task.name.clone(),
                    table: table.name.clone(),
                    x: spec.x.clone(),
                    y: spec.y.clone(),
                    rows: rows.len(),
                    fitted_slope: spec.slope_metric.as_deref().and_then(|m| task.metrics.get(m)).copied(),
                });
            }
        }
    }
    let manifest = Manifest {
        config_hash: record.config_hash.clone(),
        entries,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}
