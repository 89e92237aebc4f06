//! Configuration, execution and persistence of homlab experiments.

pub mod config;
pub mod plot;
pub mod record;
pub mod runner;

pub use config::{parse_config, ConfigError, Experiment, ExperimentConfig};
pub use plot::{emit_plot_data, Manifest};
pub use record::{RestoreError, RunRecord, ARTIFACT_VERSION};
pub use runner::run;
