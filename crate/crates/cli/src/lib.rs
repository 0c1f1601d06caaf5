//! File formats, experiment configuration and the end-to-end pipeline behind
//! the `spdsemg` command.

pub mod analyze;
pub mod bundle;
pub mod config;
pub mod error;
pub mod format;
pub mod ingest;
pub mod manifest;
pub mod pipeline;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
pub use manifest::Manifest;
pub use pipeline::{build_dataset, run_experiment, Checkpoint, Dataset, MetricsReport};
