//! Data ingestion, synthetic benchmarks, splitting and experiment runs.

pub mod config;
pub mod csvio;
pub mod experiment;
pub mod split;
pub mod synth;

pub use config::{ColumnConfig, DataSource, ExperimentConfig, GridConfig, MethodSpec};
pub use csvio::{load_csv, read_csv, ColumnRoles, ParseReport};
pub use experiment::{run_experiment, ExperimentOutcome, MethodSummary};
pub use split::{Split, SplitSpec};
pub use synth::{gen_synthetic, DgpName, SyntheticData, SyntheticDgp};
