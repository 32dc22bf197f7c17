//! Experiment configuration, the round loop, result storage and sweeps.

mod config;
mod run;
mod store;
mod sweep;

pub use config::{Aggregator, ExperimentConfig, RunSettings};
pub use run::{build_clients, run_experiment, ClientRoundMetrics, RoundRecord};
pub use store::{ExportFormat, ResultsStore, RunManifest, Summary};
pub use sweep::{ablation_configs, run_ablation, run_sweep, SweepAxis, SweepRun, BETA_GRID};
