use crate::error::{Error, Result};
use crate::server::SimilarityMetric;

use super::config::{Aggregator, ExperimentConfig};
use super::run::run_experiment;
use super::store::ResultsStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    LowLayers,
    Beta,
    Alpha,
    Metric,
    Aggregator,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" | "l" | "low_layers" => Ok(SweepAxis::LowLayers),
            "beta" => Ok(SweepAxis::Beta),
            "alpha" => Ok(SweepAxis::Alpha),
            "metric" => Ok(SweepAxis::Metric),
            "aggregator" => Ok(SweepAxis::Aggregator),
            other => Err(Error::invalid(format!("unknown sweep axis `{other}`"))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::LowLayers => "L",
            SweepAxis::Beta => "beta",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Metric => "metric",
            SweepAxis::Aggregator => "aggregator",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let number = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::invalid(format!("`{v}` is not a number")))
        };
        match self {
            SweepAxis::LowLayers => {
                cfg.client.low_layers = value
                    .parse()
                    .map_err(|_| Error::invalid(format!("`{value}` is not a layer count")))?
            }
            SweepAxis::Beta => cfg.client.beta = number(value)?,
            SweepAxis::Alpha => cfg.sgca.alpha = number(value)?,
            SweepAxis::Metric => cfg.sgca.metric = value.parse::<SimilarityMetric>()?,
            SweepAxis::Aggregator => cfg.experiment.aggregator = value.parse::<Aggregator>()?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One point of a sweep. A failed run keeps its error instead of aborting
/// the sweep.
#[derive(Debug)]
pub struct SweepRun {
    pub label: String,
    pub outcome: Result<ResultsStore>,
}

/// β grid used for sensitivity sweeps.
pub const BETA_GRID: [f64; 5] = [0.001, 0.01, 0.1, 1.0, 10.0];

/// Runs `base` once per value, same seed throughout.
pub fn run_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<SweepRun>> {
    if values.is_empty() {
        return Err(Error::invalid("sweep needs at least one value"));
    }
    Ok(values
        .iter()
        .map(|v| SweepRun {
            label: format!("{}={v}", axis.name()),
            outcome: axis.apply(base, v).and_then(|cfg| run_experiment(&cfg)),
        })
        .collect())
}

/// The four-way ablation: aggregator x {all layers, lowest layer only}.
pub fn ablation_configs(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let all = base.model.blocks;
    [
        (Aggregator::Fedavg, all),
        (Aggregator::Sgca, all),
        (Aggregator::Fedavg, 1),
        (Aggregator::Sgca, 1),
    ]
    .into_iter()
    .map(|(agg, layers)| {
        let mut cfg = base.clone();
        cfg.experiment.aggregator = agg;
        cfg.client.low_layers = layers;
        (format!("{}_L{layers}", agg.name()), cfg)
    })
    .collect()
}

pub fn run_ablation(base: &ExperimentConfig) -> Vec<SweepRun> {
    ablation_configs(base)
        .into_iter()
        .map(|(label, cfg)| SweepRun {
            label,
            outcome: run_experiment(&cfg),
        })
        .collect()
}
