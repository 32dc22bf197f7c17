use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter_net::{BackboneConfig, ModelDims};
use crate::client::ClientConfig;
use crate::datagen::FederationSpec;
use crate::error::{Error, Result};
use crate::server::SgcaConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    /// per-client rows of the collaboration matrix
    Sgca,
    /// one size-weighted average for everyone
    Fedavg,
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgca" => Ok(Aggregator::Sgca),
            "fedavg" => Ok(Aggregator::Fedavg),
            other => Err(Error::invalid(format!("unknown aggregator `{other}`"))),
        }
    }
}

impl Aggregator {
    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Sgca => "sgca",
            Aggregator::Fedavg => "fedavg",
        }
    }
}

/// The `[experiment]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSettings {
    pub rounds: usize,
    pub seed: u64,
    pub aggregator: Aggregator,
    /// train clients on the rayon pool; results are identical either way
    pub parallel: bool,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            rounds: 100,
            seed: 0,
            aggregator: Aggregator::Sgca,
            parallel: true,
            output_dir: None,
        }
    }
}

/// A full experiment, read from a TOML document whose sections mirror the
/// fields below. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: RunSettings,
    pub model: ModelDims,
    pub backbone: BackboneConfig,
    pub client: ClientConfig,
    pub sgca: SgcaConfig,
    pub federation: FederationSpec,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Uses `seed` for the backbone, adapters, batching and the data.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.experiment.seed = seed;
        self.federation.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        if self.experiment.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        self.backbone.validate().map_err(cfg_err)?;
        self.model.validate().map_err(cfg_err)?;
        self.client.validate(self.model.blocks).map_err(cfg_err)?;
        self.sgca.validate().map_err(cfg_err)?;
        self.federation.validate().map_err(cfg_err)?;
        if self.federation.pixels() != self.model.feature_dim {
            return Err(Error::Config(format!(
                "feature_dim {} must equal mask_side^2 = {}",
                self.model.feature_dim,
                self.federation.pixels()
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            "[experiment]\nrounds = 5\naggregator = \"fedavg\"\n[client]\nbeta = 0.1\n[sgca]\nmetric = \"cosine\"\n",
        )
        .unwrap();
        assert_eq!(cfg.experiment.rounds, 5);
        assert_eq!(cfg.experiment.aggregator, Aggregator::Fedavg);
        assert_eq!(cfg.client.beta, 0.1);
        assert_eq!(cfg.client.batch_size, 32);
        assert_eq!(cfg.sgca.metric, crate::server::SimilarityMetric::Cosine);
    }

    #[test]
    fn rejects_unknown_keys_and_invalid_values() {
        for doc in [
            "[experiment]\nround = 5\n",
            "[client]\nlearning_rte = 0.1\n",
            "[bogus]\nx = 1\n",
            "[experiment]\nrounds = 0\n",
            "[client]\nlow_layers = 7\n",
            "[sgca]\nalpha = -1.0\n",
            "[model]\nfeature_dim = 64\nbottleneck_dim = 8\nblocks = 3\n",
        ] {
            assert!(
                matches!(ExperimentConfig::from_toml_str(doc), Err(Error::Config(_))),
                "accepted: {doc}"
            );
        }
    }
}
