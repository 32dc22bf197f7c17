#![allow(dead_code)]

use fedsca_core::{Aggregator, ExperimentConfig};

/// A small federation that runs a round in a few milliseconds.
pub fn small_config(seed: u64, rounds: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default().with_seed(seed);
    cfg.experiment.rounds = rounds;
    cfg.model.blocks = 3;
    cfg.model.feature_dim = 64;
    cfg.model.bottleneck_dim = 4;
    cfg.backbone.pretrain_samples = 256;
    cfg.federation.mask_side = 8;
    cfg.federation.client_sizes = vec![20, 10, 16, 24];
    for c in &mut cfg.federation.clusters {
        c.radius = [1.0, 2.0];
        c.offset = [c.offset[0].signum(), c.offset[1].signum()];
    }
    cfg.client.batch_size = 8;
    cfg.client.learning_rate = 1e-3;
    cfg
}

pub fn with_aggregator(mut cfg: ExperimentConfig, aggregator: Aggregator, low_layers: usize) -> ExperimentConfig {
    cfg.experiment.aggregator = aggregator;
    cfg.client.low_layers = low_layers;
    cfg
}
