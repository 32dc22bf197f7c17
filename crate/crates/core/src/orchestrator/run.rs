use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter_net::{Backbone, ToyFM};
use crate::client::{measure_param_shift, ClientState, ClientUpdate};
use crate::datagen::generate_federation;
use crate::error::{Error, Result};
use crate::numerics::FlatParams;
use crate::server::{aggregate, fedavg_aggregate, update_matrix, CollaborationMatrix};
use crate::transport::{communication_cost, CommLedger, Direction, WireMessage};

use super::config::{Aggregator, ExperimentConfig};
use super::store::{ResultsStore, RunManifest, Summary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundMetrics {
    pub client_id: usize,
    pub train_loss: f64,
    pub test_iou: f64,
    pub test_dice: f64,
}

/// Everything recorded for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<ClientRoundMetrics>,
    pub mean_train_loss: f64,
    pub mean_iou: f64,
    pub mean_dice: f64,
    /// collaboration matrix computed at the end of the round (SGCA only)
    pub w: Option<Vec<Vec<f64>>>,
    /// relative L2 shift of each adapter layer during local training,
    /// averaged over clients
    pub layer_shift: Vec<f64>,
    pub comm_total: u64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Builds the clients: one shared frozen backbone, identical adapter
/// initialization, per-client data.
pub fn build_clients(cfg: &ExperimentConfig) -> Result<Vec<ClientState>> {
    cfg.validate()?;
    let seed = cfg.experiment.seed;
    let data = generate_federation(&cfg.federation)?;
    let backbone = Arc::new(Backbone::generate(cfg.model, &cfg.backbone, seed)?);
    data.into_iter()
        .enumerate()
        .map(|(i, dataset)| {
            let model = ToyFM::with_backbone(Arc::clone(&backbone), cfg.model, seed)?;
            ClientState::new(i, model, dataset, cfg.client, seed)
        })
        .collect()
}

fn with_round(round: usize, e: Error) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("round {round}: {m}")),
        other => other,
    }
}

/// The federated round loop.
///
/// Round `r`: the server sends each client its mix of the previous uploads
/// (row `i` of the collaboration matrix, or the FedAvg mean), clients train
/// locally and upload their low-level adapters, and the server recomputes the
/// collaboration matrix. The matrix starts size-proportional, so round 1
/// coincides with FedAvg.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultsStore> {
    let mut clients = build_clients(cfg)?;
    let layers = cfg.client.low_layers;
    let sizes: Vec<usize> = clients.iter().map(|c| c.dataset.n_i).collect();
    let mut uploads: Vec<FlatParams> = clients
        .iter()
        .map(|c| c.model.low_params(layers))
        .collect::<Result<_>>()?;
    let mut w = CollaborationMatrix::size_proportional(&sizes)?;
    let mut ledger = CommLedger::new();
    let mut records = Vec::with_capacity(cfg.experiment.rounds);

    for round in 1..=cfg.experiment.rounds {
        let broadcasts = match cfg.experiment.aggregator {
            Aggregator::Sgca => aggregate(&w, &uploads)?,
            Aggregator::Fedavg => vec![fedavg_aggregate(&uploads, &sizes)?; clients.len()],
        };
        for (client, params) in clients.iter_mut().zip(&broadcasts) {
            let msg = WireMessage::new(Direction::Broadcast, client.client_id, round, params);
            ledger.record(&msg)?;
            client.install_low_adapters(&msg.open(layers)?)?;
        }

        let before: Vec<FlatParams> = clients.iter().map(|c| c.model.adapter_params()).collect();
        let train = |c: &mut ClientState| c.local_train_round(round);
        let updates: Vec<ClientUpdate> = if cfg.experiment.parallel {
            clients.par_iter_mut().map(train).collect::<Result<_>>()
        } else {
            clients.iter_mut().map(train).collect::<Result<_>>()
        }
        .map_err(|e| with_round(round, e))?;

        for (slot, update) in uploads.iter_mut().zip(&updates) {
            let msg = WireMessage::new(Direction::Upload, update.client_id, round, &update.low_params);
            ledger.record(&msg)?;
            *slot = msg.open(layers)?;
        }

        let mut layer_shift = vec![0.0; cfg.model.blocks];
        for (b, c) in before.iter().zip(&clients) {
            let shift = measure_param_shift(b, &c.model.adapter_params())?;
            layer_shift.iter_mut().zip(shift).for_each(|(acc, s)| *acc += s / clients.len() as f64);
        }

        let w_snapshot = match cfg.experiment.aggregator {
            Aggregator::Sgca => {
                w = update_matrix(&updates, &cfg.sgca)?;
                Some(w.rows.clone())
            }
            Aggregator::Fedavg => None,
        };

        let metrics: Vec<ClientRoundMetrics> = updates
            .iter()
            .map(|u| ClientRoundMetrics {
                client_id: u.client_id,
                train_loss: u.train_loss,
                test_iou: u.test_iou,
                test_dice: u.test_dice,
            })
            .collect();
        records.push(RoundRecord {
            round,
            mean_train_loss: mean(metrics.iter().map(|m| m.train_loss)),
            mean_iou: mean(metrics.iter().map(|m| m.test_iou)),
            mean_dice: mean(metrics.iter().map(|m| m.test_dice)),
            clients: metrics,
            w: w_snapshot,
            layer_shift,
            comm_total: ledger.total(),
        });
    }

    let last = records.last().expect("at least one round");
    let summary = Summary {
        rounds: cfg.experiment.rounds,
        final_mean_iou: last.mean_iou,
        final_mean_dice: last.mean_dice,
        final_mean_train_loss: last.mean_train_loss,
        comm_total: ledger.total(),
        expected_comm_total: communication_cost(
            cfg.experiment.rounds,
            clients.len(),
            &vec![cfg.model.adapter_len(); layers],
        ),
    };
    Ok(ResultsStore {
        manifest: RunManifest::new(cfg),
        records,
        summary,
        ledger,
    })
}
