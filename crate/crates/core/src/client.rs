//! Client side of a round: install the broadcast low-level adapters, train
//! every adapter locally for one pass, evaluate and package the upload.

use serde::{Deserialize, Serialize};

use crate::adapter_net::{objective_and_grad, sigmoid, AdamState, Batch, ToyFM};
use crate::datagen::{ClientDataset, Sample};
use crate::error::{Error, Result};
use crate::numerics::{streams, FlatParams, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub beta: f64,
    /// number of low-level adapter layers exchanged with the server
    pub low_layers: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            local_epochs: 1,
            beta: 0.01,
            low_layers: 1,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self, blocks: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.local_epochs == 0 {
            return Err(Error::invalid("batch_size and local_epochs must be positive"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.low_layers == 0 || self.low_layers > blocks {
            return Err(Error::invalid(format!(
                "low_layers must be in 1..={blocks}, got {}",
                self.low_layers
            )));
        }
        Ok(())
    }
}

/// What a client uploads after local training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub round: usize,
    /// adapter layers 1..=L
    pub low_params: FlatParams,
    pub n_i: usize,
    pub train_loss: f64,
    pub test_iou: f64,
    pub test_dice: f64,
}

/// Everything one client owns.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub model: ToyFM,
    pub adam: AdamState,
    pub dataset: ClientDataset,
    pub config: ClientConfig,
    /// seed for per-round batch order
    pub seed: u64,
    theta_ref: FlatParams,
}

impl ClientState {
    pub fn new(client_id: usize, model: ToyFM, dataset: ClientDataset, config: ClientConfig, seed: u64) -> Result<Self> {
        config.validate(model.dims().blocks)?;
        let theta_ref = model.low_params(config.low_layers)?;
        let adam = AdamState::new(model.adapter_params().len());
        Ok(ClientState {
            client_id,
            model,
            adam,
            dataset,
            config,
            seed,
            theta_ref,
        })
    }

    /// Reference vector for the cosine regularizer: the last installed
    /// broadcast.
    pub fn theta_ref(&self) -> &FlatParams {
        &self.theta_ref
    }

    /// Overwrites adapter layers `1..=L` with the broadcast and snapshots it
    /// as this round's regularization reference.
    pub fn install_low_adapters(&mut self, received: &FlatParams) -> Result<()> {
        if !received.same_manifest(&self.theta_ref) {
            return Err(Error::protocol(format!(
                "client {} expected adapter layers 1..={}, received {:?}",
                self.client_id,
                self.config.low_layers,
                received.manifest()
            )));
        }
        self.model.set_low_params(received)?;
        self.theta_ref = received.clone();
        Ok(())
    }

    /// One round of local training followed by evaluation.
    pub fn local_train_round(&mut self, round: usize) -> Result<ClientUpdate> {
        let train = &self.dataset.train;
        if train.is_empty() {
            return Err(Error::InvalidState(format!("client {} has no training data", self.client_id)));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = RngStream::new(self.seed, streams::batch_order(self.client_id, round));
        let mut params = self.model.adapter_params().into_values();
        let base = self.model.adapter_params();
        let (mut loss_sum, mut seen) = (0.0, 0usize);

        for _ in 0..self.config.local_epochs {
            rng.shuffle(&mut order);
            for chunk in order.chunks(self.config.batch_size) {
                let batch = batch_of(train, chunk)?;
                let og = objective_and_grad(&batch, &self.model, &self.theta_ref, self.config.beta)?;
                if !og.value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "client {} round {round}: objective is not finite",
                        self.client_id
                    )));
                }
                loss_sum += og.value * chunk.len() as f64;
                seen += chunk.len();
                self.adam.step(&mut params, og.grad.values(), self.config.learning_rate)?;
                let updated = base.with_values(params.clone()).map_err(|_| {
                    Error::Numeric(format!(
                        "client {} round {round}: adapter parameters diverged",
                        self.client_id
                    ))
                })?;
                self.model.set_adapter_params(&updated)?;
            }
        }

        let (test_iou, test_dice) = self.evaluate()?;
        Ok(ClientUpdate {
            client_id: self.client_id,
            round,
            low_params: self.model.low_params(self.config.low_layers)?,
            n_i: self.dataset.n_i,
            train_loss: loss_sum / seen as f64,
            test_iou,
            test_dice,
        })
    }

    /// Mean IoU and Dice over the test set, predictions thresholded at 0.5.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        evaluate_model(&self.model, &self.dataset.test)
    }
}

fn batch_of(samples: &[Sample], idx: &[usize]) -> Result<Batch> {
    Batch::new(
        idx.iter().map(|&i| samples[i].image.clone()).collect(),
        idx.iter().map(|&i| samples[i].mask.clone()).collect(),
    )
}

pub fn evaluate_model(model: &ToyFM, test: &[Sample]) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::InvalidState("empty test set".into()));
    }
    let (mut iou, mut dice) = (0.0, 0.0);
    for s in test {
        let pred: Vec<bool> = model.forward(&s.image)?.into_iter().map(|z| sigmoid(z) > 0.5).collect();
        let truth: Vec<bool> = s.mask.iter().map(|&v| v == 1.0).collect();
        let (i, d) = mask_metrics(&pred, &truth);
        iou += i;
        dice += d;
    }
    let n = test.len() as f64;
    Ok((iou / n, dice / n))
}

/// IoU and Dice of one binary prediction; both are 1 when prediction and
/// truth are empty.
pub fn mask_metrics(pred: &[bool], truth: &[bool]) -> (f64, f64) {
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    if p + g == 0 {
        return (1.0, 1.0);
    }
    let union = p + g - inter;
    (inter as f64 / union as f64, 2.0 * inter as f64 / (p + g) as f64)
}

/// Relative L2 shift per layer, `||after_k - before_k|| / ||before_k||`,
/// with 0/0 taken as 0.
pub fn measure_param_shift(before: &FlatParams, after: &FlatParams) -> Result<Vec<f64>> {
    before.ensure_same_manifest(after)?;
    Ok(before
        .layer_slices()
        .zip(after.layer_slices())
        .map(|((_, b), (_, a))| {
            let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let base = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if diff == 0.0 {
                0.0
            } else {
                diff / base
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter_net::{reg_loss, ModelDims};
    use crate::datagen::{generate_federation, FederationSpec};

    fn bools(s: &str) -> Vec<bool> {
        s.chars().map(|c| c == '1').collect()
    }

    #[test]
    fn metric_fixtures() {
        assert_eq!(mask_metrics(&bools("0110"), &bools("0110")), (1.0, 1.0));
        assert_eq!(mask_metrics(&bools("1100"), &bools("0011")), (0.0, 0.0));
        let (iou, dice) = mask_metrics(&bools("110000"), &bools("111100"));
        assert_eq!(iou, 0.5);
        assert!((dice - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(mask_metrics(&bools("0000"), &bools("0000")), (1.0, 1.0));
        assert_eq!(mask_metrics(&bools("0000"), &bools("0100")), (0.0, 0.0));
    }

    #[test]
    fn shift_fixtures() {
        let before = FlatParams::concat(vec![(1, vec![1.0, 2.0]), (2, vec![3.0, -4.0]), (3, vec![0.0])]).unwrap();
        assert_eq!(measure_param_shift(&before, &before).unwrap(), vec![0.0; 3]);
        let after = FlatParams::concat(vec![(1, vec![1.0, 2.0]), (2, vec![3.3, -4.4]), (3, vec![0.0])]).unwrap();
        let s = measure_param_shift(&before, &after).unwrap();
        assert!((s[1] - 0.1).abs() < 1e-12 && s[0] == 0.0 && s[2] == 0.0);
        let other = FlatParams::concat(vec![(1, vec![1.0, 2.0])]).unwrap();
        assert!(measure_param_shift(&before, &other).is_err());
    }

    fn small_client(id: usize, low_layers: usize) -> ClientState {
        let spec = FederationSpec {
            client_sizes: vec![20, 20, 20, 20],
            ..Default::default()
        };
        let data = generate_federation(&spec).unwrap();
        let dims = ModelDims {
            blocks: 3,
            feature_dim: 256,
            bottleneck_dim: 4,
        };
        let model = ToyFM::new(dims, 0, 0).unwrap();
        let cfg = ClientConfig {
            low_layers,
            batch_size: 8,
            ..Default::default()
        };
        ClientState::new(id, model, data[id].clone(), cfg, 0).unwrap()
    }

    #[test]
    fn install_is_isolated_and_snapshots() {
        let mut c = small_client(0, 1);
        let current = c.model.low_params(1).unwrap();
        let high_before = c.model.adapters()[1..].to_vec();
        c.install_low_adapters(&current).unwrap();
        assert_eq!(c.theta_ref(), &current);
        assert_eq!(c.model.low_params(1).unwrap(), current);
        let bumped = current.with_values(current.values().iter().map(|v| v * 2.0).collect()).unwrap();
        c.install_low_adapters(&bumped).unwrap();
        assert_eq!(c.model.adapters()[1..].to_vec(), high_before);
        let r = reg_loss(&c.model.low_params(1).unwrap(), c.theta_ref()).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
        let wrong = c.model.low_params(2).unwrap();
        assert!(matches!(c.install_low_adapters(&wrong), Err(Error::Protocol(_))));
    }

    #[test]
    fn training_keeps_snapshot_and_frozen_weights() {
        let mut c = small_client(1, 2);
        let broadcast = c.model.low_params(2).unwrap();
        c.install_low_adapters(&broadcast).unwrap();
        let fingerprint = c.model.frozen_fingerprint();
        let up = c.local_train_round(1).unwrap();
        assert_eq!(c.theta_ref(), &broadcast);
        assert_eq!(c.model.frozen_fingerprint(), fingerprint);
        assert_eq!(up.low_params.manifest().len(), 2);
        assert_eq!(up.low_params.max_layer(), Some(2));
        assert_ne!(up.low_params, broadcast);
        assert!((0.0..=1.0).contains(&up.test_iou) && up.test_dice >= up.test_iou);
    }

    #[test]
    fn identical_clients_produce_identical_updates() {
        let mut a = small_client(2, 1);
        let mut b = small_client(2, 1);
        assert_eq!(a.local_train_round(3).unwrap(), b.local_train_round(3).unwrap());
    }

    #[test]
    fn empty_sets_are_invalid_state() {
        let mut c = small_client(0, 1);
        c.dataset.train.clear();
        assert!(matches!(c.local_train_round(1), Err(Error::InvalidState(_))));
        c.dataset.test.clear();
        assert!(matches!(c.evaluate(), Err(Error::InvalidState(_))));
    }
}
