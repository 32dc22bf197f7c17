//! Federated fine-tuning of bottleneck adapters on a frozen backbone with
//! similarity-guided personalized aggregation.
//!
//! Clients train only their adapters on private non-IID segmentation data,
//! exchange just the lowest `L` adapter layers, and the server mixes the
//! uploads per client with weights from a simplex-constrained quadratic
//! program over pairwise parameter similarities.

pub mod adapter_net;
pub mod client;
pub mod datagen;
pub mod error;
pub mod numerics;
pub mod oracle;
pub mod orchestrator;
pub mod server;
pub mod transport;

pub use adapter_net::{AdamState, ModelDims, ToyFM};
pub use client::{ClientConfig, ClientState, ClientUpdate};
pub use datagen::{ClientDataset, FederationSpec, Sample};
pub use error::{Error, Result};
pub use numerics::{FlatParams, LayerSpan, RngStream};
pub use orchestrator::{run_experiment, Aggregator, ExperimentConfig, ResultsStore};
pub use server::{CollaborationMatrix, SgcaConfig, SimilarityMetric};
pub use transport::{CommLedger, WireMessage};
