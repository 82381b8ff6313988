//! Federated training of a dense QoT classifier.
//!
//! - [`nn`]: the network, its gradient and the parameter blob format.
//! - [`fedavg`]: local updates, weighted aggregation, the round loop and the
//!   centralized baseline.
//! - [`qot`]: the synthetic lightpath dataset, encoding and CSV files.
//!
//! The `parallel` feature (on by default) runs per-contributor updates and
//! per-chunk gradient work on rayon; without it everything runs on the calling
//! thread and produces the same bits.

pub mod dataset;
pub mod error;
pub mod exec;
pub mod fedavg;
pub mod nn;
pub mod qot;
pub mod rng;

pub use dataset::{Dataset, Encoding};
pub use error::{Error, Result};
pub use fedavg::{
    aggregate, centralized_train, close_round, ecn_update, run_training, EcnDescriptor, Hyperparams,
    LocalUpdate, RoundMetrics, RoundState, TrainingOutcome, Weighting,
};
pub use nn::{
    deserialize_params, deserialize_params_any, evaluate_accuracy, forward, init_params, loss_and_grad, serialize_params, sgd_step,
    Batch, Gradient, ModelSpec, ParameterVector,
};
pub use qot::{FeatureSchema, LightpathSample, Modulation, NormStats, QotRecord};
