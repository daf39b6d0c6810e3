//! Encoder, smoothing transform, prior and decoder assembled into the
//! trainable objective, plus the training loop.

mod config;
mod dvae;
mod network;
mod train;

pub use config::{LogZMethod, NegativePhaseKind, PriorKind, SamplerConfig, Schedule, VaeConfig};
pub use dvae::{Dvae, ElboBreakdown, ForwardPass};
pub use train::{evaluate_elbo, prior_log_z, train, EpochMetrics, TrainOptions};
