//! Meta-training, meta-test transfer, ablations and classical baselines.
//!
//! One training iteration runs a single joint simulator episode in which
//! every intersection keeps its own belief and rollout buffer, then updates
//! the shared policy with PPO and the encoder/decoders with the ELBO.

mod ablation;
mod baseline;
mod config;
mod gradcheck;
mod learner;
mod metrics;
mod plot;
mod rollout;
mod train;

pub use ablation::*;
pub use baseline::*;
pub use config::*;
pub use gradcheck::*;
pub use learner::*;
pub use metrics::*;
pub use plot::*;
pub use rollout::*;
pub use train::*;
