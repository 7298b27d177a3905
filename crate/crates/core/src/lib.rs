//! Decentralized traffic-signal control laboratory.
//!
//! The crate bundles a deterministic lane-queue traffic simulator, synthetic
//! and replayed demand, classical signal controllers, a small reverse-mode
//! differentiation core, and the learning stack built on it: a recurrent
//! variational task encoder, a four-head world model whose prediction gaps
//! form a neighbour-invariance intrinsic reward, and a latent-conditioned PPO
//! policy. The [`harness`] module ties these together into meta-training,
//! meta-test transfer, ablations and classical baselines.

pub mod agent;
pub mod belief;
pub mod controllers;
pub mod demand;
pub mod diffnet;
pub mod error;
pub mod harness;
pub mod netsim;
pub mod worldmodel;

pub use error::{Error, Result};

/// Number of signal phases at every intersection.
pub const NUM_PHASES: usize = 4;
/// Incoming lanes per 4-way intersection.
pub const LANES_PER_INTERSECTION: usize = 12;
/// Observation width: 12 lane counts followed by a 4-way phase one-hot.
pub const OBS_DIM: usize = LANES_PER_INTERSECTION + NUM_PHASES;
