use std::time::Instant;

use super::config::{ExperimentConfig, Variant};
use super::metrics::MetricsRecord;
use super::rollout::run_classical_episode;
use super::train::mean_travel_time;
use crate::controllers::{ClassicalController, ControllerKind, ControllerSpec};
use crate::netsim::SimState;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalReport {
    pub kind: ControllerKind,
    /// One row per seed, in config order.
    pub records: Vec<MetricsRecord>,
    pub mean_travel_time_s: f64,
}

/// Run a classical controller once per seed of `config`.
pub fn run_classical(config: &ExperimentConfig, kind: ControllerKind) -> Result<ClassicalReport> {
    config.validate()?;
    let network = config.network()?;
    let mut records = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let started = Instant::now();
        let schedule = config.schedule(&network, seed)?;
        if schedule.is_empty() {
            return Err(Error::NoVehicles);
        }
        let mut sim = SimState::reset(network.clone(), schedule, seed);
        let mut controller = ClassicalController::new(ControllerSpec::new(kind, seed))?;
        let s = run_classical_episode(&mut controller, &mut sim, config)?;
        records.push(MetricsRecord {
            iteration: 0,
            seed,
            avg_travel_time_s: s.avg_travel_time_s,
            ext_reward: s.ext_reward,
            int_reward: 0.0,
            mean_queue: s.mean_queue,
            elbo_loss: None,
            policy_loss: None,
            value_loss: None,
            entropy: None,
            wall_s: started.elapsed().as_secs_f64(),
        });
    }
    Ok(ClassicalReport {
        kind,
        mean_travel_time_s: mean_travel_time(&records)?,
        records,
    })
}

/// `run_classical` for a config whose variant names the controller.
pub fn run_configured_classical(config: &ExperimentConfig) -> Result<ClassicalReport> {
    match config.variant {
        Variant::Classical(kind) => run_classical(config, kind),
        v => Err(Error::Config(format!("variant `{v}` is not a classical controller"))),
    }
}
