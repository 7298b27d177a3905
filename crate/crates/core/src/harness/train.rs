use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, FlowSpec};
use super::learner::Learner;
use super::metrics::MetricsRecord;
use super::rollout::{run_learner_episode, TrainingHooks};
use crate::agent::{ActMode, RolloutBuffer};
use crate::diffnet::Checkpoint;
use crate::netsim::SimState;
use crate::worldmodel::{vae_update, ElboStats, VaeBuffer};
use crate::{Error, Result};

const STREAM_INIT: u64 = 0;
const STREAM_ROLLOUT: u64 = 1;
const STREAM_PPO: u64 = 2;
const STREAM_VAE: u64 = 3;
const STREAM_EVAL: u64 = 4;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Buffer bookkeeping observed during training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BufferAudit {
    /// Longest any rollout buffer ever grew.
    pub max_rollout_len: usize,
    /// Longest any rollout buffer was right after an update.
    pub max_len_after_update: usize,
    pub ppo_updates: usize,
    pub trajectories_pushed: u64,
    pub trajectory_buffer_len: usize,
    pub trajectory_buffer_capacity: usize,
    /// Task labels of the retained trajectories, oldest first.
    pub retained_tasks: Vec<String>,
}

/// Greedy evaluation of the final parameters on the training scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalEval {
    pub seed: u64,
    pub avg_travel_time_s: f64,
}

pub struct TrainOutcome {
    pub learner: Learner,
    pub metrics: Vec<MetricsRecord>,
    pub audit: BufferAudit,
    pub final_eval: FinalEval,
}

impl TrainOutcome {
    pub fn checkpoint(&self, config: &ExperimentConfig, seed: u64) -> Result<Checkpoint> {
        self.learner.to_checkpoint(serde_json::json!({
            "train_seed": seed,
            "iterations": self.metrics.len(),
            "flow": config.flow.to_string(),
            "final_eval": self.final_eval,
        }))
    }
}

/// Meta-train `config.variant` for `config.iterations` episodes on the
/// training scenario built with `seed`. `on_record` sees each metrics row
/// as soon as its episode finishes.
pub fn meta_train(
    config: &ExperimentConfig,
    seed: u64,
    mut on_record: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let hyper = &config.hyperparameters;
    let mut learner = Learner::new(config.variant, hyper, stream(seed, STREAM_INIT).random())?;
    let network = config.network()?;
    let schedule = config.schedule(&network, seed)?;
    let n = network.num_intersections();
    let ppo_cfg = hyper.ppo();
    let vae_cfg = hyper.vae();
    let mut buffers = (0..n)
        .map(|_| RolloutBuffer::new(hyper.policy_buffer_size))
        .collect::<Result<Vec<_>>>()?;
    let mut vae_buffer = VaeBuffer::new(hyper.mvae_buffer_size)?;
    let mut rollout_rng = stream(seed, STREAM_ROLLOUT);
    let mut ppo_rng = stream(seed, STREAM_PPO);
    let mut vae_rng = stream(seed, STREAM_VAE);
    let mut audit = BufferAudit {
        trajectory_buffer_capacity: vae_buffer.capacity(),
        ..BufferAudit::default()
    };
    let mut metrics = Vec::with_capacity(config.iterations);

    for k in 0..config.iterations {
        let started = Instant::now();
        let mut sim = SimState::reset(network.clone(), schedule.clone(), seed);
        let mut max_after = 0;
        let summary = run_learner_episode(
            &mut learner,
            &mut sim,
            config,
            ActMode::Sample,
            Some(TrainingHooks {
                buffers: &mut buffers,
                ppo: &ppo_cfg,
                ppo_rng: &mut ppo_rng,
                task: format!("{}/seed{seed}/iter{k}", config.flow),
                max_len_after_update: &mut max_after,
            }),
            &mut rollout_rng,
        )?;
        audit.max_len_after_update = audit.max_len_after_update.max(max_after);
        audit.max_rollout_len = audit.max_rollout_len.max(buffers.iter().map(|b| b.max_len_seen()).max().unwrap_or(0));
        audit.ppo_updates += summary.ppo_updates;

        let mut elbo: Option<ElboStats> = None;
        if let Some(vae) = learner.vae.as_mut() {
            for t in summary.trajectories {
                vae_buffer.push(t);
            }
            let dec = vae
                .decoders
                .as_ref()
                .ok_or_else(|| Error::Config("training requires decoders".into()))?;
            for u in 0..hyper.mvae_updates_per_iteration {
                let s = vae_update(&mut vae.store, &vae.encoder, dec, &vae_buffer, &vae_cfg, &mut vae_rng)?;
                let acc = elbo.get_or_insert_with(ElboStats::default);
                acc.loss += (s.loss - acc.loss) / (u + 1) as f64;
            }
        }

        let ppo = summary.ppo.unwrap_or_default();
        let has_ppo = summary.ppo.is_some();
        let record = MetricsRecord {
            iteration: k,
            seed,
            avg_travel_time_s: summary.avg_travel_time_s,
            ext_reward: summary.ext_reward,
            int_reward: summary.int_reward,
            mean_queue: summary.mean_queue,
            elbo_loss: elbo.map(|e| e.loss),
            policy_loss: has_ppo.then_some(ppo.policy_loss),
            value_loss: has_ppo.then_some(ppo.value_loss),
            entropy: has_ppo.then_some(ppo.entropy),
            wall_s: started.elapsed().as_secs_f64(),
        };
        for (name, v) in [
            ("travel time", Some(record.avg_travel_time_s)),
            ("intrinsic reward", Some(record.int_reward)),
            ("ELBO loss", record.elbo_loss),
            ("policy loss", record.policy_loss),
            ("value loss", record.value_loss),
        ] {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("{name} at iteration {k} (seed {seed}): {v}")));
                }
            }
        }
        on_record(&record)?;
        metrics.push(record);
    }

    audit.trajectories_pushed = vae_buffer.pushed();
    audit.trajectory_buffer_len = vae_buffer.len();
    audit.retained_tasks = vae_buffer.iter().map(|t| t.task.clone()).collect();

    let final_eval = FinalEval {
        seed,
        avg_travel_time_s: evaluate_seed(&learner, config, &config.flow, seed)?.avg_travel_time_s,
    };
    Ok(TrainOutcome {
        learner,
        metrics,
        audit,
        final_eval,
    })
}

/// One evaluation episode without any parameter update.
pub fn evaluate_seed(learner: &Learner, config: &ExperimentConfig, flow: &FlowSpec, seed: u64) -> Result<MetricsRecord> {
    let started = Instant::now();
    let network = config.network()?;
    let schedule = config.schedule_for(flow, &network, seed)?;
    let mut sim = SimState::reset(network, schedule, seed);
    let mut rng = stream(seed, STREAM_EVAL);
    let mut frozen = learner.clone();
    let summary = run_learner_episode::<_, ChaCha8Rng>(&mut frozen, &mut sim, config, config.eval_mode, None, &mut rng)?;
    Ok(MetricsRecord {
        iteration: 0,
        seed,
        avg_travel_time_s: summary.avg_travel_time_s,
        ext_reward: summary.ext_reward,
        int_reward: 0.0,
        mean_queue: summary.mean_queue,
        elbo_loss: None,
        policy_loss: None,
        value_loss: None,
        entropy: None,
        wall_s: started.elapsed().as_secs_f64(),
    })
}

/// Roll out the checkpoint's encoder and policy on every seed of the
/// config's scenario, without updating anything.
pub fn meta_test(ckpt: &Checkpoint, config: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    config.validate()?;
    let learner = Learner::from_checkpoint(ckpt)?;
    config
        .seeds
        .iter()
        .map(|&seed| evaluate_seed(&learner, config, &config.flow, seed))
        .collect()
}

pub fn mean_travel_time(records: &[MetricsRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("metrics records"));
    }
    Ok(records.iter().map(|r| r.avg_travel_time_s).sum::<f64>() / records.len() as f64)
}
