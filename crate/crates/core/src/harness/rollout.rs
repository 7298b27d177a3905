use rand::Rng;

use super::config::ExperimentConfig;
use super::learner::Learner;
use crate::agent::{act_batch, ppo_update, ActMode, PpoConfig, PpoStats, RolloutBuffer, Transition};
use crate::belief::{standard_normal, BeliefBatch, TrajectoryStep};
use crate::controllers::ClassicalController;
use crate::netsim::{Direction, IntersectionId, SimState};
use crate::worldmodel::{intrinsic_rewards, IntrinsicQuery, Trajectory};
use crate::{Error, Result, OBS_DIM};

/// Totals of one episode.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeSummary {
    pub avg_travel_time_s: f64,
    /// Sum of `w * q` over intersections and control steps.
    pub ext_reward: f64,
    pub int_reward: f64,
    /// Mean queue length over intersections and control steps.
    pub mean_queue: f64,
    pub ppo: Option<PpoStats>,
    pub ppo_updates: usize,
    /// Per-intersection trajectories (training only, latent variants only).
    pub trajectories: Vec<Trajectory>,
}

/// Learning state carried through a training episode.
pub struct TrainingHooks<'a, R: Rng> {
    pub buffers: &'a mut [RolloutBuffer],
    pub ppo: &'a PpoConfig,
    pub ppo_rng: &'a mut R,
    /// Prefix of the trajectory task labels.
    pub task: String,
    /// Largest buffer length seen right after an update; stays 0 when
    /// buffers are cleared properly.
    pub max_len_after_update: &'a mut usize,
}

fn to_obs(v: Vec<f64>) -> Result<[f64; OBS_DIM]> {
    let n = v.len();
    v.try_into().map_err(|_| Error::shape("observation", OBS_DIM, n))
}

fn observe_all(sim: &SimState) -> Result<Vec<[f64; OBS_DIM]>> {
    (0..sim.network().num_intersections())
        .map(|i| to_obs(sim.observe_normalized(IntersectionId(i))?))
        .collect()
}

fn merge_stats(acc: &mut Option<PpoStats>, s: PpoStats, count: usize) {
    let a = acc.get_or_insert_with(PpoStats::default);
    let w = 1.0 / count as f64;
    a.policy_loss += (s.policy_loss - a.policy_loss) * w;
    a.value_loss += (s.value_loss - a.value_loss) * w;
    a.entropy += (s.entropy - a.entropy) * w;
    a.samples += s.samples;
    a.steps += s.steps;
}

fn run_update<R: Rng>(
    learner: &mut Learner,
    hooks: &mut TrainingHooks<'_, R>,
    bootstrap: &[f64],
    summary: &mut EpisodeSummary,
) -> Result<()> {
    let stats = ppo_update(
        &mut learner.policy_store,
        &learner.policy,
        hooks.buffers,
        bootstrap,
        hooks.ppo,
        hooks.ppo_rng,
    )?;
    summary.ppo_updates += 1;
    merge_stats(&mut summary.ppo, stats, summary.ppo_updates);
    let longest = hooks.buffers.iter().map(RolloutBuffer::len).max().unwrap_or(0);
    *hooks.max_len_after_update = (*hooks.max_len_after_update).max(longest);
    Ok(())
}

/// Run `sim` to the horizon under `learner`. With `hooks` the policy is
/// updated whenever the rollout buffers fill and at the end of the episode,
/// intrinsic rewards are computed and trajectories are returned.
///
/// Latents are reparameterized samples while training or in `Sample` mode
/// and posterior means in `Greedy` mode.
pub fn run_learner_episode<R: Rng, H: Rng>(
    learner: &mut Learner,
    sim: &mut SimState,
    config: &ExperimentConfig,
    mode: ActMode,
    mut hooks: Option<TrainingHooks<'_, H>>,
    rng: &mut R,
) -> Result<EpisodeSummary> {
    let n = sim.network().num_intersections();
    let steps = config.steps_per_episode();
    let interval = config.control_interval_s;
    let latent_dim = learner.latent_dim();
    let reward_scale = config.hyperparameters.reward_scale;
    let terms = learner.variant.intrinsic_terms();
    let neighbors: Vec<Vec<(usize, Direction)>> = sim
        .network()
        .intersections
        .iter()
        .map(|node| {
            Direction::ALL
                .iter()
                .filter_map(|&d| node.neighbor(d).map(|j| (j.0, d)))
                .collect()
        })
        .collect();
    let names: Vec<String> = sim.network().intersections.iter().map(|x| x.name.clone()).collect();
    if let Some(h) = &hooks {
        if h.buffers.len() != n {
            return Err(Error::shape("rollout buffers", n, h.buffers.len()));
        }
    }
    let learning = hooks.is_some();
    let mut beliefs = learner.vae.as_ref().map(|v| BeliefBatch::new(&v.encoder, n));
    let mut traj: Vec<Vec<TrajectoryStep>> = vec![Vec::new(); if learning && beliefs.is_some() { n } else { 0 }];
    let mut summary = EpisodeSummary::default();
    let mut queue_sum = 0.0;
    let mut obs = observe_all(sim)?;

    for t in 0..steps {
        let (latents, mus, sigmas) = match (&learner.vae, &beliefs) {
            (Some(v), Some(b)) => {
                let noise = if learning || mode == ActMode::Sample {
                    standard_normal(rng, n * latent_dim)
                } else {
                    vec![0.0; n * latent_dim]
                };
                let bs = b.sample(&v.encoder, &v.store, &noise)?;
                let lat = bs.iter().map(|x| x.sample.clone()).collect::<Vec<_>>();
                let mu = bs.iter().map(|x| x.mu.clone()).collect::<Vec<_>>();
                let sg = bs.iter().map(|x| x.sigma.clone()).collect::<Vec<_>>();
                (lat, mu, sg)
            }
            _ => (vec![vec![0.0; latent_dim]; n], vec![Vec::new(); n], vec![Vec::new(); n]),
        };
        let inputs = obs
            .iter()
            .zip(&latents)
            .map(|(o, m)| learner.policy.input(o, m))
            .collect::<Result<Vec<_>>>()?;

        if let Some(h) = hooks.as_mut() {
            if h.buffers.iter().all(RolloutBuffer::is_full) {
                let bootstrap = learner.policy.values(&learner.policy_store, &inputs)?;
                run_update(learner, h, &bootstrap, &mut summary)?;
            }
        }

        let act_mode = if learning { ActMode::Sample } else { mode };
        let outs = act_batch(&learner.policy_store, &learner.policy, &inputs, act_mode, rng)?;
        let actions: Vec<usize> = outs.iter().map(|o| o.action).collect();
        sim.step_indices(&actions, interval)?;
        let next_obs = observe_all(sim)?;

        let mut ext = Vec::with_capacity(n);
        for i in 0..n {
            let q = sim.queue_length_with(IntersectionId(i), config.queue_mode)? as f64;
            queue_sum += q;
            ext.push(config.reward_weight * q);
        }
        summary.ext_reward += ext.iter().sum::<f64>();

        let int = match (&learner.vae, learning && terms.any()) {
            (Some(v), true) => {
                let dec = v
                    .decoders
                    .as_ref()
                    .ok_or_else(|| Error::Config("intrinsic reward requires decoders".into()))?;
                let nbr_actions: Vec<Vec<(usize, Direction)>> = neighbors
                    .iter()
                    .map(|ns| ns.iter().map(|&(j, d)| (actions[j], d)).collect())
                    .collect();
                let queries: Vec<IntrinsicQuery<'_>> = (0..n)
                    .map(|i| IntrinsicQuery {
                        obs: &obs[i],
                        action: actions[i],
                        neighbors: &nbr_actions[i],
                        latent: &latents[i],
                        next_obs: &next_obs[i],
                    })
                    .collect();
                intrinsic_rewards(&v.store, dec, &queries, terms)?
            }
            _ => vec![0.0; n],
        };
        summary.int_reward += int.iter().sum::<f64>();

        let done = t + 1 == steps;
        let step_records: Vec<TrajectoryStep> = (0..n)
            .map(|i| {
                let mut neighbor_actions = [None; 4];
                for &(j, d) in &neighbors[i] {
                    neighbor_actions[d.index()] = Some(actions[j]);
                }
                TrajectoryStep {
                    obs: obs[i],
                    action: actions[i],
                    reward: ext[i] / reward_scale,
                    neighbor_actions,
                    next_obs: next_obs[i],
                }
            })
            .collect();
        if let Some(h) = hooks.as_mut() {
            for (i, out) in outs.into_iter().enumerate() {
                h.buffers[i].push(Transition {
                    input: inputs[i].clone(),
                    action: out.action,
                    log_prob: out.log_prob,
                    value: out.value,
                    ext_reward: ext[i],
                    int_reward: int[i],
                    done,
                    mu: mus[i].clone(),
                    sigma: sigmas[i].clone(),
                });
            }
        }
        if let (Some(v), Some(b)) = (&learner.vae, beliefs.as_mut()) {
            let refs: Vec<&TrajectoryStep> = step_records.iter().collect();
            b.advance(&v.encoder, &v.store, &refs)?;
        }
        if !traj.is_empty() {
            for (i, s) in step_records.into_iter().enumerate() {
                traj[i].push(s);
            }
        }
        obs = next_obs;
    }

    if let Some(h) = hooks.as_mut() {
        if h.buffers.iter().any(|b| !b.is_empty()) {
            run_update(learner, h, &vec![0.0; n], &mut summary)?;
        }
        summary.trajectories = traj
            .into_iter()
            .zip(&names)
            .map(|(steps, name)| Trajectory {
                task: format!("{}/{name}", h.task),
                steps,
            })
            .collect();
    }
    summary.avg_travel_time_s = sim.average_travel_time()?;
    summary.mean_queue = queue_sum / (steps * n).max(1) as f64;
    Ok(summary)
}

/// Run `sim` to the horizon under a classical controller.
pub fn run_classical_episode(
    controller: &mut ClassicalController,
    sim: &mut SimState,
    config: &ExperimentConfig,
) -> Result<EpisodeSummary> {
    let n = sim.network().num_intersections();
    let steps = config.steps_per_episode();
    let mut summary = EpisodeSummary::default();
    let mut queue_sum = 0.0;
    for _ in 0..steps {
        let phases = controller.decide(sim, config.control_interval_s)?;
        sim.step(&phases, config.control_interval_s)?;
        for i in 0..n {
            let q = sim.queue_length_with(IntersectionId(i), config.queue_mode)? as f64;
            queue_sum += q;
            summary.ext_reward += config.reward_weight * q;
        }
    }
    summary.avg_travel_time_s = sim.average_travel_time()?;
    summary.mean_queue = queue_sum / (steps * n).max(1) as f64;
    Ok(summary)
}

/// A trained checkpoint driving a simulator step by step, as deployed:
/// encoder and policy only, greedy actions from the posterior-mean latent.
pub struct DeployedPolicy {
    learner: Learner,
    beliefs: Option<BeliefBatch>,
    reward_weight: f64,
    reward_scale: f64,
    queue_mode: crate::netsim::QueueMode,
}

impl DeployedPolicy {
    pub fn new(learner: Learner, config: &ExperimentConfig) -> Self {
        DeployedPolicy {
            learner,
            beliefs: None,
            reward_weight: config.reward_weight,
            reward_scale: config.hyperparameters.reward_scale,
            queue_mode: config.queue_mode,
        }
    }

    pub fn learner(&self) -> &Learner {
        &self.learner
    }

    /// Forget the episode so far; the next step starts from the prior belief.
    pub fn reset(&mut self) {
        self.beliefs = None;
    }

    /// Choose phases for every intersection, advance `sim` by `interval_s`
    /// and fold the outcome into the beliefs. Returns the chosen phases.
    pub fn step(&mut self, sim: &mut SimState, interval_s: u32) -> Result<Vec<usize>> {
        let n = sim.network().num_intersections();
        let latent_dim = self.learner.latent_dim();
        if let (Some(v), None) = (&self.learner.vae, &self.beliefs) {
            self.beliefs = Some(BeliefBatch::new(&v.encoder, n));
        }
        if let Some(b) = &self.beliefs {
            if b.agents() != n {
                return Err(Error::shape("deployed beliefs", b.agents(), n));
            }
        }
        let obs = observe_all(sim)?;
        let latents: Vec<Vec<f64>> = match (&self.learner.vae, &self.beliefs) {
            (Some(v), Some(b)) => b
                .sample(&v.encoder, &v.store, &vec![0.0; n * latent_dim])?
                .into_iter()
                .map(|x| x.sample)
                .collect(),
            _ => vec![vec![0.0; latent_dim]; n],
        };
        let inputs = obs
            .iter()
            .zip(&latents)
            .map(|(o, m)| self.learner.policy.input(o, m))
            .collect::<Result<Vec<_>>>()?;
        let (logits, _) = self.learner.policy.evaluate(&self.learner.policy_store, &inputs)?;
        let actions: Vec<usize> = (0..n).map(|i| crate::diffnet::argmax(logits.row_slice(i))).collect();
        sim.step_indices(&actions, interval_s)?;
        if let (Some(v), Some(b)) = (&self.learner.vae, self.beliefs.as_mut()) {
            let next = observe_all(sim)?;
            let mut steps = Vec::with_capacity(n);
            for i in 0..n {
                let q = sim.queue_length_with(IntersectionId(i), self.queue_mode)? as f64;
                steps.push(TrajectoryStep {
                    obs: obs[i],
                    action: actions[i],
                    reward: self.reward_weight * q / self.reward_scale,
                    neighbor_actions: [None; 4],
                    next_obs: next[i],
                });
            }
            let refs: Vec<&TrajectoryStep> = steps.iter().collect();
            b.advance(&v.encoder, &v.store, &refs)?;
        }
        Ok(actions)
    }
}
