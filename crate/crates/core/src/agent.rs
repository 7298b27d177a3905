//! Latent-conditioned actor-critic policy shared by every intersection,
//! with generalized advantage estimation and clipped PPO updates.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{argmax, softmax, Activation, AdamConfig, Mlp, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result, NUM_PHASES, OBS_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub latent: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            hidden: vec![32, 32],
            latent: 5,
        }
    }
}

impl PolicyConfig {
    pub fn input_dim(&self) -> usize {
        OBS_DIM + self.latent
    }
}

/// Separate Tanh MLPs for the phase logits and the state value, both fed
/// `[o, m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub actor: Mlp,
    pub critic: Mlp,
    pub config: PolicyConfig,
}

impl Policy {
    pub const ACTOR_PREFIX: &'static str = "actor.";
    pub const CRITIC_PREFIX: &'static str = "critic.";

    /// Fresh parameters; the actor's output layer starts at zero so the
    /// initial policy is uniform over phases.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: PolicyConfig, rng: &mut R) -> Result<Self> {
        let n = config.input_dim();
        let actor = Mlp::new(store, "actor", n, &config.hidden, NUM_PHASES, Activation::Tanh, rng)?;
        let out = actor.output_layer().clone();
        store.value_mut(out.weight).fill(0.0);
        let critic = Mlp::new(store, "critic", n, &config.hidden, 1, Activation::Tanh, rng)?;
        Ok(Policy { actor, critic, config })
    }

    pub fn bind(store: &ParamStore, config: PolicyConfig) -> Result<Self> {
        let n = config.input_dim();
        Ok(Policy {
            actor: Mlp::bind(store, "actor", n, &config.hidden, NUM_PHASES, Activation::Tanh)?,
            critic: Mlp::bind(store, "critic", n, &config.hidden, 1, Activation::Tanh)?,
            config,
        })
    }

    /// `[o, m]` as one input row.
    pub fn input(&self, obs: &[f64], latent: &[f64]) -> Result<Vec<f64>> {
        if obs.len() != OBS_DIM {
            return Err(Error::shape("policy obs", OBS_DIM, obs.len()));
        }
        if latent.len() != self.config.latent {
            return Err(Error::shape("policy latent", self.config.latent, latent.len()));
        }
        let mut row = Vec::with_capacity(self.config.input_dim());
        row.extend_from_slice(obs);
        row.extend_from_slice(latent);
        Ok(row)
    }

    fn batch(&self, tape: &mut Tape<'_>, inputs: &[Vec<f64>]) -> Result<Var> {
        let width = self.config.input_dim();
        if let Some(bad) = inputs.iter().find(|r| r.len() != width) {
            return Err(Error::shape("policy input", width, bad.len()));
        }
        let data = inputs.iter().flatten().copied().collect();
        Ok(tape.input(Tensor::from_vec(inputs.len(), width, data)?))
    }

    /// Logits and values for a batch of input rows.
    pub fn evaluate(&self, store: &ParamStore, inputs: &[Vec<f64>]) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new(store);
        let x = self.batch(&mut tape, inputs)?;
        let logits = self.actor.forward(&mut tape, x)?;
        let values = self.critic.forward(&mut tape, x)?;
        let logits = tape.value(logits).clone();
        if !logits.is_finite() {
            return Err(Error::NonFinite("policy logits".into()));
        }
        Ok((logits, tape.value(values).data().to_vec()))
    }

    pub fn values(&self, store: &ParamStore, inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut tape = Tape::new(store);
        let x = self.batch(&mut tape, inputs)?;
        let v = self.critic.forward(&mut tape, x)?;
        Ok(tape.value(v).data().to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    Sample,
    #[default]
    Greedy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActOutput {
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub probs: Vec<f64>,
}

/// Choose a phase for each input row.
pub fn act_batch(
    store: &ParamStore,
    policy: &Policy,
    inputs: &[Vec<f64>],
    mode: ActMode,
    rng: &mut impl Rng,
) -> Result<Vec<ActOutput>> {
    let (logits, values) = policy.evaluate(store, inputs)?;
    Ok((0..inputs.len())
        .map(|i| {
            let row = logits.row_slice(i);
            let probs = softmax(row);
            let action = match mode {
                ActMode::Greedy => argmax(row),
                ActMode::Sample => sample_categorical(&probs, rng),
            };
            ActOutput {
                action,
                log_prob: probs[action].ln(),
                value: values[i],
                probs,
            }
        })
        .collect())
}

pub fn act(
    store: &ParamStore,
    policy: &Policy,
    obs: &[f64],
    latent: &[f64],
    mode: ActMode,
    rng: &mut impl Rng,
) -> Result<ActOutput> {
    let input = policy.input(obs, latent)?;
    Ok(act_batch(store, policy, &[input], mode, rng)?.remove(0))
}

fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

/// One on-policy sample of one intersection.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// Policy input `[o, m]`.
    pub input: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    /// Extrinsic reward `w * q`, unscaled.
    pub ext_reward: f64,
    pub int_reward: f64,
    pub done: bool,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// The most recent transitions of one intersection since the last update.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer {
    capacity: usize,
    items: Vec<Transition>,
    consumed: bool,
    max_seen: usize,
}

impl RolloutBuffer {
    pub const DEFAULT_CAPACITY: usize = 60;

    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("rollout buffer capacity must be positive".into()));
        }
        Ok(RolloutBuffer {
            capacity,
            items: Vec::with_capacity(capacity),
            consumed: false,
            max_seen: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.items.len() == self.capacity
    }

    /// Largest length the buffer has ever reached.
    pub fn max_len_seen(&self) -> usize {
        self.max_seen
    }

    /// Append; when full the oldest transition is dropped.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.remove(0);
        }
        self.items.push(t);
        self.consumed = false;
        self.max_seen = self.max_seen.max(self.items.len());
    }

    pub fn items(&self) -> &[Transition] {
        &self.items
    }

    /// Take the contents for an update, leaving the buffer empty and marked
    /// as consumed until new data arrives.
    pub fn drain_for_update(&mut self) -> Result<Vec<Transition>> {
        if self.consumed {
            return Err(Error::StaleBuffer);
        }
        if self.items.is_empty() {
            return Err(Error::Empty("rollout buffer"));
        }
        self.consumed = true;
        Ok(std::mem::take(&mut self.items))
    }
}

/// Generalized advantage estimates and returns. `dones[t]` marks that no
/// value is bootstrapped after step `t`; `bootstrap` is the value after the
/// last step.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if n == 0 {
        return Err(Error::Empty("advantage input"));
    }
    if values.len() != n || dones.len() != n {
        return Err(Error::shape("gae inputs", n, values.len().min(dones.len())));
    }
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut running = 0.0;
    for t in (0..n).rev() {
        let mask = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * mask - values[t];
        running = delta + gamma * lambda * mask * running;
        adv[t] = running;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shift and scale to zero mean and unit variance.
pub fn normalize(values: &mut [f64]) {
    let n = values.len() as f64;
    if n < 2.0 {
        return;
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for v in values {
        *v = (*v - mean) / std;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    /// Weight of the intrinsic reward in the shaped reward.
    pub alpha: f64,
    /// Extrinsic rewards are divided by this before shaping.
    pub reward_scale: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub eps: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.95,
            lambda: 0.95,
            alpha: 0.1,
            reward_scale: 50.0,
            epochs: 4,
            minibatch: 16,
            clip: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            lr: 7e-4,
            eps: 1e-5,
        }
    }
}

/// A transition with its advantage and return, ready for the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoSample {
    pub input: Vec<f64>,
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct PpoVars {
    pub loss: Var,
    pub policy_loss: Var,
    pub value_loss: Var,
    pub entropy: Var,
}

/// Clipped surrogate, value and entropy terms averaged over `batch`:
/// `-min(ratio A, clip(ratio) A) + c_v (V - R)^2 - c_e H`.
pub fn ppo_loss_tape(
    tape: &mut Tape<'_>,
    policy: &Policy,
    batch: &[PpoSample],
    config: &PpoConfig,
) -> Result<PpoVars> {
    if batch.is_empty() {
        return Err(Error::Empty("PPO minibatch"));
    }
    let n = batch.len();
    let col = |f: &dyn Fn(&PpoSample) -> f64| Tensor::from_vec(n, 1, batch.iter().map(f).collect());
    let inputs: Vec<Vec<f64>> = batch.iter().map(|s| s.input.clone()).collect();
    let x = policy.batch(tape, &inputs)?;
    let logits = policy.actor.forward(tape, x)?;
    let logp_all = tape.log_softmax(logits);
    let logp = tape.pick(logp_all, batch.iter().map(|s| s.action).collect())?;
    let old = tape.input(col(&|s| s.old_log_prob)?);
    let log_ratio = tape.sub(logp, old)?;
    let ratio = tape.exp(log_ratio);
    let adv = tape.input(col(&|s| s.advantage)?);
    let surr1 = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, 1.0 - config.clip, 1.0 + config.clip);
    let surr2 = tape.mul(clipped, adv)?;
    let surr = tape.min(surr1, surr2)?;
    let surr = tape.mean(surr);
    let policy_loss = tape.scale(surr, -1.0);

    let v = policy.critic.forward(tape, x)?;
    let ret = tape.input(col(&|s| s.ret)?);
    let dv = tape.sub(v, ret)?;
    let sq = tape.square(dv);
    let value_loss = tape.mean(sq);

    let p = tape.exp(logp_all);
    let plogp = tape.mul(p, logp_all)?;
    let s = tape.sum(plogp);
    let entropy = tape.scale(s, -1.0 / n as f64);

    let vl = tape.scale(value_loss, config.value_coef);
    let el = tape.scale(entropy, -config.entropy_coef);
    let loss = tape.add(policy_loss, vl)?;
    let loss = tape.add(loss, el)?;
    Ok(PpoVars {
        loss,
        policy_loss,
        value_loss,
        entropy,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub samples: usize,
    pub steps: usize,
}

/// Turn per-intersection transition segments into samples with normalized
/// advantages. `bootstrap[i]` is the value estimate after segment `i`.
pub fn prepare_samples(segments: &[Vec<Transition>], bootstrap: &[f64], config: &PpoConfig) -> Result<Vec<PpoSample>> {
    if segments.len() != bootstrap.len() {
        return Err(Error::shape("bootstrap values", segments.len(), bootstrap.len()));
    }
    let mut samples = Vec::new();
    for (seg, &boot) in segments.iter().zip(bootstrap) {
        let rewards: Vec<f64> = seg
            .iter()
            .map(|t| t.ext_reward / config.reward_scale + config.alpha * t.int_reward)
            .collect();
        let values: Vec<f64> = seg.iter().map(|t| t.value).collect();
        let dones: Vec<bool> = seg.iter().map(|t| t.done).collect();
        let (adv, ret) = gae(&rewards, &values, &dones, boot, config.gamma, config.lambda)?;
        for ((t, a), r) in seg.iter().zip(adv).zip(ret) {
            samples.push(PpoSample {
                input: t.input.clone(),
                action: t.action,
                old_log_prob: t.log_prob,
                advantage: a,
                ret: r,
            });
        }
    }
    let mut adv: Vec<f64> = samples.iter().map(|s| s.advantage).collect();
    normalize(&mut adv);
    for (s, a) in samples.iter_mut().zip(adv) {
        s.advantage = a;
    }
    Ok(samples)
}

/// PPO epochs over shuffled minibatches of `samples`.
pub fn ppo_optimize(
    store: &mut ParamStore,
    policy: &Policy,
    samples: &[PpoSample],
    config: &PpoConfig,
    rng: &mut impl Rng,
) -> Result<PpoStats> {
    if samples.is_empty() {
        return Err(Error::Empty("PPO samples"));
    }
    let adam = AdamConfig::new(config.lr, config.eps);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut stats = PpoStats {
        samples: samples.len(),
        ..PpoStats::default()
    };
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.minibatch.max(1)) {
            let batch: Vec<PpoSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let (grads, pl, vl, ent) = {
                let mut tape = Tape::new(store);
                let v = ppo_loss_tape(&mut tape, policy, &batch, config)?;
                let loss = tape.value(v.loss).item();
                if !loss.is_finite() {
                    return Err(Error::NonFinite("PPO loss".into()));
                }
                (
                    tape.backward(v.loss)?,
                    tape.value(v.policy_loss).item(),
                    tape.value(v.value_loss).item(),
                    tape.value(v.entropy).item(),
                )
            };
            store.adam_step(&grads, &adam)?;
            stats.policy_loss += pl;
            stats.value_loss += vl;
            stats.entropy += ent;
            stats.steps += 1;
        }
    }
    let k = stats.steps.max(1) as f64;
    stats.policy_loss /= k;
    stats.value_loss /= k;
    stats.entropy /= k;
    Ok(stats)
}

/// Drain every buffer, compute advantages and run the PPO epochs.
pub fn ppo_update(
    store: &mut ParamStore,
    policy: &Policy,
    buffers: &mut [RolloutBuffer],
    bootstrap: &[f64],
    config: &PpoConfig,
    rng: &mut impl Rng,
) -> Result<PpoStats> {
    let segments = buffers
        .iter_mut()
        .map(RolloutBuffer::drain_for_update)
        .collect::<Result<Vec<_>>>()?;
    let samples = prepare_samples(&segments, bootstrap, config)?;
    ppo_optimize(store, policy, &samples, config, rng)
}
