//! Recurrent variational task encoder: per-intersection latent beliefs
//! `N(mu, sigma^2)` inferred from the local trajectory.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{gaussian_reparam_sample, GruCell, Linear, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result, NUM_PHASES, OBS_DIM};

/// Width of one encoder input row: observation, action one-hot, reward.
pub const ENCODER_INPUT_DIM: usize = OBS_DIM + NUM_PHASES + 1;

/// One control step of a single intersection's trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    /// Normalized observation `o_t`.
    pub obs: [f64; OBS_DIM],
    pub action: usize,
    /// Scaled extrinsic reward received after the action.
    pub reward: f64,
    /// Neighbour actions indexed by direction (N, E, S, W); `None` where
    /// there is no neighbour.
    pub neighbor_actions: [Option<usize>; 4],
    /// Normalized observation `o_{t+1}`.
    pub next_obs: [f64; OBS_DIM],
}

impl TrajectoryStep {
    pub fn validate(&self) -> Result<()> {
        if self.action >= NUM_PHASES {
            return Err(Error::InvalidPhase(self.action));
        }
        if let Some(a) = self.neighbor_actions.iter().flatten().find(|&&a| a >= NUM_PHASES) {
            return Err(Error::InvalidPhase(*a));
        }
        if !self.reward.is_finite() || !self.obs.iter().chain(&self.next_obs).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("trajectory step".into()));
        }
        Ok(())
    }

    pub fn encoder_input(&self) -> [f64; ENCODER_INPUT_DIM] {
        let mut x = [0.0; ENCODER_INPUT_DIM];
        x[..OBS_DIM].copy_from_slice(&self.obs);
        x[OBS_DIM + self.action] = 1.0;
        x[ENCODER_INPUT_DIM - 1] = self.reward;
        x
    }
}

pub fn one_hot(index: usize, width: usize) -> Vec<f64> {
    let mut v = vec![0.0; width];
    v[index] = 1.0;
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed: usize,
    pub hidden: usize,
    pub latent: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embed: 40,
            hidden: 64,
            latent: 5,
        }
    }
}

/// ReLU embedding of `(o, a, r)`, a GRU over the sequence and a linear head
/// producing `(mu, log_sigma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    embed: Linear,
    gru: GruCell,
    head: Linear,
}

impl Encoder {
    pub const PREFIX: &'static str = "encoder.";

    /// Fresh parameters; the output head starts at zero so the initial
    /// belief is the prior `N(0, I)`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        Ok(Encoder {
            embed: Linear::new(store, "encoder.embed", ENCODER_INPUT_DIM, config.embed, false, rng)?,
            gru: GruCell::new(store, "encoder.gru", config.embed, config.hidden, rng)?,
            head: Linear::new(store, "encoder.head", config.hidden, 2 * config.latent, true, rng)?,
            config,
        })
    }

    pub fn bind(store: &ParamStore, config: EncoderConfig) -> Result<Self> {
        Ok(Encoder {
            embed: Linear::bind(store, "encoder.embed", ENCODER_INPUT_DIM, config.embed)?,
            gru: GruCell::bind(store, "encoder.gru", config.embed, config.hidden)?,
            head: Linear::bind(store, "encoder.head", config.hidden, 2 * config.latent)?,
            config,
        })
    }

    /// Infer the latent and hidden widths from stored parameter shapes.
    pub fn infer_config(store: &ParamStore) -> Result<EncoderConfig> {
        let shape = |name: &str| {
            store
                .id(name)
                .map(|id| store.value(id).shape())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
        };
        let (embed, _) = shape("encoder.embed.weight")?;
        let (twice_latent, hidden) = shape("encoder.head.weight")?;
        Ok(EncoderConfig {
            embed,
            hidden,
            latent: twice_latent / 2,
        })
    }

    pub fn zero_hidden(&self, tape: &mut Tape<'_>, rows: usize) -> Var {
        tape.input(Tensor::zeros(rows, self.config.hidden))
    }

    /// One recurrent update for a batch of rows of encoder inputs.
    pub fn advance(&self, tape: &mut Tape<'_>, inputs: Var, hidden: Var) -> Result<Var> {
        let e = self.embed.forward(tape, inputs)?;
        let e = tape.relu(e);
        self.gru.step(tape, e, hidden)
    }

    /// `(mu, log_sigma)` from hidden states.
    pub fn head(&self, tape: &mut Tape<'_>, hidden: Var) -> Result<(Var, Var)> {
        let out = self.head.forward(tape, hidden)?;
        let mu = tape.slice_cols(out, 0, self.config.latent)?;
        let log_sigma = tape.slice_cols(out, self.config.latent, self.config.latent)?;
        Ok((mu, log_sigma))
    }

    /// Hidden states `h_0 ..= h_upto` for a trajectory, where `h_0` is the
    /// zero state and `h_t` has consumed steps `0..t`.
    pub fn hidden_states(&self, tape: &mut Tape<'_>, steps: &[TrajectoryStep], upto: usize) -> Result<Vec<Var>> {
        if upto > steps.len() {
            return Err(Error::OutOfRange(format!("prefix {upto} of a {}-step trajectory", steps.len())));
        }
        let mut h = self.zero_hidden(tape, 1);
        let mut out = Vec::with_capacity(upto + 1);
        out.push(h);
        for step in &steps[..upto] {
            let x = tape.row(step.encoder_input().to_vec());
            h = self.advance(tape, x, h)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Posterior over the latent task variable for one intersection.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBelief {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sample: Vec<f64>,
    pub hidden: Vec<f64>,
}

/// `KL(N(mu, sigma^2) || N(0, I))` for a diagonal Gaussian.
pub fn kl_to_prior_values(mu: &[f64], sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(sigma)
        .map(|(m, s)| 0.5 * (m * m + s * s - 1.0 - (s * s).ln()))
        .sum()
}

pub fn kl_to_prior(belief: &LatentBelief) -> f64 {
    kl_to_prior_values(&belief.mu, &belief.sigma)
}

/// Recorded KL in terms of `log_sigma`:
/// `0.5 * sum(mu^2 + exp(2 log_sigma) - 1 - 2 log_sigma)`.
pub fn kl_to_prior_tape(tape: &mut Tape<'_>, mu: Var, log_sigma: Var) -> Result<Var> {
    let mu2 = tape.square(mu);
    let two_ls = tape.scale(log_sigma, 2.0);
    let var = tape.exp(two_ls);
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, two_ls)?;
    let c = tape.shift(b, -1.0);
    let s = tape.sum(c);
    Ok(tape.scale(s, 0.5))
}

fn belief_from(tape: &mut Tape<'_>, encoder: &Encoder, hidden: Var, noise: &[f64]) -> Result<LatentBelief> {
    if noise.len() != encoder.config.latent {
        return Err(Error::shape("latent noise", encoder.config.latent, noise.len()));
    }
    let (mu, log_sigma) = encoder.head(tape, hidden)?;
    let sample = gaussian_reparam_sample(tape, mu, log_sigma, noise)?;
    Ok(LatentBelief {
        mu: tape.value(mu).data().to_vec(),
        sigma: tape.value(log_sigma).data().iter().map(|v| v.exp()).collect(),
        sample: tape.value(sample).data().to_vec(),
        hidden: tape.value(hidden).data().to_vec(),
    })
}

/// Belief before any step of the episode has been observed.
pub fn reset_belief(encoder: &Encoder, store: &ParamStore, noise: &[f64]) -> Result<LatentBelief> {
    let mut tape = Tape::new(store);
    let h = encoder.zero_hidden(&mut tape, 1);
    belief_from(&mut tape, encoder, h, noise)
}

/// Advance `belief`'s hidden state by `step` and resample.
pub fn encode_step(
    encoder: &Encoder,
    store: &ParamStore,
    belief: &LatentBelief,
    step: &TrajectoryStep,
    noise: &[f64],
) -> Result<LatentBelief> {
    step.validate()?;
    let mut tape = Tape::new(store);
    let h = tape.row(belief.hidden.clone());
    let x = tape.row(step.encoder_input().to_vec());
    let h = encoder.advance(&mut tape, x, h)?;
    belief_from(&mut tape, encoder, h, noise)
}

/// Belief after encoding the whole prefix `steps` from scratch.
pub fn encode_prefix(
    encoder: &Encoder,
    store: &ParamStore,
    steps: &[TrajectoryStep],
    noise: &[f64],
) -> Result<LatentBelief> {
    let mut tape = Tape::new(store);
    let hs = encoder.hidden_states(&mut tape, steps, steps.len())?;
    belief_from(&mut tape, encoder, hs[hs.len() - 1], noise)
}

/// Hidden states for a batch of intersections advanced in lockstep during
/// a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefBatch {
    hidden: Tensor,
    latent: usize,
}

impl BeliefBatch {
    pub fn new(encoder: &Encoder, agents: usize) -> Self {
        BeliefBatch {
            hidden: Tensor::zeros(agents, encoder.config.hidden),
            latent: encoder.config.latent,
        }
    }

    pub fn agents(&self) -> usize {
        self.hidden.rows()
    }

    /// Current `(mu, sigma)` per agent and one reparameterized sample drawn
    /// with `noise` (agents x latent, row-major).
    pub fn sample(&self, encoder: &Encoder, store: &ParamStore, noise: &[f64]) -> Result<Vec<LatentBelief>> {
        if noise.len() != self.agents() * self.latent {
            return Err(Error::shape("latent noise", self.agents() * self.latent, noise.len()));
        }
        let mut tape = Tape::new(store);
        let h = tape.input(self.hidden.clone());
        let (mu, log_sigma) = encoder.head(&mut tape, h)?;
        let m = gaussian_reparam_sample(&mut tape, mu, log_sigma, noise)?;
        let (mu, ls, m) = (tape.value(mu), tape.value(log_sigma), tape.value(m));
        Ok((0..self.agents())
            .map(|i| LatentBelief {
                mu: mu.row_slice(i).to_vec(),
                sigma: ls.row_slice(i).iter().map(|v| v.exp()).collect(),
                sample: m.row_slice(i).to_vec(),
                hidden: self.hidden.row_slice(i).to_vec(),
            })
            .collect())
    }

    /// Consume one step per agent.
    pub fn advance(&mut self, encoder: &Encoder, store: &ParamStore, steps: &[&TrajectoryStep]) -> Result<()> {
        if steps.len() != self.agents() {
            return Err(Error::shape("belief batch steps", self.agents(), steps.len()));
        }
        let data = steps.iter().flat_map(|s| s.encoder_input()).collect();
        let mut tape = Tape::new(store);
        let x = tape.input(Tensor::from_vec(steps.len(), ENCODER_INPUT_DIM, data)?);
        let h = tape.input(self.hidden.clone());
        let h = encoder.advance(&mut tape, x, h)?;
        self.hidden = tape.value(h).clone();
        Ok(())
    }
}

/// `n` independent standard normal draws.
pub fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
