//! Four-head world model and its variational training objective.
//!
//! The heads predict the next observation and the reward of one
//! intersection, either from local inputs alone or additionally conditioned
//! on one neighbour's action and direction. All heads use unit-variance
//! Gaussian likelihoods, so reconstruction terms are half squared errors.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::{kl_to_prior_tape, standard_normal, Encoder, TrajectoryStep};
use crate::diffnet::{gaussian_reparam_sample, Activation, AdamConfig, Gradients, Mlp, ParamStore, Tape, Tensor, Var};
use crate::netsim::Direction;
use crate::{Error, Result, NUM_PHASES, OBS_DIM};

const A: usize = NUM_PHASES;
const D: usize = 4;

/// Constant input widths (without the latent) of each head.
pub const REWARD_SELF_INPUTS: usize = 2 * OBS_DIM + A;
pub const REWARD_NBR_INPUTS: usize = 2 * OBS_DIM + A + A + D;
pub const OBS_SELF_INPUTS: usize = OBS_DIM + A;
pub const OBS_NBR_INPUTS: usize = OBS_DIM + A + A + D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub hidden: Vec<usize>,
    pub latent: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            hidden: vec![32, 32],
            latent: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderSet {
    pub reward_self: Mlp,
    pub reward_nbr: Mlp,
    pub obs_self: Mlp,
    pub obs_nbr: Mlp,
    pub latent: usize,
}

const HEADS: [(&str, usize, usize); 4] = [
    ("decoder.reward_self", REWARD_SELF_INPUTS, 1),
    ("decoder.reward_nbr", REWARD_NBR_INPUTS, 1),
    ("decoder.obs_self", OBS_SELF_INPUTS, OBS_DIM),
    ("decoder.obs_nbr", OBS_NBR_INPUTS, OBS_DIM),
];

impl DecoderSet {
    pub const PREFIX: &'static str = "decoder.";

    /// Fresh heads. With `zero_outputs` every output layer starts at zero,
    /// so all predictions (and the intrinsic reward) start at zero.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &DecoderConfig,
        zero_outputs: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut mlps = Vec::with_capacity(4);
        for (name, inputs, outputs) in HEADS {
            let mlp = Mlp::new(
                store,
                name,
                inputs + config.latent,
                &config.hidden,
                outputs,
                Activation::Relu,
                rng,
            )?;
            if zero_outputs {
                let out = mlp.output_layer().clone();
                store.value_mut(out.weight).fill(0.0);
                store.value_mut(out.bias).fill(0.0);
            }
            mlps.push(mlp);
        }
        Ok(Self::from_mlps(mlps, config.latent))
    }

    pub fn bind(store: &ParamStore, config: &DecoderConfig) -> Result<Self> {
        let mlps = HEADS
            .iter()
            .map(|&(name, inputs, outputs)| {
                Mlp::bind(store, name, inputs + config.latent, &config.hidden, outputs, Activation::Relu)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_mlps(mlps, config.latent))
    }

    fn from_mlps(mut mlps: Vec<Mlp>, latent: usize) -> Self {
        let obs_nbr = mlps.pop().unwrap();
        let obs_self = mlps.pop().unwrap();
        let reward_nbr = mlps.pop().unwrap();
        let reward_self = mlps.pop().unwrap();
        DecoderSet {
            reward_self,
            reward_nbr,
            obs_self,
            obs_nbr,
            latent,
        }
    }
}

/// Run `head` on constant rows `consts` joined with the latent `m`, which is
/// either one row (broadcast) or one row per input row.
pub fn head_forward(tape: &mut Tape<'_>, head: &Mlp, consts: Tensor, m: Var) -> Result<Var> {
    let rows = consts.rows();
    let c = tape.input(consts);
    let m = if tape.value(m).rows() == 1 && rows != 1 {
        tape.repeat_rows(m, rows)?
    } else {
        m
    };
    let x = tape.concat_cols(&[c, m])?;
    head.forward(tape, x)
}

fn check_len(context: &'static str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::shape(context, n, v.len()));
    }
    Ok(())
}

fn push_one_hot(row: &mut Vec<f64>, index: usize, width: usize) -> Result<()> {
    if index >= width {
        return Err(Error::OutOfRange(format!("one-hot index {index} of {width}")));
    }
    let start = row.len();
    row.resize(start + width, 0.0);
    row[start + index] = 1.0;
    Ok(())
}

fn reward_self_row(row: &mut Vec<f64>, o_next: &[f64], o: &[f64], a: usize) -> Result<()> {
    row.extend_from_slice(o_next);
    row.extend_from_slice(o);
    push_one_hot(row, a, A)
}

fn obs_self_row(row: &mut Vec<f64>, o: &[f64], a: usize) -> Result<()> {
    row.extend_from_slice(o);
    push_one_hot(row, a, A)
}

fn nbr_suffix(row: &mut Vec<f64>, a_j: usize, dir: Direction) -> Result<()> {
    push_one_hot(row, a_j, A)?;
    push_one_hot(row, dir.index(), D)
}

/// Which prediction gaps enter the intrinsic reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntrinsicTerms {
    pub reward: bool,
    pub obs: bool,
}

impl IntrinsicTerms {
    pub const BOTH: IntrinsicTerms = IntrinsicTerms { reward: true, obs: true };
    pub const NONE: IntrinsicTerms = IntrinsicTerms {
        reward: false,
        obs: false,
    };

    pub fn any(self) -> bool {
        self.reward || self.obs
    }
}

/// Inputs for the intrinsic reward of one intersection at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct IntrinsicQuery<'a> {
    pub obs: &'a [f64],
    pub action: usize,
    /// Present neighbours: (action, direction).
    pub neighbors: &'a [(usize, Direction)],
    pub latent: &'a [f64],
    /// Realized next observation, fed to the reward heads.
    pub next_obs: &'a [f64],
}

/// Per-(query, neighbour) prediction gaps `|r - r~_j| + ||o - o~_j||`, as a
/// `pairs x 1` column, plus the owning query of each pair.
pub fn intrinsic_gaps_tape(
    tape: &mut Tape<'_>,
    dec: &DecoderSet,
    queries: &[IntrinsicQuery<'_>],
    terms: IntrinsicTerms,
) -> Result<Option<(Var, Vec<usize>)>> {
    let mut owner = Vec::new();
    let (mut rs, mut rn, mut os, mut on) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (qi, q) in queries.iter().enumerate() {
        check_len("intrinsic obs", q.obs, OBS_DIM)?;
        check_len("intrinsic next obs", q.next_obs, OBS_DIM)?;
        check_len("intrinsic latent", q.latent, dec.latent)?;
        for &(a_j, dir) in q.neighbors {
            owner.push(qi);
            reward_self_row(&mut rs, q.next_obs, q.obs, q.action)?;
            rs.extend_from_slice(q.latent);
            reward_self_row(&mut rn, q.next_obs, q.obs, q.action)?;
            nbr_suffix(&mut rn, a_j, dir)?;
            rn.extend_from_slice(q.latent);
            obs_self_row(&mut os, q.obs, q.action)?;
            os.extend_from_slice(q.latent);
            obs_self_row(&mut on, q.obs, q.action)?;
            nbr_suffix(&mut on, a_j, dir)?;
            on.extend_from_slice(q.latent);
        }
    }
    let p = owner.len();
    if p == 0 || !terms.any() {
        return Ok(None);
    }
    let mut parts = Vec::new();
    if terms.reward {
        let x = tape.input(Tensor::from_vec(p, REWARD_SELF_INPUTS + dec.latent, rs)?);
        let r_self = dec.reward_self.forward(tape, x)?;
        let x = tape.input(Tensor::from_vec(p, REWARD_NBR_INPUTS + dec.latent, rn)?);
        let r_nbr = dec.reward_nbr.forward(tape, x)?;
        let d = tape.sub(r_self, r_nbr)?;
        parts.push(tape.abs(d));
    }
    if terms.obs {
        let x = tape.input(Tensor::from_vec(p, OBS_SELF_INPUTS + dec.latent, os)?);
        let o_self = dec.obs_self.forward(tape, x)?;
        let x = tape.input(Tensor::from_vec(p, OBS_NBR_INPUTS + dec.latent, on)?);
        let o_nbr = dec.obs_nbr.forward(tape, x)?;
        let d = tape.sub(o_self, o_nbr)?;
        parts.push(tape.row_norm(d));
    }
    let gaps = if parts.len() == 2 {
        tape.add(parts[0], parts[1])?
    } else {
        parts[0]
    };
    Ok(Some((gaps, owner)))
}

/// `r_int = -sum_j (|r - r~_j| + ||o - o~_j||)` for each query; zero for
/// queries without neighbours.
pub fn intrinsic_rewards(
    store: &ParamStore,
    dec: &DecoderSet,
    queries: &[IntrinsicQuery<'_>],
    terms: IntrinsicTerms,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; queries.len()];
    let mut tape = Tape::new(store);
    if let Some((gaps, owner)) = intrinsic_gaps_tape(&mut tape, dec, queries, terms)? {
        for (g, &qi) in tape.value(gaps).data().iter().zip(&owner) {
            out[qi] -= g;
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("intrinsic reward".into()));
    }
    Ok(out)
}

pub fn intrinsic_reward(
    store: &ParamStore,
    dec: &DecoderSet,
    query: &IntrinsicQuery<'_>,
    terms: IntrinsicTerms,
) -> Result<f64> {
    Ok(intrinsic_rewards(store, dec, std::slice::from_ref(query), terms)?[0])
}

fn predict(store: &ParamStore, head: &Mlp, row: Vec<f64>) -> Result<Vec<f64>> {
    let mut tape = Tape::new(store);
    let x = tape.row(row);
    let y = head.forward(&mut tape, x)?;
    Ok(tape.value(y).data().to_vec())
}

pub fn predict_obs_self(store: &ParamStore, dec: &DecoderSet, o: &[f64], a: usize, m: &[f64]) -> Result<Vec<f64>> {
    check_len("obs", o, OBS_DIM)?;
    check_len("latent", m, dec.latent)?;
    let mut row = Vec::new();
    obs_self_row(&mut row, o, a)?;
    row.extend_from_slice(m);
    predict(store, &dec.obs_self, row)
}

pub fn predict_obs_nbr(
    store: &ParamStore,
    dec: &DecoderSet,
    o: &[f64],
    a: usize,
    neighbor: Option<(usize, Direction)>,
    m: &[f64],
) -> Result<Vec<f64>> {
    check_len("obs", o, OBS_DIM)?;
    check_len("latent", m, dec.latent)?;
    let (a_j, dir) = neighbor.ok_or(Error::MissingNeighbor(0))?;
    let mut row = Vec::new();
    obs_self_row(&mut row, o, a)?;
    nbr_suffix(&mut row, a_j, dir)?;
    row.extend_from_slice(m);
    predict(store, &dec.obs_nbr, row)
}

pub fn predict_reward_self(
    store: &ParamStore,
    dec: &DecoderSet,
    o_next: &[f64],
    o: &[f64],
    a: usize,
    m: &[f64],
) -> Result<f64> {
    check_len("obs", o, OBS_DIM)?;
    check_len("next obs", o_next, OBS_DIM)?;
    check_len("latent", m, dec.latent)?;
    let mut row = Vec::new();
    reward_self_row(&mut row, o_next, o, a)?;
    row.extend_from_slice(m);
    Ok(predict(store, &dec.reward_self, row)?[0])
}

pub fn predict_reward_nbr(
    store: &ParamStore,
    dec: &DecoderSet,
    o_next: &[f64],
    o: &[f64],
    a: usize,
    neighbor: Option<(usize, Direction)>,
    m: &[f64],
) -> Result<f64> {
    check_len("obs", o, OBS_DIM)?;
    check_len("next obs", o_next, OBS_DIM)?;
    check_len("latent", m, dec.latent)?;
    let (a_j, dir) = neighbor.ok_or(Error::MissingNeighbor(0))?;
    let mut row = Vec::new();
    reward_self_row(&mut row, o_next, o, a)?;
    nbr_suffix(&mut row, a_j, dir)?;
    row.extend_from_slice(m);
    Ok(predict(store, &dec.reward_nbr, row)?[0])
}

/// Constant decoder inputs and targets for a whole trajectory, laid out so
/// that every prefix is a leading block of rows.
struct ElboRows {
    reward_self: Vec<f64>,
    obs_self: Vec<f64>,
    reward_target: Vec<f64>,
    obs_target: Vec<f64>,
    reward_nbr: Vec<f64>,
    obs_nbr: Vec<f64>,
    nbr_reward_target: Vec<f64>,
    nbr_obs_target: Vec<f64>,
    /// 1 / (present neighbours at that step), per neighbour row.
    nbr_weight: Vec<f64>,
    /// Number of neighbour rows belonging to steps `0..t`, for each t.
    nbr_prefix: Vec<usize>,
}

impl ElboRows {
    fn build(steps: &[TrajectoryStep]) -> Result<Self> {
        let mut r = ElboRows {
            reward_self: Vec::with_capacity(steps.len() * REWARD_SELF_INPUTS),
            obs_self: Vec::with_capacity(steps.len() * OBS_SELF_INPUTS),
            reward_target: Vec::with_capacity(steps.len()),
            obs_target: Vec::with_capacity(steps.len() * OBS_DIM),
            reward_nbr: Vec::new(),
            obs_nbr: Vec::new(),
            nbr_reward_target: Vec::new(),
            nbr_obs_target: Vec::new(),
            nbr_weight: Vec::new(),
            nbr_prefix: vec![0],
        };
        for s in steps {
            s.validate()?;
            reward_self_row(&mut r.reward_self, &s.next_obs, &s.obs, s.action)?;
            obs_self_row(&mut r.obs_self, &s.obs, s.action)?;
            r.reward_target.push(s.reward);
            r.obs_target.extend_from_slice(&s.next_obs);
            let present = s.neighbor_actions.iter().flatten().count();
            for dir in Direction::ALL {
                if let Some(a_j) = s.neighbor_actions[dir.index()] {
                    reward_self_row(&mut r.reward_nbr, &s.next_obs, &s.obs, s.action)?;
                    nbr_suffix(&mut r.reward_nbr, a_j, dir)?;
                    obs_self_row(&mut r.obs_nbr, &s.obs, s.action)?;
                    nbr_suffix(&mut r.obs_nbr, a_j, dir)?;
                    r.nbr_reward_target.push(s.reward);
                    r.nbr_obs_target.extend_from_slice(&s.next_obs);
                    r.nbr_weight.push(1.0 / present as f64);
                }
            }
            r.nbr_prefix.push(r.nbr_weight.len());
        }
        Ok(r)
    }
}

fn block(data: &[f64], rows: usize, cols: usize) -> Result<Tensor> {
    Tensor::from_vec(rows, cols, data[..rows * cols].to_vec())
}

/// First-layer pre-activations of `head` for constant rows, computed once
/// per trajectory and shared by every prefix.
fn first_layer_constants(tape: &mut Tape<'_>, head: &Mlp, consts: Tensor) -> Result<Var> {
    let first = &head.layers[0];
    let c = tape.input(consts);
    tape.affine_cols(c, first.weight, 0, Some(first.bias))
}

/// Finish `head` on the leading `rows` rows of its shared first-layer
/// constants plus the latent contribution of `m`.
fn finish_head(tape: &mut Tape<'_>, head: &Mlp, pre: Var, rows: usize, m: Var) -> Result<Var> {
    let first = &head.layers[0];
    let const_cols = first.inputs - tape.value(m).cols();
    let pre = if tape.value(pre).rows() == rows {
        pre
    } else {
        tape.slice_rows(pre, 0, rows)?
    };
    let from_m = tape.affine_cols(m, first.weight, const_cols, None)?;
    let from_m = tape.repeat_rows(from_m, rows)?;
    let mut h = tape.add(pre, from_m)?;
    for layer in &head.layers[1..] {
        h = head.activation.apply(tape, h);
        h = layer.forward(tape, h)?;
    }
    Ok(h)
}

/// `0.5 * sum_rows w_row * ||pred_row - target_row||^2`.
fn weighted_sq_error(tape: &mut Tape<'_>, pred: Var, target: Tensor, weights: Option<&[f64]>) -> Result<Var> {
    let rows = target.rows();
    let t = tape.input(target);
    let d = tape.sub(pred, t)?;
    let sq = tape.row_sum_sq(d);
    let w = match weights {
        Some(w) => w.iter().map(|v| 0.5 * v).collect(),
        None => vec![0.5; rows],
    };
    tape.weighted_sum(sq, w)
}

/// Shared first-layer constants of the four heads for one trajectory.
struct HeadConstants {
    reward_self: Var,
    obs_self: Var,
    nbr: Option<(Var, Var)>,
}

impl HeadConstants {
    fn build(tape: &mut Tape<'_>, dec: &DecoderSet, rows: &ElboRows, t: usize) -> Result<Self> {
        let p = rows.nbr_prefix[t];
        let reward_self = first_layer_constants(tape, &dec.reward_self, block(&rows.reward_self, t, REWARD_SELF_INPUTS)?)?;
        let obs_self = first_layer_constants(tape, &dec.obs_self, block(&rows.obs_self, t, OBS_SELF_INPUTS)?)?;
        let nbr = if p > 0 {
            Some((
                first_layer_constants(tape, &dec.reward_nbr, block(&rows.reward_nbr, p, REWARD_NBR_INPUTS)?)?,
                first_layer_constants(tape, &dec.obs_nbr, block(&rows.obs_nbr, p, OBS_NBR_INPUTS)?)?,
            ))
        } else {
            None
        };
        Ok(HeadConstants {
            reward_self,
            obs_self,
            nbr,
        })
    }
}

/// Reconstruction part of the negated ELBO of prefix `t`, given the latent
/// sample `m` inferred from it.
fn prefix_reconstruction(
    tape: &mut Tape<'_>,
    dec: &DecoderSet,
    rows: &ElboRows,
    consts: &HeadConstants,
    t: usize,
    m: Var,
) -> Result<Var> {
    let pred = finish_head(tape, &dec.reward_self, consts.reward_self, t, m)?;
    let mut total = weighted_sq_error(tape, pred, block(&rows.reward_target, t, 1)?, None)?;

    let pred = finish_head(tape, &dec.obs_self, consts.obs_self, t, m)?;
    let l = weighted_sq_error(tape, pred, block(&rows.obs_target, t, OBS_DIM)?, None)?;
    total = tape.add(total, l)?;

    let p = rows.nbr_prefix[t];
    if let (true, Some((reward_nbr, obs_nbr))) = (p > 0, consts.nbr) {
        let w = &rows.nbr_weight[..p];
        let pred = finish_head(tape, &dec.reward_nbr, reward_nbr, p, m)?;
        let l = weighted_sq_error(tape, pred, block(&rows.nbr_reward_target, p, 1)?, Some(w))?;
        total = tape.add(total, l)?;

        let pred = finish_head(tape, &dec.obs_nbr, obs_nbr, p, m)?;
        let l = weighted_sq_error(tape, pred, block(&rows.nbr_obs_target, p, OBS_DIM)?, Some(w))?;
        total = tape.add(total, l)?;
    }
    Ok(total)
}

/// Breakdown of a recorded negated ELBO.
#[derive(Debug, Clone, Copy)]
pub struct ElboVars {
    pub loss: Var,
    pub reconstruction: Var,
    pub kl: Var,
}

/// Mean negated ELBO over the given prefix lengths of one trajectory, with
/// one latent sample per prefix drawn from `noises`. The encoder runs once
/// over the longest prefix.
pub fn elbo_loss_tape(
    tape: &mut Tape<'_>,
    enc: &Encoder,
    dec: &DecoderSet,
    steps: &[TrajectoryStep],
    prefixes: &[usize],
    noises: &[Vec<f64>],
) -> Result<ElboVars> {
    if prefixes.is_empty() || prefixes.len() != noises.len() {
        return Err(Error::shape("elbo prefixes/noises", prefixes.len(), noises.len()));
    }
    if let Some(&bad) = prefixes.iter().find(|&&t| t == 0 || t > steps.len()) {
        return Err(Error::OutOfRange(format!("prefix {bad} of a {}-step trajectory", steps.len())));
    }
    let upto = *prefixes.iter().max().unwrap();
    let rows = ElboRows::build(&steps[..upto])?;
    let hs = enc.hidden_states(tape, steps, upto)?;
    let consts = HeadConstants::build(tape, dec, &rows, upto)?;
    let mut recon_terms = Vec::with_capacity(prefixes.len());
    let mut kl_terms = Vec::with_capacity(prefixes.len());
    for (&t, noise) in prefixes.iter().zip(noises) {
        let (mu, log_sigma) = enc.head(tape, hs[t])?;
        let m = gaussian_reparam_sample(tape, mu, log_sigma, noise)?;
        recon_terms.push(prefix_reconstruction(tape, dec, &rows, &consts, t, m)?);
        kl_terms.push(kl_to_prior_tape(tape, mu, log_sigma)?);
    }
    let n = prefixes.len() as f64;
    let recon = tape.concat_cols(&recon_terms)?;
    let recon = tape.sum(recon);
    let reconstruction = tape.scale(recon, 1.0 / n);
    let kl = tape.concat_cols(&kl_terms)?;
    let kl = tape.sum(kl);
    let kl = tape.scale(kl, 1.0 / n);
    let loss = tape.add(reconstruction, kl)?;
    Ok(ElboVars {
        loss,
        reconstruction,
        kl,
    })
}

/// Negated ELBO for the single prefix `t`.
pub fn elbo_loss(
    store: &ParamStore,
    enc: &Encoder,
    dec: &DecoderSet,
    steps: &[TrajectoryStep],
    t: usize,
    noise: &[f64],
) -> Result<f64> {
    let mut tape = Tape::new(store);
    let vars = elbo_loss_tape(&mut tape, enc, dec, steps, &[t], &[noise.to_vec()])?;
    Ok(tape.value(vars.loss).item())
}

/// Prefix lengths `stride, 2*stride, ...` up to `len`, always ending at `len`.
pub fn elbo_prefixes(len: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut out: Vec<usize> = (1..=len / stride).map(|k| k * stride).collect();
    if out.last() != Some(&len) && len > 0 {
        out.push(len);
    }
    out
}

/// One intersection's trajectory for one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task: String,
    pub steps: Vec<TrajectoryStep>,
}

/// FIFO store of whole trajectories with uniform sampling.
#[derive(Debug, Clone)]
pub struct VaeBuffer {
    capacity: usize,
    items: VecDeque<Arc<Trajectory>>,
    pushed: u64,
}

impl VaeBuffer {
    pub const DEFAULT_CAPACITY: usize = 100_000;

    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("trajectory buffer capacity must be positive".into()));
        }
        Ok(VaeBuffer {
            capacity,
            items: VecDeque::new(),
            pushed: 0,
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

    /// Total trajectories ever pushed.
    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    /// Append, evicting the oldest trajectory when full. Returns the evicted one.
    pub fn push(&mut self, trajectory: Trajectory) -> Option<Arc<Trajectory>> {
        let evicted = if self.items.len() == self.capacity {
            self.items.pop_front()
        } else {
            None
        };
        self.items.push_back(Arc::new(trajectory));
        self.pushed += 1;
        evicted
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<Trajectory>> {
        self.items.iter()
    }

    /// `n` trajectories drawn uniformly with replacement.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<Arc<Trajectory>>> {
        if self.items.is_empty() {
            return Err(Error::Empty("trajectory buffer"));
        }
        Ok((0..n)
            .map(|_| Arc::clone(&self.items[rng.random_range(0..self.items.len())]))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeUpdateConfig {
    pub minibatch: usize,
    pub stride: usize,
    pub elbo_coef: f64,
    pub adam: AdamConfig,
}

impl Default for VaeUpdateConfig {
    fn default() -> Self {
        VaeUpdateConfig {
            minibatch: 25,
            stride: 60,
            elbo_coef: 1.0,
            adam: AdamConfig::new(1e-3, 1e-5),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ElboStats {
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

/// Loss and gradient of the mean negated ELBO over `batch`, with trajectory
/// terms evaluated in parallel and reduced in order.
pub fn elbo_batch_gradients(
    store: &ParamStore,
    enc: &Encoder,
    dec: &DecoderSet,
    batch: &[Arc<Trajectory>],
    stride: usize,
    rng: &mut impl Rng,
) -> Result<(ElboStats, Gradients)> {
    let jobs: Vec<(Arc<Trajectory>, Vec<usize>, Vec<Vec<f64>>)> = batch
        .iter()
        .map(|traj| {
            let prefixes = elbo_prefixes(traj.steps.len(), stride);
            let noises = prefixes.iter().map(|_| standard_normal(rng, enc.config.latent)).collect();
            (Arc::clone(traj), prefixes, noises)
        })
        .collect();
    let results: Vec<Result<(ElboStats, Gradients)>> = jobs
        .par_iter()
        .map(|(traj, prefixes, noises)| {
            let mut tape = Tape::new(store);
            let v = elbo_loss_tape(&mut tape, enc, dec, &traj.steps, prefixes, noises)?;
            let stats = ElboStats {
                loss: tape.value(v.loss).item(),
                reconstruction: tape.value(v.reconstruction).item(),
                kl: tape.value(v.kl).item(),
            };
            Ok((stats, tape.backward(v.loss)?))
        })
        .collect();
    let mut grads = store.zero_grads();
    let mut stats = ElboStats::default();
    let n = batch.len().max(1) as f64;
    for r in results {
        let (s, g) = r?;
        stats.loss += s.loss / n;
        stats.reconstruction += s.reconstruction / n;
        stats.kl += s.kl / n;
        grads.add_assign(&g);
    }
    grads.scale(1.0 / n);
    Ok((stats, grads))
}

/// One Adam step on encoder and decoders from a minibatch of the buffer.
pub fn vae_update(
    store: &mut ParamStore,
    enc: &Encoder,
    dec: &DecoderSet,
    buffer: &VaeBuffer,
    config: &VaeUpdateConfig,
    rng: &mut impl Rng,
) -> Result<ElboStats> {
    let batch = buffer.sample(config.minibatch, rng)?;
    let (stats, mut grads) = elbo_batch_gradients(store, enc, dec, &batch, config.stride, rng)?;
    if !stats.loss.is_finite() {
        return Err(Error::NonFinite("ELBO loss".into()));
    }
    grads.scale(config.elbo_coef);
    store.adam_step(&grads, &config.adam)?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::EncoderConfig;
    use crate::diffnet::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_step(rng: &mut ChaCha8Rng, nbrs: [bool; 4]) -> TrajectoryStep {
        let mut obs = [0.0; OBS_DIM];
        let mut next_obs = [0.0; OBS_DIM];
        for k in 0..OBS_DIM {
            obs[k] = rng.random_range(0.0..1.0);
            next_obs[k] = rng.random_range(0.0..1.0);
        }
        let mut neighbor_actions = [None; 4];
        for d in 0..4 {
            if nbrs[d] {
                neighbor_actions[d] = Some(rng.random_range(0..4));
            }
        }
        TrajectoryStep {
            obs,
            action: rng.random_range(0..4),
            reward: -rng.random_range(0.0..1.0),
            neighbor_actions,
            next_obs,
        }
    }

    fn small(zero: bool) -> (ParamStore, Encoder, DecoderSet, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let enc = Encoder::new(
            &mut store,
            EncoderConfig {
                embed: 8,
                hidden: 8,
                latent: 2,
            },
            &mut rng,
        )
        .unwrap();
        let cfg = DecoderConfig {
            hidden: vec![8, 8],
            latent: 2,
        };
        let dec = DecoderSet::new(&mut store, &cfg, zero, &mut rng).unwrap();
        (store, enc, dec, rng)
    }

    fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.value_mut(id).data_mut() {
                *v = rng.random_range(-0.6..0.6);
            }
        }
    }

    #[test]
    fn zero_heads_predict_zero() {
        let (store, _, dec, _) = small(true);
        let o = [0.3; OBS_DIM];
        assert_eq!(predict_obs_self(&store, &dec, &o, 1, &[0.5, 0.1]).unwrap(), vec![0.0; OBS_DIM]);
        assert_eq!(
            predict_obs_nbr(&store, &dec, &o, 1, Some((2, Direction::S)), &[0.5, 0.1]).unwrap(),
            vec![0.0; OBS_DIM]
        );
        assert_eq!(predict_reward_self(&store, &dec, &o, &o, 0, &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(
            predict_reward_nbr(&store, &dec, &o, &o, 0, Some((3, Direction::E)), &[0.0, 0.0]).unwrap(),
            0.0
        );
        assert!(matches!(
            predict_obs_nbr(&store, &dec, &o, 1, None, &[0.0, 0.0]),
            Err(Error::MissingNeighbor(_))
        ));
    }

    #[test]
    fn nbr_head_with_matching_weights_equals_self_head() {
        // Copy the self head into the neighbour head, leaving zero weights
        // on the neighbour-only columns.
        let (mut store, _, dec, mut rng) = small(false);
        randomize(&mut store, &mut rng);
        let self_first = dec.obs_self.layers[0].clone();
        let nbr_first = dec.obs_nbr.layers[0].clone();
        let w_self = store.value(self_first.weight).clone();
        let hidden = w_self.rows();
        let mut w_nbr = Tensor::zeros(hidden, OBS_NBR_INPUTS + 2);
        for r in 0..hidden {
            for c in 0..OBS_SELF_INPUTS {
                w_nbr.set(r, c, w_self.get(r, c));
            }
            for k in 0..2 {
                w_nbr.set(r, OBS_NBR_INPUTS + k, w_self.get(r, OBS_SELF_INPUTS + k));
            }
        }
        *store.value_mut(nbr_first.weight) = w_nbr;
        let b = store.value(self_first.bias).clone();
        *store.value_mut(nbr_first.bias) = b;
        for (ls, ln) in dec.obs_self.layers.iter().zip(&dec.obs_nbr.layers).skip(1) {
            let w = store.value(ls.weight).clone();
            let b = store.value(ls.bias).clone();
            *store.value_mut(ln.weight) = w;
            *store.value_mut(ln.bias) = b;
        }
        let o: Vec<f64> = (0..OBS_DIM).map(|k| k as f64 / 20.0).collect();
        let m = [0.4, -0.2];
        let s = predict_obs_self(&store, &dec, &o, 2, &m).unwrap();
        let n = predict_obs_nbr(&store, &dec, &o, 2, Some((1, Direction::N)), &m).unwrap();
        for (x, y) in s.iter().zip(&n) {
            assert!((x - y).abs() < 1e-12);
        }
        // Now make the neighbour-action columns matter.
        let w = store.value_mut(nbr_first.weight);
        for r in 0..hidden {
            w.set(r, OBS_SELF_INPUTS + 1, 0.7);
        }
        let changed = predict_obs_nbr(&store, &dec, &o, 2, Some((1, Direction::N)), &m).unwrap();
        let other = predict_obs_nbr(&store, &dec, &o, 2, Some((0, Direction::N)), &m).unwrap();
        assert_ne!(changed, other);
    }

    #[test]
    fn hand_computed_elbo() {
        let (store, enc, dec, _) = small(true);
        let mut obs_next = [0.0; OBS_DIM];
        obs_next[0] = 2.0;
        let step = TrajectoryStep {
            obs: [0.0; OBS_DIM],
            action: 0,
            reward: -1.0,
            neighbor_actions: [None, Some(2), None, None],
            next_obs: obs_next,
        };
        let loss = elbo_loss(&store, &enc, &dec, &[step], 1, &[0.0, 0.0]).unwrap();
        assert!((loss - 5.0).abs() < 1e-12, "{loss}");
        assert!(elbo_loss(&store, &enc, &dec, &[], 1, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn elbo_is_task_agnostic_and_nonnegative() {
        let (store, enc, dec, mut rng) = small(false);
        let steps: Vec<TrajectoryStep> = (0..10).map(|_| random_step(&mut rng, [true, false, true, false])).collect();
        let a = Trajectory {
            task: "a".into(),
            steps: steps.clone(),
        };
        let b = Trajectory { task: "b".into(), steps };
        let noise = [0.2, 0.9];
        let la = elbo_loss(&store, &enc, &dec, &a.steps, 10, &noise).unwrap();
        let lb = elbo_loss(&store, &enc, &dec, &b.steps, 10, &noise).unwrap();
        assert_eq!(la, lb);
        assert!(la >= 0.0);
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let (mut store, enc, dec, mut rng) = small(false);
        randomize(&mut store, &mut rng);
        let steps: Vec<TrajectoryStep> = (0..6).map(|_| random_step(&mut rng, [true, true, false, true])).collect();
        let prefixes = [3, 6];
        let noises = vec![vec![0.3, -0.8], vec![1.1, 0.2]];
        let loss = |s: &ParamStore| {
            let mut tape = Tape::new(s);
            let v = elbo_loss_tape(&mut tape, &enc, &dec, &steps, &prefixes, &noises)?;
            Ok((tape.value(v.loss).item(), tape.backward(v.loss)?))
        };
        let report = finite_diff_check(loss, &store, 1e-5).unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn intrinsic_reward_examples() {
        let (store, _, dec, _) = small(true);
        let o = [0.5; OBS_DIM];
        let nbrs = [(1, Direction::N), (3, Direction::W)];
        let q = IntrinsicQuery {
            obs: &o,
            action: 2,
            neighbors: &nbrs,
            latent: &[0.1, 0.2],
            next_obs: &o,
        };
        assert_eq!(intrinsic_reward(&store, &dec, &q, IntrinsicTerms::BOTH).unwrap(), 0.0);
        let lonely = IntrinsicQuery { neighbors: &[], ..q.clone() };
        assert_eq!(intrinsic_reward(&store, &dec, &lonely, IntrinsicTerms::BOTH).unwrap(), 0.0);
    }

    #[test]
    fn buffer_is_fifo() {
        let mut buf = VaeBuffer::new(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(buf.sample(1, &mut rng), Err(Error::Empty(_))));
        for k in 0..5 {
            let evicted = buf.push(Trajectory {
                task: k.to_string(),
                steps: vec![],
            });
            assert_eq!(evicted.map(|t| t.task.clone()), (k >= 3).then(|| (k - 3).to_string()));
        }
        let tasks: Vec<String> = buf.iter().map(|t| t.task.clone()).collect();
        assert_eq!(tasks, vec!["2", "3", "4"]);
        assert_eq!(buf.sample(25, &mut rng).unwrap().len(), 25);
    }

    #[test]
    fn prefixes_cover_the_trajectory() {
        assert_eq!(elbo_prefixes(720, 60).len(), 12);
        assert_eq!(elbo_prefixes(720, 60)[11], 720);
        assert_eq!(elbo_prefixes(50, 60), vec![50]);
        assert_eq!(elbo_prefixes(130, 60), vec![60, 120, 130]);
    }

    #[test]
    fn vae_update_reduces_loss_on_a_fixed_buffer() {
        let (mut store, enc, dec, mut rng) = small(true);
        let mut buf = VaeBuffer::new(10).unwrap();
        for k in 0..3 {
            let steps = (0..20).map(|_| random_step(&mut rng, [k != 0, false, true, false])).collect();
            buf.push(Trajectory {
                task: k.to_string(),
                steps,
            });
        }
        let cfg = VaeUpdateConfig {
            minibatch: 4,
            stride: 5,
            ..VaeUpdateConfig::default()
        };
        let first = vae_update(&mut store, &enc, &dec, &buf, &cfg, &mut rng).unwrap().loss;
        let mut last = first;
        for _ in 0..200 {
            last = vae_update(&mut store, &enc, &dec, &buf, &cfg, &mut rng).unwrap().loss;
        }
        assert!(last < first, "{first} -> {last}");
    }
}
