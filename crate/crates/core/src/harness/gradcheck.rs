use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agent::{ppo_loss_tape, Policy, PolicyConfig, PpoConfig, PpoSample};
use crate::belief::{Encoder, EncoderConfig, TrajectoryStep};
use crate::diffnet::{finite_diff_check, log_softmax, GradCheckReport, ParamStore, Tape};
use crate::netsim::Direction;
use crate::worldmodel::{elbo_loss_tape, intrinsic_gaps_tape, DecoderConfig, DecoderSet, IntrinsicQuery, IntrinsicTerms};
use crate::{Result, NUM_PHASES, OBS_DIM};

const HIDDEN: usize = 8;
const LATENT: usize = 2;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedReport {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.value_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

fn random_obs(rng: &mut ChaCha8Rng) -> [f64; OBS_DIM] {
    let mut o = [0.0; OBS_DIM];
    for v in &mut o[..OBS_DIM - NUM_PHASES] {
        *v = rng.random_range(0.0..1.0);
    }
    o[OBS_DIM - NUM_PHASES + rng.random_range(0..NUM_PHASES)] = 1.0;
    o
}

fn world_model(rng: &mut ChaCha8Rng) -> Result<(ParamStore, Encoder, DecoderSet)> {
    let mut store = ParamStore::new();
    let enc = Encoder::new(
        &mut store,
        EncoderConfig {
            embed: HIDDEN,
            hidden: HIDDEN,
            latent: LATENT,
        },
        rng,
    )?;
    let dec = DecoderSet::new(
        &mut store,
        &DecoderConfig {
            hidden: vec![HIDDEN, HIDDEN],
            latent: LATENT,
        },
        false,
        rng,
    )?;
    randomize(&mut store, rng, 0.5);
    Ok((store, enc, dec))
}

/// Gradient of the negated ELBO with respect to encoder and decoders.
pub fn check_elbo(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (store, enc, dec) = world_model(&mut rng)?;
    let steps: Vec<TrajectoryStep> = (0..6)
        .map(|_| {
            let mut neighbor_actions = [None; 4];
            for slot in neighbor_actions.iter_mut() {
                if rng.random_bool(0.6) {
                    *slot = Some(rng.random_range(0..NUM_PHASES));
                }
            }
            TrajectoryStep {
                obs: random_obs(&mut rng),
                action: rng.random_range(0..NUM_PHASES),
                reward: -rng.random_range(0.0..1.0),
                neighbor_actions,
                next_obs: random_obs(&mut rng),
            }
        })
        .collect();
    let prefixes = [2, 4, 6];
    let noises: Vec<Vec<f64>> = prefixes
        .iter()
        .map(|_| (0..LATENT).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect();
    finite_diff_check(
        |s| {
            let mut tape = Tape::new(s);
            let v = elbo_loss_tape(&mut tape, &enc, &dec, &steps, &prefixes, &noises)?;
            Ok((tape.value(v.loss).item(), tape.backward(v.loss)?))
        },
        &store,
        STEP,
    )
}

/// Gradient of the clipped surrogate + value + entropy loss.
pub fn check_ppo(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let policy = Policy::new(
        &mut store,
        PolicyConfig {
            hidden: vec![HIDDEN, HIDDEN],
            latent: LATENT,
        },
        &mut rng,
    )?;
    randomize(&mut store, &mut rng, 0.7);
    let batch: Vec<PpoSample> = (0..8)
        .map(|_| {
            let mut input = random_obs(&mut rng).to_vec();
            input.extend((0..LATENT).map(|_| rng.random_range(-1.0..1.0)));
            let (logits, _) = policy.evaluate(&store, std::slice::from_ref(&input))?;
            let action = rng.random_range(0..NUM_PHASES);
            let current = log_softmax(logits.row_slice(0))[action];
            Ok(PpoSample {
                input,
                action,
                old_log_prob: current + rng.random_range(-0.4..0.4),
                advantage: rng.random_range(-1.5..1.5),
                ret: rng.random_range(-1.0..1.0),
            })
        })
        .collect::<Result<_>>()?;
    let cfg = PpoConfig::default();
    finite_diff_check(
        |s| {
            let mut tape = Tape::new(s);
            let v = ppo_loss_tape(&mut tape, &policy, &batch, &cfg)?;
            Ok((tape.value(v.loss).item(), tape.backward(v.loss)?))
        },
        &store,
        STEP,
    )
}

/// Gradient of the summed prediction gaps behind the intrinsic reward with
/// respect to the four decoder heads.
pub fn check_intrinsic(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (store, _, dec) = world_model(&mut rng)?;
    let obs: Vec<[f64; OBS_DIM]> = (0..3).map(|_| random_obs(&mut rng)).collect();
    let next: Vec<[f64; OBS_DIM]> = (0..3).map(|_| random_obs(&mut rng)).collect();
    let latents: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..LATENT).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let neighbors: Vec<Vec<(usize, Direction)>> = vec![
        vec![(1, Direction::N), (3, Direction::E)],
        vec![(0, Direction::S)],
        vec![(2, Direction::W), (1, Direction::N), (0, Direction::E)],
    ];
    let actions = [0, 3, 2];
    let queries: Vec<IntrinsicQuery<'_>> = (0..3)
        .map(|i| IntrinsicQuery {
            obs: &obs[i],
            action: actions[i],
            neighbors: &neighbors[i],
            latent: &latents[i],
            next_obs: &next[i],
        })
        .collect();
    finite_diff_check(
        |s| {
            let mut tape = Tape::new(s);
            let (gaps, _) = intrinsic_gaps_tape(&mut tape, &dec, &queries, IntrinsicTerms::BOTH)?
                .expect("queries have neighbours");
            let total = tape.sum(gaps);
            let r_int = tape.scale(total, -1.0);
            Ok((tape.value(r_int).item(), tape.backward(r_int)?))
        },
        &store,
        STEP,
    )
}

/// All three checks on small random instances (hidden 8, latent 2).
pub fn gradcheck_suite(seed: u64) -> Result<Vec<NamedReport>> {
    Ok(vec![
        NamedReport {
            name: "elbo",
            report: check_elbo(seed)?,
        },
        NamedReport {
            name: "ppo",
            report: check_ppo(seed.wrapping_add(1))?,
        },
        NamedReport {
            name: "intrinsic",
            report: check_intrinsic(seed.wrapping_add(2))?,
        },
    ])
}
