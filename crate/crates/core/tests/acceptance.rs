//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Tolerances are fixed here, not tuned per run.

use std::sync::OnceLock;
use std::time::Instant;

use metavim::agent::ActMode;
use metavim::belief::{kl_to_prior, kl_to_prior_values, LatentBelief};
use metavim::controllers::ControllerKind;
use metavim::diffnet::{Checkpoint, ParamStore};
use metavim::harness::{
    gradcheck_suite, mean_travel_time, meta_test, meta_train, run_ablation, run_classical, ExperimentConfig, FlowSpec,
    Learner, MetricsRecord, RoadnetSpec, Variant,
};
use metavim::netsim::{Direction, SimState};
use metavim::worldmodel::{intrinsic_rewards, DecoderConfig, DecoderSet, IntrinsicQuery, IntrinsicTerms};
use metavim::OBS_DIM;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const KL_TOL: f64 = 1e-10;
const LEARNING_RATIO: f64 = 0.9;
const FIFO_CAPACITY: usize = 100;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn grid_config(rows: usize, cols: usize) -> ExperimentConfig {
    ExperimentConfig {
        roadnet: RoadnetSpec::grid(rows, cols),
        flow: FlowSpec::MixedLow,
        ..ExperimentConfig::default()
    }
}

struct Trained {
    config: ExperimentConfig,
    checkpoint: Checkpoint,
    metrics: Vec<MetricsRecord>,
}

/// The K = 100 full-variant run on 2x2 mixed_low, shared by the learning,
/// transfer and round-trip criteria.
fn trained() -> &'static Result<Trained, String> {
    static TRAINED: OnceLock<Result<Trained, String>> = OnceLock::new();
    TRAINED.get_or_init(|| {
        let config = ExperimentConfig {
            variant: Variant::Full,
            iterations: 100,
            seeds: vec![0],
            ..grid_config(2, 2)
        };
        let out = meta_train(&config, 0, |_| Ok(())).map_err(|e| e.to_string())?;
        let checkpoint = out.checkpoint(&config, 0).map_err(|e| e.to_string())?;
        Ok(Trained {
            config,
            checkpoint,
            metrics: out.metrics,
        })
    })
}

fn gradient_oracle() -> Outcome {
    let reports = gradcheck_suite(0).map_err(|e| e.to_string())?;
    let worst = reports.iter().map(|r| r.report.max_rel_error).fold(0.0, f64::max);
    let detail = reports
        .iter()
        .map(|r| format!("{} {:.2e}", r.name, r.report.max_rel_error))
        .collect::<Vec<_>>()
        .join(", ");
    check(worst <= GRAD_TOL, format!("{detail} (tol {GRAD_TOL:e})"))
}

fn kl_closed_form() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let dim = rng.random_range(1..8);
        let mu: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sigma: Vec<f64> = (0..dim).map(|_| rng.random_range(0.05..4.0)).collect();
        // KL(N(mu, s^2) || N(0, 1)) = -ln s + (s^2 + mu^2) / 2 - 1/2, summed over dimensions.
        let oracle: f64 = mu.iter().zip(&sigma).map(|(m, s)| -s.ln() + (s * s + m * m) / 2.0 - 0.5).sum();
        let belief = LatentBelief {
            mu: mu.clone(),
            sigma: sigma.clone(),
            sample: mu.clone(),
            hidden: Vec::new(),
        };
        worst = worst.max((kl_to_prior(&belief) - oracle).abs());
    }
    let prior = kl_to_prior_values(&[0.0; 5], &[1.0; 5]);
    check(
        worst <= KL_TOL && prior == 0.0,
        format!("max |KL - oracle| {worst:.2e} over 1000 beliefs, KL(prior||prior) = {prior}"),
    )
}

fn random_episode(seed: u64) -> Result<(Vec<(u32, usize, usize, usize)>, f64), String> {
    let cfg = grid_config(2, 2);
    let net = cfg.network().map_err(|e| e.to_string())?;
    let schedule = cfg.schedule(&net, seed).map_err(|e| e.to_string())?;
    let mut sim = SimState::reset(net, schedule, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for _ in 0..720 {
        let actions: Vec<usize> = (0..4).map(|_| rng.random_range(0..4)).collect();
        sim.set_phases(
            &actions
                .iter()
                .map(|&a| metavim::netsim::PhaseId::new(a).unwrap())
                .collect::<Vec<_>>(),
        )
        .map_err(|e| e.to_string())?;
        for _ in 0..5 {
            sim.tick();
            if sim.entered() != sim.on_network() + sim.exited() {
                return Err(format!(
                    "conservation broken at t={}: entered {} != {} + {}",
                    sim.clock(),
                    sim.entered(),
                    sim.on_network(),
                    sim.exited()
                ));
            }
            rows.push((sim.clock(), sim.entered(), sim.on_network(), sim.exited()));
        }
    }
    Ok((rows, sim.average_travel_time().map_err(|e| e.to_string())?))
}

fn conservation_and_determinism() -> Outcome {
    let (a, tt_a) = random_episode(5)?;
    let (b, tt_b) = random_episode(5)?;
    let last = a.last().copied().unwrap_or_default();
    check(
        a.len() == 3600 && a == b && tt_a.to_bits() == tt_b.to_bits(),
        format!(
            "3600 ticks conserved; final entered {} = {} on network + {} exited; identical reruns (travel {tt_a:.3} s)",
            last.1, last.2, last.3
        ),
    )
}

fn baseline_ordering() -> Outcome {
    let cfg = grid_config(2, 2);
    let mean = |k| run_classical(&cfg, k).map(|r| r.mean_travel_time_s).map_err(|e| e.to_string());
    let (mp, ft, rnd) = (
        mean(ControllerKind::MaxPressure)?,
        mean(ControllerKind::Fixedtime)?,
        mean(ControllerKind::Random)?,
    );
    let margin = |x: f64| (x - mp) / x;
    check(
        mp < ft && mp < rnd && margin(ft) > 0.01 && margin(rnd) > 0.01,
        format!("seeds 0,1,2: maxpressure {mp:.2} s, fixedtime {ft:.2} s, random {rnd:.2} s"),
    )
}

fn learning_signal() -> Outcome {
    let t = trained().as_ref().map_err(|e| e.clone())?;
    let tt: Vec<f64> = t.metrics.iter().map(|r| r.avg_travel_time_s).collect();
    if tt.len() != 100 {
        return Err(format!("expected 100 training rows, got {}", tt.len()));
    }
    let first = tt[..10].iter().sum::<f64>() / 10.0;
    let last = tt[90..].iter().sum::<f64>() / 10.0;
    let random = run_classical(&t.config, ControllerKind::Random)
        .map_err(|e| e.to_string())?
        .mean_travel_time_s;
    check(
        last < first && last <= LEARNING_RATIO * random,
        format!(
            "first-10 mean {first:.2} s, last-10 mean {last:.2} s, random {random:.2} s (bound {:.2} s), training seed 0",
            LEARNING_RATIO * random
        ),
    )
}

fn intrinsic_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = DecoderConfig {
        hidden: vec![16, 16],
        latent: 5,
    };
    let mut store = ParamStore::new();
    let dec = DecoderSet::new(&mut store, &cfg, false, &mut rng).map_err(|e| e.to_string())?;
    let mut max_r = f64::NEG_INFINITY;
    let dirs = Direction::ALL;
    let batch = 1000;
    for _ in 0..100 {
        let data: Vec<(Vec<f64>, usize, Vec<(usize, Direction)>, Vec<f64>, Vec<f64>)> = (0..batch)
            .map(|_| {
                let obs: Vec<f64> = (0..OBS_DIM).map(|_| rng.random_range(-2.0..2.0)).collect();
                let next: Vec<f64> = (0..OBS_DIM).map(|_| rng.random_range(-2.0..2.0)).collect();
                let latent: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
                let k = rng.random_range(0..=4);
                let nbrs = (0..k).map(|d| (rng.random_range(0..4), dirs[d])).collect();
                (obs, rng.random_range(0..4), nbrs, latent, next)
            })
            .collect();
        let queries: Vec<IntrinsicQuery<'_>> = data
            .iter()
            .map(|(o, a, n, m, x)| IntrinsicQuery {
                obs: o,
                action: *a,
                neighbors: n,
                latent: m,
                next_obs: x,
            })
            .collect();
        let r = intrinsic_rewards(&store, &dec, &queries, IntrinsicTerms::BOTH).map_err(|e| e.to_string())?;
        max_r = r.into_iter().fold(max_r, f64::max);
    }

    // Output layers set by hand: reward heads differ by 0.5, observation
    // heads by a vector of norm 1.2, whatever the inputs.
    let mut zero_store = ParamStore::new();
    let zero = DecoderSet::new(&mut zero_store, &cfg, true, &mut rng).map_err(|e| e.to_string())?;
    let o = [0.3; OBS_DIM];
    let m = [0.1; 5];
    let one = [(2, Direction::N)];
    let two = [(2, Direction::N), (1, Direction::W)];
    let query = |neighbors| IntrinsicQuery {
        obs: &o,
        action: 1,
        neighbors,
        latent: &m,
        next_obs: &o,
    };
    let r_zero = intrinsic_rewards(&zero_store, &zero, &[query(&two[..])], IntrinsicTerms::BOTH).map_err(|e| e.to_string())?[0];
    let mut hand = zero_store.clone();
    let bias = |head: &metavim::diffnet::Mlp| head.output_layer().bias;
    hand.value_mut(bias(&zero.reward_self)).data_mut()[0] = 0.5;
    let obs_bias = hand.value_mut(bias(&zero.obs_self)).data_mut();
    obs_bias[0] = 0.72;
    obs_bias[1] = 0.96;
    let r_one = intrinsic_rewards(&hand, &zero, &[query(&one[..])], IntrinsicTerms::BOTH).map_err(|e| e.to_string())?[0];
    let r_two = intrinsic_rewards(&hand, &zero, &[query(&two[..])], IntrinsicTerms::BOTH).map_err(|e| e.to_string())?[0];
    check(
        max_r <= 0.0 && r_zero == 0.0 && (r_one + 1.7).abs() < 1e-12 && (r_two - 2.0 * r_one).abs() < 1e-12,
        format!("max r_int {max_r:.3e} over 1e5 inputs; zero heads {r_zero}; one neighbour {r_one:.12}; two {r_two:.12}"),
    )
}

fn meta_test_transfer() -> Outcome {
    let t = trained().as_ref().map_err(|e| e.clone())?;
    let target = ExperimentConfig {
        seeds: vec![0, 1, 2],
        eval_mode: ActMode::Greedy,
        ..grid_config(3, 3)
    };
    let before = Learner::from_checkpoint(&t.checkpoint).map_err(|e| e.to_string())?.checksum();
    let json_before = t.checkpoint.to_json().map_err(|e| e.to_string())?;
    let records = meta_test(&t.checkpoint, &target).map_err(|e| e.to_string())?;
    let after = Learner::from_checkpoint(&t.checkpoint).map_err(|e| e.to_string())?.checksum();
    let unchanged = before == after && json_before == t.checkpoint.to_json().map_err(|e| e.to_string())?;
    let learned = mean_travel_time(&records).map_err(|e| e.to_string())?;
    let random = run_classical(&target, ControllerKind::Random)
        .map_err(|e| e.to_string())?
        .mean_travel_time_s;
    check(
        unchanged && learned < random,
        format!("3x3 seeds 0,1,2: transferred {learned:.2} s vs random {random:.2} s; parameters unchanged: {unchanged}"),
    )
}

fn ablation_harness() -> Outcome {
    let cfg = ExperimentConfig {
        iterations: 10,
        seeds: vec![0],
        ..grid_config(2, 2)
    };
    let table = run_ablation(&cfg).map_err(|e| e.to_string())?;
    let shape_ok = table.rows.len() == 5 && table.rows.iter().all(|r| r.travel_time_s.len() == 1);
    let finite = table
        .rows
        .iter()
        .all(|r| r.travel_time_s.iter().all(|v| v.is_finite()) && r.training.len() == 10);
    let latent_int = table
        .row(Variant::Latent)
        .map(|r| r.training.iter().all(|m| m.int_reward == 0.0))
        .unwrap_or(false);
    let summary = table
        .rows
        .iter()
        .map(|r| format!("{} {:.2}", r.variant, r.travel_time_s[0]))
        .collect::<Vec<_>>()
        .join(", ");
    check(
        shape_ok && finite && latent_int,
        format!("5x1 table [{summary}]; latent variant r_int == 0: {latent_int}"),
    )
}

fn buffer_contracts() -> Outcome {
    let mut cfg = ExperimentConfig {
        iterations: 12,
        seeds: vec![0],
        ..grid_config(3, 3)
    };
    cfg.hyperparameters.mvae_buffer_size = FIFO_CAPACITY;
    cfg.hyperparameters.mvae_minibatch = 5;
    let out = meta_train(&cfg, 0, |_| Ok(())).map_err(|e| e.to_string())?;
    let a = &out.audit;
    let pushed = a.trajectories_pushed as usize;
    let per_iter = 9;
    let expected: Vec<String> = (pushed - FIFO_CAPACITY..pushed)
        .map(|k| {
            let (iter, node) = (k / per_iter, k % per_iter);
            format!("mixed_low/seed0/iter{iter}/intersection_{}_{}", node / 3, node % 3)
        })
        .collect();
    let fifo = a.trajectory_buffer_len == FIFO_CAPACITY && a.retained_tasks == expected;
    check(
        a.max_rollout_len <= 60 && a.max_len_after_update == 0 && a.ppo_updates == 12 * 12 && fifo,
        format!(
            "rollout max {} (cap 60), after-update max {}, {} PPO updates; {} trajectories pushed, {} retained, oldest `{}`",
            a.max_rollout_len,
            a.max_len_after_update,
            a.ppo_updates,
            pushed,
            a.trajectory_buffer_len,
            a.retained_tasks.first().cloned().unwrap_or_default()
        ),
    )
}

fn checkpoint_round_trip() -> Outcome {
    let t = trained().as_ref().map_err(|e| e.clone())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (p1, p2) = (dir.path().join("a.json"), dir.path().join("b.json"));
    t.checkpoint.save(&p1).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&p1).map_err(|e| e.to_string())?;
    loaded.save(&p2).map_err(|e| e.to_string())?;
    let (b1, b2) = (std::fs::read(&p1).unwrap_or_default(), std::fs::read(&p2).unwrap_or_default());
    let cfg = ExperimentConfig {
        seeds: vec![0, 1, 2],
        ..t.config.clone()
    };
    let strip = |v: Vec<MetricsRecord>| v.into_iter().map(|r| r.without_wall()).collect::<Vec<_>>();
    let before = strip(meta_test(&t.checkpoint, &cfg).map_err(|e| e.to_string())?);
    let after = strip(meta_test(&loaded, &cfg).map_err(|e| e.to_string())?);
    let final_eval = t.checkpoint.meta["final_eval"]["avg_travel_time_s"].as_f64();
    let replay = before.iter().find(|r| r.seed == 0).map(|r| r.avg_travel_time_s);
    check(
        !b1.is_empty() && b1 == b2 && before == after && final_eval.is_some() && final_eval == replay,
        format!(
            "{} bytes identical after save-load-save; meta_test rows identical; seed-0 replay {:.3} s = stored {:.3} s",
            b1.len(),
            replay.unwrap_or(f64::NAN),
            final_eval.unwrap_or(f64::NAN)
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 gradient oracle", gradient_oracle),
        ("2 KL closed form", kl_closed_form),
        ("3 conservation + determinism", conservation_and_determinism),
        ("4 baseline ordering", baseline_ordering),
        ("5 learning signal", learning_signal),
        ("6 intrinsic-reward properties", intrinsic_properties),
        ("7 meta-test transfer", meta_test_transfer),
        ("8 ablation harness", ablation_harness),
        ("9 buffer contracts", buffer_contracts),
        ("10 checkpoint round-trip", checkpoint_round_trip),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = run();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
