use metavim::harness::{
    evaluate_seed, meta_test, meta_train, read_metrics, DeployedPolicy, ExperimentConfig, Learner, MetricsWriter,
    RoadnetSpec, Variant,
};
use metavim::netsim::SimState;

fn short(rows: usize, cols: usize, variant: Variant, iterations: usize) -> ExperimentConfig {
    ExperimentConfig {
        roadnet: RoadnetSpec::grid(rows, cols),
        iterations,
        seeds: vec![3],
        variant,
        ..ExperimentConfig::default()
    }
}

#[test]
fn zero_iterations_keep_the_initial_parameters() {
    let cfg = short(2, 2, Variant::Full, 0);
    let a = meta_train(&cfg, 3, |_| Ok(())).unwrap();
    let b = meta_train(&cfg, 3, |_| Ok(())).unwrap();
    assert!(a.metrics.is_empty());
    assert_eq!(a.audit.ppo_updates, 0);
    assert_eq!(a.audit.trajectories_pushed, 0);
    assert_eq!(a.learner.checksum(), b.learner.checksum());
    assert_eq!(a.learner.policy_store.adam_steps(), 0);
}

#[test]
fn one_iteration_on_a_single_intersection() {
    let cfg = short(1, 1, Variant::Full, 1);
    let mut seen = Vec::new();
    let out = meta_train(&cfg, 3, |r| {
        seen.push(r.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(out.metrics.len(), 1);
    assert_eq!(seen, out.metrics);
    assert_eq!(out.audit.trajectories_pushed, 1);
    assert_eq!(out.audit.ppo_updates, 12);
    // A lone intersection has no neighbours, so the intrinsic term is silent.
    assert_eq!(out.metrics[0].int_reward, 0.0);
    assert!(out.metrics[0].elbo_loss.unwrap().is_finite());
}

#[test]
fn seeded_training_is_reproducible() {
    let cfg = short(1, 2, Variant::LatentRewRs, 2);
    let a = meta_train(&cfg, 3, |_| Ok(())).unwrap();
    let b = meta_train(&cfg, 3, |_| Ok(())).unwrap();
    let strip = |v: &[metavim::harness::MetricsRecord]| v.iter().map(|r| r.without_wall()).collect::<Vec<_>>();
    assert_eq!(strip(&a.metrics), strip(&b.metrics));
    assert_eq!(a.learner.checksum(), b.learner.checksum());
    let c = meta_train(&cfg, 4, |_| Ok(())).unwrap();
    assert_ne!(a.learner.checksum(), c.learner.checksum());
}

#[test]
fn deployed_policy_replays_greedy_evaluation() {
    for variant in [Variant::Baseline, Variant::Full] {
        let cfg = short(1, 2, variant, 1);
        let learner = meta_train(&cfg, 3, |_| Ok(())).unwrap().learner;
        let expected = evaluate_seed(&learner, &cfg, &cfg.flow, 3).unwrap();

        let net = cfg.network().unwrap();
        let schedule = cfg.schedule(&net, 3).unwrap();
        let mut sim = SimState::reset(net, schedule, 3);
        let mut policy = DeployedPolicy::new(learner, &cfg);
        for _ in 0..cfg.steps_per_episode() {
            let actions = policy.step(&mut sim, cfg.control_interval_s).unwrap();
            assert_eq!(actions.len(), 2);
        }
        assert_eq!(sim.average_travel_time().unwrap(), expected.avg_travel_time_s, "{variant}");
    }
}

#[test]
fn meta_test_leaves_the_checkpoint_alone() {
    let cfg = short(1, 2, Variant::Latent, 1);
    let out = meta_train(&cfg, 3, |_| Ok(())).unwrap();
    let ckpt = out.checkpoint(&cfg, 3).unwrap();
    let before = ckpt.to_json().unwrap();
    let transfer = ExperimentConfig {
        roadnet: RoadnetSpec::grid(3, 2),
        seeds: vec![0, 1],
        ..cfg.clone()
    };
    let rows = meta_test(&ckpt, &transfer).unwrap();
    assert_eq!(rows.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![0, 1]);
    assert!(rows.iter().all(|r| r.avg_travel_time_s > 0.0 && r.elbo_loss.is_none()));
    assert_eq!(before, ckpt.to_json().unwrap());
    assert_eq!(
        Learner::from_checkpoint(&ckpt).unwrap().checksum(),
        out.learner.checksum()
    );
}

#[test]
fn classical_variants_cannot_be_trained() {
    let cfg = ExperimentConfig {
        variant: "classical:maxpressure".parse().unwrap(),
        ..short(1, 1, Variant::Full, 1)
    };
    let Err(e) = meta_train(&cfg, 0, |_| Ok(())) else {
        panic!("classical variant trained");
    };
    assert!(e.is_config());
}

#[test]
fn metrics_csv_round_trips_training_rows() {
    let cfg = short(1, 1, Variant::LatentTranRs, 2);
    let out = meta_train(&cfg, 3, |_| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    let mut w = MetricsWriter::create(&path).unwrap();
    for r in &out.metrics {
        w.write(r).unwrap();
    }
    drop(w);
    assert_eq!(read_metrics(&path).unwrap(), out.metrics);
}
