use ppvqa::data::bundled_iris;
use ppvqa::engine::{NoiseProfile, Shots};
use ppvqa::harness::{run_experiment, ExperimentConfig, NoiseSpec};
use ppvqa::noise_lab::{generate_profiles_for_differ, NoiseInstance, DIFFER_MEAN};
use ppvqa::runtime::{partition_parameters, train, TrainConfig};

#[test]
fn noiseless_training_reaches_target() {
    let ds = bundled_iris(1);
    let out = train(
        &TrainConfig {
            profiles: (0..4).map(NoiseProfile::noiseless).collect(),
            shots: Shots::Analytic,
            seed: 3,
            ..TrainConfig::default()
        },
        &ds,
    )
    .unwrap();
    assert!(out.converged);
    assert!(out.final_accuracy >= 0.96);
    assert_eq!(out.history.len() as u64, out.iterations);
    assert_eq!(out.ledger.transmitted, out.iterations * 8);
    assert_eq!(out.ledger.circuits, out.iterations * 5 * (4 + 2 * 8));
}

#[test]
fn residuals_follow_groups_under_alternation() {
    let ds = bundled_iris(0);
    let config = TrainConfig {
        profiles: vec![
            NoiseProfile::new(0, 0.01).unwrap(),
            NoiseProfile::new(1, 0.05).unwrap(),
            NoiseProfile::new(2, 0.02).unwrap(),
            NoiseProfile::new(3, 0.03).unwrap(),
        ],
        alternate: true,
        threshold: Some(0.15),
        max_iterations: 97,
        stop_on_convergence: false,
        seed: 12,
        ..TrainConfig::default()
    };
    let out = train(&config, &ds).unwrap();
    let audit = out.audit.unwrap();
    let partition = partition_parameters(8, 4).unwrap();
    for (g, slot) in audit.slots.iter().enumerate() {
        assert_eq!(slot.group, g);
        assert_eq!(slot.indices, partition.group(g));
        assert!(slot.residual.iter().all(|r| r.abs() <= 0.15));
    }
    assert!(audit.max_relative_error() < 1e-12);
    assert!(out.ledger.transmitted < 97 * 8);
}

#[test]
fn fixed_noise_instances_feed_experiments() {
    let ds = bundled_iris(0);
    let instance = generate_profiles_for_differ(4, 0.4, DIFFER_MEAN, 9).unwrap();
    let instance = NoiseInstance::from_json(&instance.to_json().unwrap()).unwrap();
    let config = ExperimentConfig {
        nodes: 4,
        noise: NoiseSpec::Fixed { instance: instance.clone() },
        shots: Shots::Sampled(1024),
        repetitions: 3,
        max_iterations: 10,
        ..ExperimentConfig::default()
    };
    let art = run_experiment(&config, &ds).unwrap();
    assert_eq!(art.summary.failed, 0);
    assert!(art.runs.iter().all(|r| r.noise.as_ref() == Some(&instance)));
    // Each repetition draws its own split.
    assert_ne!(art.runs[0].split_seed, art.runs[1].split_seed);

    let wrong = ExperimentConfig { nodes: 2, ..config };
    let art = run_experiment(&wrong, &ds).unwrap();
    assert_eq!(art.summary.failed, 3);
}

#[test]
fn shared_seeds_align_runs_across_node_counts() {
    let ds = bundled_iris(0);
    let run = |m: usize| {
        train(
            &TrainConfig {
                profiles: (0..m).map(NoiseProfile::noiseless).collect(),
                shots: Shots::Sampled(4096),
                max_iterations: 10,
                stop_on_convergence: false,
                seed: 2,
                ..TrainConfig::default()
            },
            &ds,
        )
        .unwrap()
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.initial_theta, b.initial_theta);
    // Shifted circuits share shot streams across node counts, but each
    // group runs its own forward pass.
    assert_ne!(a.theta, b.theta);
}
