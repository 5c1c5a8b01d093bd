//! Learner validation against simulator-generated telemetry.

use optperf_core::fixture::rng;
use optperf_core::{
    estimate_gamma, Allocation, ClusterSpec, CommModel, GradientTruth, LearnedModel,
    NodeComputeModel, TruthWorld,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn strong_straggler_spec() -> ClusterSpec {
    // node 2 dominates every phase so it never waits for peers
    let nodes = vec![
        NodeComputeModel::new(0, 0.0005, 0.010, 0.0010, 0.020).unwrap(),
        NodeComputeModel::new(1, 0.0010, 0.020, 0.0020, 0.040).unwrap(),
        NodeComputeModel::new(2, 0.0020, 0.040, 0.0040, 0.080).unwrap(),
    ];
    ClusterSpec::new(nodes, CommModel::new(0.4, 0.05, 0.02).unwrap(), None).unwrap()
}

fn world(noise_cv: f64, seed: u64) -> TruthWorld {
    TruthWorld::new(
        strong_straggler_spec(),
        noise_cv,
        8,
        GradientTruth::isotropic(1.0, 10.0, 16).unwrap(),
        seed,
    )
    .unwrap()
}

fn feed(
    world: &TruthWorld,
    model: &mut LearnedModel,
    alloc: &Allocation,
    epoch: u64,
    batches: u64,
) {
    let mut obs = Vec::new();
    for b in 0..batches {
        obs.extend(world.simulate_batch(alloc, epoch, b).unwrap().observations);
    }
    model.update(&obs);
}

#[test]
fn noiseless_telemetry_recovers_the_exact_spec_after_two_epochs() {
    let w = world(0.0, 11);
    let mut model = LearnedModel::new(3);
    feed(
        &w,
        &mut model,
        &Allocation::new(120, vec![40.0; 3]).unwrap(),
        0,
        3,
    );
    assert!(!model.ready(), "one batch size cannot fit a line");
    feed(
        &w,
        &mut model,
        &Allocation::new(120, vec![70.0, 35.0, 15.0]).unwrap(),
        1,
        3,
    );
    assert!(model.ready());
    let learned = model.to_cluster_spec(None).unwrap();
    let truth = strong_straggler_spec();
    for (l, t) in learned.nodes().iter().zip(truth.nodes()) {
        assert!((l.q - t.q).abs() < 1e-12);
        assert!((l.s - t.s).abs() < 1e-12);
        assert!((l.k - t.k).abs() < 1e-12);
        assert!((l.m - t.m).abs() < 1e-12);
    }
    assert!((learned.comm().gamma - 0.4).abs() < 1e-12);
    assert!((learned.comm().t_o - 0.05).abs() < 1e-12);
    assert!((learned.comm().t_u - 0.02).abs() < 1e-12);
}

#[test]
fn noisy_telemetry_recovers_coefficients_within_five_percent() {
    // 5% multiplicative noise, 20 observations per batch size over 32..=256;
    // intercepts sized so every coefficient carries real signal
    let nodes = vec![
        NodeComputeModel::new(0, 0.0008, 0.080, 0.0016, 0.120).unwrap(),
        NodeComputeModel::new(1, 0.0012, 0.100, 0.0024, 0.150).unwrap(),
        NodeComputeModel::new(2, 0.0020, 0.140, 0.0040, 0.200).unwrap(),
    ];
    let truth = ClusterSpec::new(nodes, CommModel::new(0.4, 0.05, 0.02).unwrap(), None).unwrap();
    let w = TruthWorld::new(
        truth.clone(),
        0.05,
        8,
        GradientTruth::isotropic(1.0, 10.0, 16).unwrap(),
        12,
    )
    .unwrap();
    let mut model = LearnedModel::new(3);
    for (epoch, &b) in [32.0f64, 64.0, 96.0, 128.0, 160.0, 192.0, 224.0, 256.0]
        .iter()
        .enumerate()
    {
        let total = (3.0 * b) as u64;
        feed(
            &w,
            &mut model,
            &Allocation::new(total, vec![b; 3]).unwrap(),
            epoch as u64,
            20,
        );
    }
    let learned = model.to_cluster_spec(None).unwrap();
    for (l, t) in learned.nodes().iter().zip(truth.nodes()) {
        assert!((l.q / t.q - 1.0).abs() < 0.05, "q: {} vs {}", l.q, t.q);
        assert!((l.k / t.k - 1.0).abs() < 0.05, "k: {} vs {}", l.k, t.k);
        assert!((l.s / t.s - 1.0).abs() < 0.05, "s: {} vs {}", l.s, t.s);
        assert!((l.m / t.m - 1.0).abs() < 0.05, "m: {} vs {}", l.m, t.m);
    }
    assert!((learned.comm().gamma / 0.4 - 1.0).abs() < 0.05);
}

#[test]
fn min_rule_returns_the_uninflated_node_under_waiting() {
    // noiseless: two fast nodes wait for node 2 and over-report; the
    // straggler reports the exact communication time
    let w = world(0.0, 13);
    let mut model = LearnedModel::new(3);
    feed(
        &w,
        &mut model,
        &Allocation::new(120, vec![40.0; 3]).unwrap(),
        0,
        2,
    );
    feed(
        &w,
        &mut model,
        &Allocation::new(120, vec![70.0, 35.0, 15.0]).unwrap(),
        1,
        2,
    );
    let comm = model.comm().unwrap();
    assert!(
        (comm.t_comm() - 0.07).abs() < 1e-12,
        "t_comm {}",
        comm.t_comm()
    );
    // confirm waiting actually inflated someone (otherwise the test is vacuous)
    let trace = w
        .simulate_batch(&Allocation::new(120, vec![40.0; 3]).unwrap(), 0, 0)
        .unwrap();
    let max_obs = trace
        .observations
        .iter()
        .map(|o| o.t_o_obs + o.t_u_obs)
        .fold(f64::NEG_INFINITY, f64::max);
    assert!(
        max_obs > 0.07 + 1e-9,
        "no node waited; pick a stronger straggler"
    );
}

#[test]
fn estimate_comm_time_never_exceeds_the_minimum_node_mean() {
    let w = world(0.05, 14);
    let alloc = Allocation::new(120, vec![40.0; 3]).unwrap();
    let mut per_node: Vec<Vec<(f64, f64)>> = vec![Vec::new(); 3];
    for b in 0..50 {
        for o in w.simulate_batch(&alloc, 0, b).unwrap().observations {
            per_node[o.node_id].push((o.t_o_obs, o.t_u_obs));
        }
    }
    let est = optperf_core::estimate_comm_time(&per_node).unwrap();
    let min_mean = per_node
        .iter()
        .map(|obs| obs.iter().map(|(a, b)| a + b).sum::<f64>() / obs.len() as f64)
        .fold(f64::INFINITY, f64::min);
    assert!(est.t_comm() <= min_mean + 1e-12);
}

// inverse-variance pooling beats the unweighted mean when per-node noise
// levels differ
#[test]
fn inverse_variance_gamma_beats_the_plain_average() {
    let gamma_true = 0.4;
    let noise_sd = [0.01, 0.05, 0.10];
    let obs_per_node = 20;
    let trials = 10_000;
    let mut r = rng(15);
    let (mut var_ivw, mut var_mean) = (0.0, 0.0);
    for _ in 0..trials {
        let mut stats = Vec::new();
        let mut plain = 0.0;
        for &sd in &noise_sd {
            let samples: Vec<f64> = (0..obs_per_node)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut r);
                    gamma_true + sd * z
                })
                .collect();
            let mean = samples.iter().sum::<f64>() / samples.len() as f64;
            let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
                / (samples.len() - 1) as f64;
            stats.push((mean, var));
            plain += mean;
        }
        plain /= noise_sd.len() as f64;
        let pooled = estimate_gamma(&stats).unwrap();
        var_ivw += (pooled - gamma_true) * (pooled - gamma_true);
        var_mean += (plain - gamma_true) * (plain - gamma_true);
    }
    assert!(
        var_ivw < var_mean,
        "inverse-variance {var_ivw} not below unweighted {var_mean}"
    );
}

#[test]
fn refit_with_more_batch_sizes_tightens_noisy_estimates() {
    let w = world(0.05, 16);
    let truth = strong_straggler_spec();
    let mut model = LearnedModel::new(3);
    feed(
        &w,
        &mut model,
        &Allocation::new(96, vec![32.0; 3]).unwrap(),
        0,
        4,
    );
    feed(
        &w,
        &mut model,
        &Allocation::new(240, vec![80.0; 3]).unwrap(),
        1,
        4,
    );
    let two_point = model.node_model(0).unwrap().clone();
    for (epoch, b) in [48.0f64, 128.0, 192.0, 256.0].iter().enumerate() {
        let total = (3.0 * b) as u64;
        feed(
            &w,
            &mut model,
            &Allocation::new(total, vec![*b; 3]).unwrap(),
            2 + epoch as u64,
            4,
        );
    }
    let refined = model.node_model(0).unwrap();
    let err = |m: &NodeComputeModel| {
        ((m.q / truth.node(0).q - 1.0).abs()) + ((m.k / truth.node(0).k - 1.0).abs())
    };
    assert!(
        err(refined) <= err(&two_point) + 0.02,
        "refined slopes {:?} worse than two-point {:?}",
        (refined.q, refined.k),
        (two_point.q, two_point.k)
    );
    assert_eq!(model.observation_count(0), 4 * 2 + 4 * 4);
}

#[test]
fn gamma_pooling_uses_clamped_observations() {
    // extreme noise can push raw gamma observations toward the boundaries;
    // the learned pooled value must stay strictly inside (0, 1)
    let w = TruthWorld::new(
        strong_straggler_spec(),
        0.8,
        8,
        GradientTruth::isotropic(1.0, 10.0, 16).unwrap(),
        17,
    )
    .unwrap();
    let mut model = LearnedModel::new(3);
    feed(
        &w,
        &mut model,
        &Allocation::new(120, vec![40.0; 3]).unwrap(),
        0,
        30,
    );
    feed(
        &w,
        &mut model,
        &Allocation::new(120, vec![70.0, 35.0, 15.0]).unwrap(),
        1,
        30,
    );
    let g = model.gamma().unwrap();
    assert!((0.01..=0.99).contains(&g));
}

#[test]
fn ready_flag_requires_distinct_batch_sizes_per_node() {
    let w = world(0.0, 18);
    let mut model = LearnedModel::new(3);
    for epoch in 0..4 {
        feed(
            &w,
            &mut model,
            &Allocation::new(120, vec![40.0; 3]).unwrap(),
            epoch,
            5,
        );
    }
    assert!(
        !model.ready(),
        "same batch size forever must never become ready"
    );
    let mut r = rng(19);
    let _unused: f64 = r.random();
}
