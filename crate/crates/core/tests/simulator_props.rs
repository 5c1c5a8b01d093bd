//! Property tests for the event-driven pipeline and the telemetry generator.

use optperf_core::fixture::{random_cluster, rng};
use optperf_core::{simulate_pipeline, Allocation, GradientTruth, TruthWorld};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    // the pipeline and the per-node two-pattern closed form are the same
    // function under even bucket distribution
    #[test]
    fn pipeline_equals_two_pattern_closed_form(
        a in proptest::collection::vec(1e-4..2.0f64, 1..12),
        p_raw in proptest::collection::vec(1e-4..2.0f64, 1..12),
        gamma in 0.01..0.99f64,
        t_o in 0.0..1.5f64,
        t_u in 0.0..0.5f64,
        n_buckets in 2usize..40,
    ) {
        let n = a.len().min(p_raw.len());
        let a = &a[..n];
        let p = &p_raw[..n];
        let simulated = simulate_pipeline(a, p, gamma, t_o, t_u, n_buckets).unwrap();
        let closed = a.iter().zip(p).map(|(&ai, &pi)| {
            (ai + pi + t_u).max(ai + gamma * pi + t_o + t_u)
        }).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!((simulated - closed).abs() <= 1e-9,
            "pipeline {simulated} vs closed form {closed}");
    }

    // batch time never decreases when any node's local batch grows
    #[test]
    fn cluster_batch_time_is_monotone_in_every_local(seed in 0u64..1000, bump in 1u64..40) {
        let mut r = rng(seed);
        let n = 2 + (seed % 5) as usize;
        let spec = random_cluster(&mut r, n);
        let total: u64 = r.random_range(n as u64 * 10..n as u64 * 100);
        let raw: Vec<f64> = (0..n).map(|_| -(r.random::<f64>()).ln()).collect();
        let s: f64 = raw.iter().sum();
        let locals: Vec<f64> = raw.iter().map(|x| x / s * total as f64).collect();
        let base = Allocation::new(total, locals.clone()).unwrap();
        let t0 = spec.cluster_batch_time(&base).unwrap();
        for i in 0..n {
            let mut grown = locals.clone();
            grown[i] += bump as f64;
            let grown = Allocation::new(total + bump, {
                // keep the others fixed; only node i grows
                grown
            }).unwrap();
            let t1 = spec.cluster_batch_time(&grown).unwrap();
            prop_assert!(t1 >= t0 - 1e-12, "node {i}: {t1} < {t0}");
        }
    }
}

#[test]
fn serialized_traces_are_byte_identical_across_runs() {
    let mut r = rng(77);
    let spec = random_cluster(&mut r, 4);
    let world = TruthWorld::new(
        spec,
        0.07,
        8,
        GradientTruth::isotropic(1.0, 25.0, 32).unwrap(),
        2024,
    )
    .unwrap();
    let alloc = Allocation::new(120, vec![40.0, 30.0, 30.0, 20.0]).unwrap();
    let one: Vec<String> = (0..10)
        .map(|b| {
            let t = world.simulate_batch(&alloc, 2, b).unwrap();
            format!(
                "{}|{:?}|{:?}",
                t.batch_time.to_bits(),
                t.observations
                    .iter()
                    .map(|o| (
                        o.a_time.to_bits(),
                        o.gamma_obs.to_bits(),
                        o.t_o_obs.to_bits()
                    ))
                    .collect::<Vec<_>>(),
                t.pipeline
                    .sync_end
                    .iter()
                    .map(|x| x.to_bits())
                    .collect::<Vec<_>>()
            )
        })
        .collect();
    let two: Vec<String> = (0..10)
        .map(|b| {
            let t = world.simulate_batch(&alloc, 2, b).unwrap();
            format!(
                "{}|{:?}|{:?}",
                t.batch_time.to_bits(),
                t.observations
                    .iter()
                    .map(|o| (
                        o.a_time.to_bits(),
                        o.gamma_obs.to_bits(),
                        o.t_o_obs.to_bits()
                    ))
                    .collect::<Vec<_>>(),
                t.pipeline
                    .sync_end
                    .iter()
                    .map(|x| x.to_bits())
                    .collect::<Vec<_>>()
            )
        })
        .collect();
    assert_eq!(one, two);
}

// adding a node must not perturb the random streams of existing nodes
#[test]
fn node_streams_are_independent_of_cluster_growth() {
    let mut r = rng(78);
    let spec4 = random_cluster(&mut r, 4);
    let spec3 =
        optperf_core::ClusterSpec::new(spec4.nodes()[..3].to_vec(), spec4.comm().clone(), None)
            .unwrap();
    let make_world = |spec| {
        TruthWorld::new(
            spec,
            0.05,
            8,
            GradientTruth::isotropic(1.0, 25.0, 16).unwrap(),
            55,
        )
        .unwrap()
    };
    let w3 = make_world(spec3);
    let w4 = make_world(spec4);
    let a3 = Allocation::new(90, vec![30.0; 3]).unwrap();
    let a4 = Allocation::new(120, vec![30.0; 4]).unwrap();
    let t3 = w3.simulate_batch(&a3, 0, 5).unwrap();
    let t4 = w4.simulate_batch(&a4, 0, 5).unwrap();
    for i in 0..3 {
        // same node, same batch size, same stream -> identical noisy phases
        assert_eq!(
            t3.observations[i].a_time.to_bits(),
            t4.observations[i].a_time.to_bits()
        );
        assert_eq!(
            t3.observations[i].p_time.to_bits(),
            t4.observations[i].p_time.to_bits()
        );
    }
}

#[test]
fn noisy_gamma_observations_center_on_truth() {
    let mut r = rng(79);
    let spec = random_cluster(&mut r, 3);
    let gamma = spec.comm().gamma;
    let world = TruthWorld::new(
        spec,
        0.10,
        8,
        GradientTruth::isotropic(1.0, 25.0, 16).unwrap(),
        4,
    )
    .unwrap();
    let alloc = Allocation::new(120, vec![40.0; 3]).unwrap();
    let mut sum = 0.0;
    let mut count = 0.0;
    let mut spread = 0.0;
    for b in 0..400 {
        let t = world.simulate_batch(&alloc, 0, b).unwrap();
        for o in &t.observations {
            assert!(o.gamma_obs > 0.0 && o.gamma_obs < 1.0);
            sum += o.gamma_obs;
            spread += (o.gamma_obs - gamma) * (o.gamma_obs - gamma);
            count += 1.0;
        }
    }
    let mean = sum / count;
    assert!(
        (mean - gamma).abs() < 0.01,
        "mean gamma_obs {mean} vs true {gamma}"
    );
    assert!(
        spread / count > 0.0,
        "gamma observations must actually be noisy"
    );
}
