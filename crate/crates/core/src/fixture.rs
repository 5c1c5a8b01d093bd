//! Seeded random cluster generators shared by tests, the acceptance suite,
//! and the benchmarks.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::optperf::{find_optperf, solve_equal_compute, solve_equal_syncstart, Scenario};
use crate::perf_model::{ClusterSpec, CommModel, NodeComputeModel};
use crate::simulator::substream;

pub fn rng(seed: u64) -> ChaCha12Rng {
    substream(seed, &[0xF1C7])
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let u: f64 = rng.random();
    (lo.ln() + u * (hi.ln() - lo.ln())).exp()
}

/// Random heterogeneous cluster with coefficients log-uniform over two
/// decades: slopes in [1e-4, 1e-2] s/sample, intercepts in [1e-2, 1e0] s,
/// communication times in [1e-2, 1e0] s.
pub fn random_cluster<R: Rng>(rng: &mut R, n: usize) -> ClusterSpec {
    let nodes = (0..n)
        .map(|i| {
            NodeComputeModel::new(
                i,
                log_uniform(rng, 1e-4, 1e-2),
                log_uniform(rng, 1e-2, 1.0),
                log_uniform(rng, 1e-4, 1e-2),
                log_uniform(rng, 1e-2, 1.0),
            )
            .unwrap()
        })
        .collect();
    let comm = CommModel::new(
        rng.random_range(0.1..0.9),
        log_uniform(rng, 1e-2, 1.0),
        log_uniform(rng, 1e-2, 1.0),
    )
    .unwrap();
    ClusterSpec::new(nodes, comm, None).unwrap()
}

/// Random cluster whose optimum at the returned batch size is genuinely
/// mixed-bottleneck in the plain regime: both whole-cluster checks stay on
/// the simplex (no negative shares), nothing is pinned, and the ranked-prefix
/// search succeeds without the exact fallback. Resamples until one is found.
pub fn random_mixed_cluster<R: Rng>(rng: &mut R, n: usize) -> (ClusterSpec, u64) {
    loop {
        let spec = random_cluster(rng, n);
        for &batch in &[4 * n as u64, 16 * n as u64, 64 * n as u64, 256 * n as u64] {
            let checks_clean = solve_equal_compute(&spec, batch).is_ok_and(|s| !s.has_negative)
                && solve_equal_syncstart(&spec, batch).is_ok_and(|s| !s.has_negative);
            if !checks_clean {
                continue;
            }
            if let Ok(sol) = find_optperf(&spec, batch, None) {
                if matches!(sol.scenario, Scenario::Mixed { .. })
                    && sol.clamped_zero.is_empty()
                    && sol.clamped_cap.is_empty()
                    && !sol.exact_fallback
                {
                    return (spec, batch);
                }
            }
        }
    }
}

/// Three-node cluster shaped like a small mixed-GPU testbed: one fast, one
/// medium, one clearly slower node.
pub fn reference_cluster_3() -> ClusterSpec {
    let nodes = vec![
        // fast node
        NodeComputeModel::new(0, 0.40e-3, 0.020, 0.80e-3, 0.030).unwrap(),
        // medium node
        NodeComputeModel::new(1, 0.65e-3, 0.028, 1.30e-3, 0.045).unwrap(),
        // slow node
        NodeComputeModel::new(2, 1.30e-3, 0.050, 2.60e-3, 0.085).unwrap(),
    ];
    ClusterSpec::new(nodes, CommModel::new(0.35, 0.090, 0.030).unwrap(), None).unwrap()
}

/// Sixteen-node cluster shaped like a mixed fleet: four fast, four medium,
/// eight slow nodes (roughly 3.6x between the extremes). Nodes within a group
/// carry a few percent of spread, as same-model hosts do in practice; the
/// spread also keeps the per-bucket straggler stable under timing noise.
pub fn reference_cluster_16() -> ClusterSpec {
    let mut nodes = Vec::with_capacity(16);
    let mut push = |id: usize, scale: f64| {
        nodes.push(
            NodeComputeModel::new(
                id,
                scale * 0.40e-3,
                scale * 0.018,
                scale * 0.80e-3,
                scale * 0.028,
            )
            .unwrap(),
        );
    };
    for i in 0..4 {
        push(i, 1.0 + 0.04 * i as f64);
    }
    for i in 4..8 {
        push(i, 1.75 + 0.07 * (i - 4) as f64);
    }
    for i in 8..16 {
        push(i, 3.10 + 0.08 * (i - 8) as f64);
    }
    ClusterSpec::new(nodes, CommModel::new(0.35, 0.110, 0.035).unwrap(), None).unwrap()
}
