//! Ground-truth world for exercising the learner and solver: synthesizes
//! noisy timing telemetry from a hidden cluster spec, runs an event-driven
//! bucket pipeline, and draws synthetic gradients with known moments.
//!
//! Determinism contract: every random quantity comes from a counter-derived
//! ChaCha substream keyed by (seed, purpose, epoch, batch, node), so the same
//! seed and configuration reproduce a run bit for bit and adding nodes never
//! perturbs existing streams.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::TimingObservation;
use crate::perf_model::{Allocation, ClusterSpec};

const PURPOSE_TIMING: u64 = 1;
const PURPOSE_GRADIENTS: u64 = 2;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent deterministic stream for a (seed, label...) tuple.
pub fn substream(seed: u64, labels: &[u64]) -> ChaCha12Rng {
    let mut state = splitmix(seed ^ 0xA076_1D64_78BD_642F);
    for &label in labels {
        state = splitmix(state ^ label);
    }
    ChaCha12Rng::seed_from_u64(state)
}

// Multiplicative noise factor: lognormal with mean exactly 1 and the given
// coefficient of variation.
fn lognormal_factor<R: Rng + ?Sized>(rng: &mut R, cv: f64) -> f64 {
    if cv == 0.0 {
        return 1.0;
    }
    let sigma2 = (1.0 + cv * cv).ln();
    let z: f64 = StandardNormal.sample(rng);
    (-0.5 * sigma2 + sigma2.sqrt() * z).exp()
}

/// True gradient mean vector and total per-sample variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientTruth {
    pub mean: Vec<f64>,
    pub tr_sigma: f64,
}

impl GradientTruth {
    /// A `dim`-dimensional truth with the given squared norm, noise spread
    /// isotropically across components.
    pub fn isotropic(g_sq_norm: f64, tr_sigma: f64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter(
                "gradient dimension must be >= 1".into(),
            ));
        }
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(g_sq_norm) || !ok(tr_sigma) {
            return Err(Error::InvalidParameter(
                "gradient moments must be finite and non-negative".into(),
            ));
        }
        let component = (g_sq_norm / dim as f64).sqrt();
        Ok(Self {
            mean: vec![component; dim],
            tr_sigma,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn g_sq_norm(&self) -> f64 {
        self.mean.iter().map(|x| x * x).sum()
    }
}

/// Hidden true world: the cluster spec the learner must recover, timing noise
/// level, bucket count, gradient truth, and the run seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthWorld {
    pub spec: ClusterSpec,
    pub noise_cv: f64,
    pub n_buckets: usize,
    pub gradient_truth: GradientTruth,
    pub seed: u64,
}

impl TruthWorld {
    pub fn new(
        spec: ClusterSpec,
        noise_cv: f64,
        n_buckets: usize,
        gradient_truth: GradientTruth,
        seed: u64,
    ) -> Result<Self> {
        if !noise_cv.is_finite() || noise_cv < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "noise coefficient of variation must be >= 0, got {noise_cv}"
            )));
        }
        if n_buckets < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 gradient buckets, got {n_buckets}"
            )));
        }
        Ok(Self {
            spec,
            noise_cv,
            n_buckets,
            gradient_truth,
            seed,
        })
    }

    /// Simulate one synchronized batch. Per-node noise multiplies the
    /// non-backprop phase and, with independent factors, the first-bucket and
    /// tail segments of backprop, so the measured overlap ratio is itself
    /// noisy while each phase keeps its true mean.
    pub fn simulate_batch(&self, alloc: &Allocation, epoch: u64, batch: u64) -> Result<BatchTrace> {
        let n = self.spec.len();
        if alloc.locals().len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: alloc.locals().len(),
            });
        }
        let comm = self.spec.comm();
        let gamma = comm.gamma;

        let mut realized = Vec::with_capacity(n);
        for (node, &b) in self.spec.nodes().iter().zip(alloc.locals()) {
            if b < 0.0 {
                return Err(Error::NegativeBatch(b));
            }
            let mut rng = substream(
                self.seed,
                &[PURPOSE_TIMING, epoch, batch, node.node_id as u64],
            );
            let e_a = lognormal_factor(&mut rng, self.noise_cv);
            let e_first = lognormal_factor(&mut rng, self.noise_cv);
            let e_tail = lognormal_factor(&mut rng, self.noise_cv);
            let p = node.backprop(b);
            realized.push(RealizedNode {
                a: node.phase_a(b) * e_a,
                first: gamma * p * e_first,
                tail: (1.0 - gamma) * p * e_tail,
            });
        }

        let (trace, waits) = run_pipeline(&realized, comm.t_o, comm.t_u, self.n_buckets);
        let batch_time = *trace.sync_end.last().expect("at least two buckets");

        let observations = realized
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let p = r.first + r.tail;
                TimingObservation {
                    epoch,
                    node_id: i,
                    b: alloc.locals()[i],
                    a_time: r.a,
                    p_time: p,
                    sync_start_obs: r.a + r.first,
                    batch_time_obs: batch_time,
                    gamma_obs: if p > 0.0 { r.first / p } else { gamma },
                    t_o_obs: comm.t_o + waits[i].overlappable,
                    t_u_obs: comm.t_u + waits[i].last,
                }
            })
            .collect();

        Ok(BatchTrace {
            observations,
            batch_time,
            pipeline: trace,
        })
    }

    /// Per-sample gradient draw: node `i` averages `b_i` i.i.d. vectors from
    /// `N(G, (tr_sigma/d) I)`; the global gradient weights the node means by
    /// their batch-size ratios.
    pub fn sample_gradients(
        &self,
        alloc: &Allocation,
        epoch: u64,
        batch: u64,
    ) -> Result<GradientSample> {
        self.sample_gradients_inner(alloc, epoch, batch, false)
    }

    /// Same distribution as [`sample_gradients`](Self::sample_gradients) but
    /// draws each node mean directly from `N(G, tr_sigma/(d b_i) I)`; exact
    /// for Gaussian samples and far cheaper for Monte-Carlo volumes.
    pub fn sample_local_means(
        &self,
        alloc: &Allocation,
        epoch: u64,
        batch: u64,
    ) -> Result<GradientSample> {
        self.sample_gradients_inner(alloc, epoch, batch, true)
    }

    fn sample_gradients_inner(
        &self,
        alloc: &Allocation,
        epoch: u64,
        batch: u64,
        direct_means: bool,
    ) -> Result<GradientSample> {
        let n = self.spec.len();
        if alloc.locals().len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: alloc.locals().len(),
            });
        }
        let ints = alloc.as_integers().ok_or_else(|| {
            Error::InvalidParameter("gradient sampling needs an integer allocation".into())
        })?;
        if let Some(&bad) = ints.iter().find(|&&b| b < 1) {
            return Err(Error::InvalidParameter(format!(
                "gradient sampling needs at least one sample per node, got {bad}"
            )));
        }
        let d = self.gradient_truth.dim();
        let g = &self.gradient_truth.mean;
        let total = alloc.total() as f64;
        let component_var = self.gradient_truth.tr_sigma / d as f64;

        let mut local_means = Vec::with_capacity(n);
        let mut local_sq_norms = Vec::with_capacity(n);
        let mut global_mean = vec![0.0; d];
        for (i, &b) in ints.iter().enumerate() {
            let mut rng = substream(self.seed, &[PURPOSE_GRADIENTS, epoch, batch, i as u64]);
            let mean = if direct_means {
                let sd = (component_var / b as f64).sqrt();
                (0..d)
                    .map(|c| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        g[c] + sd * z
                    })
                    .collect::<Vec<f64>>()
            } else {
                let sd = component_var.sqrt();
                let mut acc = vec![0.0; d];
                for _ in 0..b {
                    for (c, slot) in acc.iter_mut().enumerate() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *slot += g[c] + sd * z;
                    }
                }
                acc.iter().map(|x| x / b as f64).collect()
            };
            let ratio = b as f64 / total;
            for (c, slot) in global_mean.iter_mut().enumerate() {
                *slot += ratio * mean[c];
            }
            local_sq_norms.push(mean.iter().map(|x| x * x).sum());
            local_means.push(mean);
        }
        let global_sq_norm = global_mean.iter().map(|x| x * x).sum();
        Ok(GradientSample {
            local_means,
            local_sq_norms,
            global_mean,
            global_sq_norm,
        })
    }
}

/// Gradient norms and means for one synchronized batch.
#[derive(Debug, Clone)]
pub struct GradientSample {
    pub local_means: Vec<Vec<f64>>,
    pub local_sq_norms: Vec<f64>,
    pub global_mean: Vec<f64>,
    pub global_sq_norm: f64,
}

struct RealizedNode {
    a: f64,
    first: f64,
    tail: f64,
}

struct NodeWaits {
    overlappable: f64,
    last: f64,
}

/// Event log of one pipelined batch: per-node bucket-ready times and the
/// global synchronization window of every bucket.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineTrace {
    /// ready[i][j]: node i finishes computing bucket j
    pub ready: Vec<Vec<f64>>,
    /// start of bucket j's collective synchronization
    pub sync_start: Vec<f64>,
    /// end of bucket j's collective synchronization
    pub sync_end: Vec<f64>,
}

/// One simulated batch: the telemetry every node reports, the realized batch
/// time, and the full bucket event log.
#[derive(Debug, Clone)]
pub struct BatchTrace {
    pub observations: Vec<TimingObservation>,
    pub batch_time: f64,
    pub pipeline: PipelineTrace,
}

// Bucket j of node i is ready at a + first + j*tail/(nb-1); bucket j's
// collective starts once every node has posted it and the previous bucket is
// synchronized, and lasts t_o/(nb-1) (t_u for the last). A node's observed
// per-bucket communication time is the span of its collective call, so nodes
// that wait for peers book that idle gap as communication.
fn run_pipeline(
    nodes: &[RealizedNode],
    t_o: f64,
    t_u: f64,
    n_buckets: usize,
) -> (PipelineTrace, Vec<NodeWaits>) {
    let nb = n_buckets;
    let tail_step = (nb - 1) as f64;
    let ready: Vec<Vec<f64>> = nodes
        .iter()
        .map(|r| {
            (0..nb)
                .map(|j| r.a + r.first + j as f64 * r.tail / tail_step)
                .collect()
        })
        .collect();

    let mut sync_start = Vec::with_capacity(nb);
    let mut sync_end = Vec::with_capacity(nb);
    let mut waits: Vec<NodeWaits> = nodes
        .iter()
        .map(|_| NodeWaits {
            overlappable: 0.0,
            last: 0.0,
        })
        .collect();
    let mut prev_end = f64::NEG_INFINITY;
    for j in 0..nb {
        let duration = if j + 1 == nb { t_u } else { t_o / tail_step };
        let start = ready
            .iter()
            .map(|r| r[j].max(prev_end))
            .fold(f64::NEG_INFINITY, f64::max);
        for (i, r) in ready.iter().enumerate() {
            let own_post = r[j].max(prev_end);
            let wait = start - own_post;
            if j + 1 == nb {
                waits[i].last += wait;
            } else {
                waits[i].overlappable += wait;
            }
        }
        let end = start + duration;
        sync_start.push(start);
        sync_end.push(end);
        prev_end = end;
    }
    (
        PipelineTrace {
            ready,
            sync_start,
            sync_end,
        },
        waits,
    )
}

/// Event-driven oracle for the two-pattern closed form: the realized batch
/// time of nodes with phase times `a_i`, backprop times `p_i`, shared overlap
/// ratio `gamma`, and the given bucket synchronization times.
pub fn simulate_pipeline(
    a: &[f64],
    p: &[f64],
    gamma: f64,
    t_o: f64,
    t_u: f64,
    n_buckets: usize,
) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::EmptyInput("pipeline needs at least one node"));
    }
    if a.len() != p.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            got: p.len(),
        });
    }
    if n_buckets < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 gradient buckets, got {n_buckets}"
        )));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidParameter(format!(
            "gamma must lie in [0, 1], got {gamma}"
        )));
    }
    let ok = |x: f64| x.is_finite() && x >= 0.0;
    if !ok(t_o) || !ok(t_u) {
        return Err(Error::InvalidParameter(
            "synchronization times must be finite and non-negative".into(),
        ));
    }
    let nodes: Vec<RealizedNode> = a
        .iter()
        .zip(p)
        .map(|(&a, &p)| RealizedNode {
            a,
            first: gamma * p,
            tail: (1.0 - gamma) * p,
        })
        .collect();
    let (trace, _) = run_pipeline(&nodes, t_o, t_u, n_buckets);
    Ok(*trace.sync_end.last().unwrap())
}

/// Draw one joint observation of the per-node and global squared gradient
/// norms under the delta-method moment model: per-node norms are independent
/// with variance `4 |G|^2 tr_sigma / b_i`, the global norm has variance
/// `4 |G|^2 tr_sigma / B` and covariance `4 b_i |G|^2 tr_sigma / B^2` with
/// node `i`. This is the regime in which the closed-form estimator variances
/// hold and is used to validate them by Monte Carlo.
pub fn sample_sq_norms_delta_model<R: Rng + ?Sized>(
    b: &[f64],
    total: f64,
    g_sq_norm: f64,
    tr_sigma: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, f64)> {
    if b.is_empty() {
        return Err(Error::EmptyInput("need at least one node"));
    }
    for (i, &bi) in b.iter().enumerate() {
        if !(bi > 0.0 && bi < total) {
            return Err(Error::DegenerateBatch {
                node: i,
                b: bi,
                total,
            });
        }
    }
    let v = 4.0 * g_sq_norm * tr_sigma;
    let mut locals = Vec::with_capacity(b.len());
    let mut global = g_sq_norm + tr_sigma / total;
    let mut coupled_var = 0.0;
    for &bi in b {
        let z: f64 = StandardNormal.sample(rng);
        locals.push(g_sq_norm + tr_sigma / bi + (v / bi).sqrt() * z);
        // coupling coefficient c_i with c_i * sqrt(v/b_i) = v*b_i/B^2
        let c = v.sqrt() * bi.powf(1.5) / (total * total);
        global += c * z;
        coupled_var += c * c;
    }
    let residual = (v / total - coupled_var).max(0.0);
    let z0: f64 = StandardNormal.sample(rng);
    global += residual.sqrt() * z0;
    Ok((locals, global))
}
