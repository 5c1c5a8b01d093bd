//! Online estimation of the cluster performance model from noisy telemetry.
//!
//! Each node's compute coefficients come from least squares of its phase
//! times against the local batch size (exact interpolation with two distinct
//! sizes, refining as more appear). The overlap ratio pools per-node
//! measurements by inverse variance; the communication time takes the
//! minimum per-node mean, since waiting nodes only ever over-report it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perf_model::{ClusterSpec, CommModel, NodeComputeModel};

/// One node's telemetry for one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingObservation {
    pub epoch: u64,
    pub node_id: usize,
    /// local batch size the node ran
    pub b: f64,
    /// data loading + forward + update time
    pub a_time: f64,
    /// backpropagation time
    pub p_time: f64,
    pub sync_start_obs: f64,
    pub batch_time_obs: f64,
    pub gamma_obs: f64,
    pub t_o_obs: f64,
    pub t_u_obs: f64,
}

/// Fitted compute model plus a flag for slopes/intercepts that had to be
/// clamped at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedCompute {
    pub model: NodeComputeModel,
    pub clamped: bool,
}

// least squares of y on x; with exactly two distinct x values this is the
// interpolating line
fn ols(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Fit one node's `(q, s)` and `(k, m)` from its observations.
pub fn fit_compute_model(observations: &[TimingObservation]) -> Result<FittedCompute> {
    if observations.len() < 2 {
        return Err(Error::InsufficientDiversity {
            node: observations.first().map_or(0, |o| o.node_id),
        });
    }
    let node = observations[0].node_id;
    let xs: Vec<f64> = observations.iter().map(|o| o.b).collect();
    let distinct = xs.iter().any(|&x| (x - xs[0]).abs() > 1e-12);
    if !distinct {
        return Err(Error::InsufficientDiversity { node });
    }
    let a: Vec<f64> = observations.iter().map(|o| o.a_time).collect();
    let p: Vec<f64> = observations.iter().map(|o| o.p_time).collect();
    let (q, s) = ols(&xs, &a);
    let (k, m) = ols(&xs, &p);

    let mut clamped = false;
    let mut clamp = |v: f64| {
        if v < 0.0 {
            clamped = true;
            0.0
        } else {
            v
        }
    };
    let (q, s, k, m) = (clamp(q), clamp(s), clamp(k), clamp(m));
    let model = NodeComputeModel::new(node, q, s, k, m)?;
    Ok(FittedCompute { model, clamped })
}

/// Pool per-node overlap-ratio estimates by inverse variance. Input is one
/// `(mean, sample_variance)` pair per node. A zero-variance node carries
/// infinite weight: if unique its mean is returned directly, otherwise the
/// zero-variance nodes are averaged with equal weight.
pub fn estimate_gamma(per_node: &[(f64, f64)]) -> Result<f64> {
    if per_node.is_empty() {
        return Err(Error::EmptyInput("gamma pooling needs at least one node"));
    }
    if let Some(&(_, bad)) = per_node.iter().find(|(_, v)| *v < 0.0) {
        return Err(Error::InvalidParameter(format!("negative variance {bad}")));
    }
    let exact: Vec<f64> = per_node
        .iter()
        .filter(|(_, v)| *v == 0.0)
        .map(|(g, _)| *g)
        .collect();
    if !exact.is_empty() {
        return Ok(exact.iter().sum::<f64>() / exact.len() as f64);
    }
    let weight_sum: f64 = per_node.iter().map(|(_, v)| 1.0 / v).sum();
    Ok(per_node.iter().map(|(g, v)| g / v).sum::<f64>() / weight_sum)
}

/// Pooled communication-time estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommEstimate {
    pub t_o: f64,
    pub t_u: f64,
}

impl CommEstimate {
    pub fn t_comm(&self) -> f64 {
        self.t_o + self.t_u
    }
}

/// Take the minimum of the per-node mean observed communication times; the
/// split between the overlappable and last-bucket parts comes from the node
/// attaining the minimum. Input is one list of `(t_o_obs, t_u_obs)` per node.
pub fn estimate_comm_time(per_node: &[Vec<(f64, f64)>]) -> Result<CommEstimate> {
    let mut best: Option<(f64, CommEstimate)> = None;
    for obs in per_node {
        if obs.is_empty() {
            continue;
        }
        let n = obs.len() as f64;
        let t_o = obs.iter().map(|o| o.0).sum::<f64>() / n;
        let t_u = obs.iter().map(|o| o.1).sum::<f64>() / n;
        let total = t_o + t_u;
        if best.is_none_or(|(t, _)| total < t) {
            best = Some((total, CommEstimate { t_o, t_u }));
        }
    }
    best.map(|(_, e)| e).ok_or(Error::EmptyInput(
        "communication estimate needs at least one observation",
    ))
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct NodeHistory {
    observations: Vec<TimingObservation>,
}

impl NodeHistory {
    fn distinct_batch_sizes(&self) -> usize {
        let mut seen: Vec<f64> = Vec::new();
        for o in &self.observations {
            if !seen.iter().any(|&x| (x - o.b).abs() <= 1e-12) {
                seen.push(o.b);
            }
        }
        seen.len()
    }

    fn gamma_stats(&self) -> Option<(f64, f64)> {
        if self.observations.len() < 2 {
            return None;
        }
        let clamped: Vec<f64> = self
            .observations
            .iter()
            .map(|o| o.gamma_obs.clamp(0.01, 0.99))
            .collect();
        let n = clamped.len() as f64;
        let mean = clamped.iter().sum::<f64>() / n;
        let var = clamped.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / (n - 1.0);
        Some((mean, var))
    }
}

/// Everything learned so far: per-node compute models, pooled overlap ratio,
/// pooled communication times, and the raw observations they came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnedModel {
    nodes: Vec<NodeHistory>,
    models: Vec<Option<NodeComputeModel>>,
    slope_clamped: Vec<bool>,
    gamma: Option<f64>,
    comm: Option<CommEstimate>,
}

impl LearnedModel {
    pub fn new(n_nodes: usize) -> Self {
        Self {
            nodes: vec![NodeHistory::default(); n_nodes],
            models: vec![None; n_nodes],
            slope_clamped: vec![false; n_nodes],
            gamma: None,
            comm: None,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn observation_count(&self, node: usize) -> usize {
        self.nodes[node].observations.len()
    }

    pub fn node_model(&self, node: usize) -> Option<&NodeComputeModel> {
        self.models[node].as_ref()
    }

    pub fn gamma(&self) -> Option<f64> {
        self.gamma
    }

    pub fn comm(&self) -> Option<CommEstimate> {
        self.comm
    }

    pub fn gamma_variance(&self, node: usize) -> Option<f64> {
        self.nodes[node].gamma_stats().map(|(_, v)| v)
    }

    /// True once every node has a fitted model and the pooled estimates exist.
    pub fn ready(&self) -> bool {
        self.models.iter().all(|m| m.is_some()) && self.gamma.is_some() && self.comm.is_some()
    }

    /// Mean per-sample compute time of a node over its latest epoch, the
    /// model-free signal the warmup split runs on.
    pub fn last_epoch_sample_time(&self, node: usize) -> Option<f64> {
        let hist = &self.nodes[node];
        let last_epoch = hist.observations.iter().map(|o| o.epoch).max()?;
        let (mut time, mut samples) = (0.0, 0.0);
        for o in hist.observations.iter().filter(|o| o.epoch == last_epoch) {
            time += o.a_time + o.p_time;
            samples += o.b;
        }
        (samples > 0.0).then(|| time / samples)
    }

    /// Append observations, refit the nodes that received data, and recompute
    /// the pooled estimates. A no-op on empty input.
    pub fn update(&mut self, observations: &[TimingObservation]) {
        if observations.is_empty() {
            return;
        }
        let mut touched = vec![false; self.nodes.len()];
        for obs in observations {
            if obs.node_id < self.nodes.len() {
                self.nodes[obs.node_id].observations.push(obs.clone());
                touched[obs.node_id] = true;
            }
        }
        for (i, touched) in touched.iter().enumerate() {
            if !touched || self.nodes[i].distinct_batch_sizes() < 2 {
                continue;
            }
            if let Ok(fit) = fit_compute_model(&self.nodes[i].observations) {
                self.models[i] = Some(fit.model);
                self.slope_clamped[i] = fit.clamped;
            }
        }

        let gamma_stats: Vec<(f64, f64)> =
            self.nodes.iter().filter_map(|h| h.gamma_stats()).collect();
        if gamma_stats.len() == self.nodes.len() {
            if let Ok(g) = estimate_gamma(&gamma_stats) {
                self.gamma = Some(g.clamp(0.01, 0.99));
            }
        }

        let comm_obs: Vec<Vec<(f64, f64)>> = self
            .nodes
            .iter()
            .map(|h| {
                h.observations
                    .iter()
                    .map(|o| (o.t_o_obs, o.t_u_obs))
                    .collect()
            })
            .collect();
        if comm_obs.iter().all(|v| !v.is_empty()) {
            self.comm = estimate_comm_time(&comm_obs).ok();
        }
    }

    /// Assemble the learned cluster spec; errors until the model is ready.
    pub fn to_cluster_spec(&self, caps: Option<Vec<u64>>) -> Result<ClusterSpec> {
        let models: Option<Vec<NodeComputeModel>> = self.models.iter().cloned().collect();
        let models = models.ok_or(Error::EmptyInput("per-node models not fitted yet"))?;
        let gamma = self
            .gamma
            .ok_or(Error::EmptyInput("overlap ratio not estimated yet"))?;
        let comm = self
            .comm
            .ok_or(Error::EmptyInput("communication time not estimated yet"))?;
        ClusterSpec::new(models, CommModel::new(gamma, comm.t_o, comm.t_u)?, caps)
    }
}
