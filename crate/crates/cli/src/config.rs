//! JSON run configuration: cluster truth, simulation controls, synthetic
//! gradient moments, and the adaptive batch-size range. Every module-level
//! invariant is re-checked while lowering into the core types. The schema is
//! documented in `docs/schema.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use optperf_core::{
    ClusterSpec, CommModel, GradientTruth, NodeComputeModel, TrSigmaSchedule, TrainingConfig,
    TruthWorld,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub q: f64,
    pub s: f64,
    pub k: f64,
    pub m: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    pub nodes: Vec<NodeConfig>,
    pub gamma: f64,
    pub t_o: f64,
    pub t_u: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_local_batch: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub seed: u64,
    #[serde(default = "default_noise_cv")]
    pub noise_cv: f64,
    #[serde(default = "default_n_buckets")]
    pub n_buckets: usize,
    #[serde(default = "default_batches_per_epoch")]
    pub batches_per_epoch: u64,
    pub epochs: u64,
}

fn default_noise_cv() -> f64 {
    0.05
}
fn default_n_buckets() -> usize {
    8
}
fn default_batches_per_epoch() -> u64 {
    50
}
fn default_dim() -> usize {
    256
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientConfig {
    #[serde(default = "default_dim")]
    pub dim: usize,
    pub g_sq_norm: f64,
    pub tr_sigma: TrSigmaSchedule,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveConfig {
    pub b_min: u64,
    pub b_max: u64,
    #[serde(default = "default_candidates")]
    pub candidate_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_ref: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_batch: Option<u64>,
}

fn default_candidates() -> usize {
    8
}

/// Top-level run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub cluster: ClusterConfig,
    pub simulation: SimulationConfig,
    pub gradients: GradientConfig,
    pub adaptive: AdaptiveConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&raw)
            .map_err(|e| anyhow::anyhow!("invalid config {}: {e}", path.display()))?;
        if let Ok(seed) = std::env::var("OPTPERF_SEED") {
            cfg.simulation.seed = seed
                .parse()
                .map_err(|e| anyhow::anyhow!("OPTPERF_SEED must be a 64-bit integer: {e}"))?;
        }
        Ok(cfg)
    }

    /// Lower into the core cluster spec, re-validating every invariant.
    pub fn cluster_spec(&self) -> optperf_core::Result<ClusterSpec> {
        let nodes = self
            .cluster
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| NodeComputeModel::new(i, n.q, n.s, n.k, n.m))
            .collect::<optperf_core::Result<Vec<_>>>()?;
        let comm = CommModel::new(self.cluster.gamma, self.cluster.t_o, self.cluster.t_u)?;
        ClusterSpec::new(nodes, comm, self.cluster.max_local_batch.clone())
    }

    pub fn world(&self) -> optperf_core::Result<TruthWorld> {
        TruthWorld::new(
            self.cluster_spec()?,
            self.simulation.noise_cv,
            self.simulation.n_buckets,
            GradientTruth::isotropic(
                self.gradients.g_sq_norm,
                self.gradients.tr_sigma.at(0),
                self.gradients.dim,
            )?,
            self.simulation.seed,
        )
    }

    pub fn training_config(&self) -> optperf_core::Result<TrainingConfig> {
        let cfg = TrainingConfig {
            world: self.world()?,
            epochs: self.simulation.epochs,
            batches_per_epoch: self.simulation.batches_per_epoch,
            b_min: self.adaptive.b_min,
            b_max: self.adaptive.b_max,
            candidate_count: self.adaptive.candidate_count,
            b_ref: self.adaptive.b_ref,
            fixed_batch: self.adaptive.fixed_batch,
            tr_sigma_schedule: self.gradients.tr_sigma,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
