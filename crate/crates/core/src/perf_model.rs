//! Per-node and cluster performance models for synchronized data-parallel
//! training with bucketed all-reduce overlap.
//!
//! A node's batch is `a(b) = q*b + s` (data loading, forward pass, optimizer
//! step) followed by backpropagation `P(b) = k*b + m`. Gradient buckets start
//! synchronizing a fixed fraction `gamma` into backprop; all buckets but the
//! last (total sync time `t_o`) can overlap with the remaining computation,
//! the last bucket (`t_u`) never overlaps. Whether a node is limited by its
//! computation or by bucket synchronization depends on how `(1-gamma)*P`
//! compares against `t_o`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear computing-time model of one node: non-backprop time `q*b + s` and
/// backprop time `k*b + m`, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeComputeModel {
    pub node_id: usize,
    /// seconds per sample of data loading + forward + update
    pub q: f64,
    /// fixed seconds of data loading + forward + update
    pub s: f64,
    /// seconds per sample of backpropagation
    pub k: f64,
    /// fixed seconds of backpropagation
    pub m: f64,
}

impl NodeComputeModel {
    pub fn new(node_id: usize, q: f64, s: f64, k: f64, m: f64) -> Result<Self> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(q) || !ok(k) {
            return Err(Error::InvalidParameter(format!(
                "node {node_id}: slopes must be finite and non-negative (q={q}, k={k})"
            )));
        }
        if q + k <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "node {node_id}: q + k must be positive so time grows with batch size"
            )));
        }
        if !ok(s) || !ok(m) {
            return Err(Error::InvalidParameter(format!(
                "node {node_id}: intercepts must be finite and non-negative (s={s}, m={m})"
            )));
        }
        Ok(Self {
            node_id,
            q,
            s,
            k,
            m,
        })
    }

    /// Data loading + forward + update time at batch size `b`.
    #[inline]
    pub fn phase_a(&self, b: f64) -> f64 {
        self.q * b + self.s
    }

    /// Backpropagation time at batch size `b`.
    #[inline]
    pub fn backprop(&self, b: f64) -> f64 {
        self.k * b + self.m
    }

    /// Total computing time `a(b) + P(b)`.
    pub fn compute_time(&self, b: f64) -> Result<f64> {
        check_batch(b)?;
        Ok(self.phase_a(b) + self.backprop(b))
    }

    /// Moment the first gradient bucket is ready: `a(b) + gamma * P(b)`.
    pub fn sync_start(&self, comm: &CommModel, b: f64) -> Result<f64> {
        check_batch(b)?;
        Ok(self.phase_a(b) + comm.gamma * self.backprop(b))
    }

    /// Which resource limits this node at batch size `b`.
    pub fn classify_bottleneck(&self, comm: &CommModel, b: f64) -> Result<BottleneckLabel> {
        check_batch(b)?;
        Ok(classify(self, comm, b))
    }

    /// Total batch time of this node alone in the cluster pipeline.
    pub fn node_batch_time(&self, comm: &CommModel, b: f64) -> Result<f64> {
        check_batch(b)?;
        Ok(match classify(self, comm, b) {
            BottleneckLabel::Compute => self.phase_a(b) + self.backprop(b) + comm.t_u,
            BottleneckLabel::Communication => {
                self.phase_a(b) + comm.gamma * self.backprop(b) + comm.t_comm()
            }
        })
    }
}

#[inline]
fn check_batch(b: f64) -> Result<()> {
    if b < 0.0 || b.is_nan() {
        return Err(Error::NegativeBatch(b));
    }
    Ok(())
}

// Boundary ties go to Compute: the classification inequality is non-strict.
#[inline]
pub(crate) fn classify(node: &NodeComputeModel, comm: &CommModel, b: f64) -> BottleneckLabel {
    if (1.0 - comm.gamma) * node.backprop(b) >= comm.t_o {
        BottleneckLabel::Compute
    } else {
        BottleneckLabel::Communication
    }
}

/// Cluster-wide communication model: overlap ratio and the two parts of the
/// bucket synchronization time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommModel {
    /// fraction of backprop elapsed before the first bucket is ready, in (0, 1)
    pub gamma: f64,
    /// synchronization time of all buckets but the last (overlappable)
    pub t_o: f64,
    /// synchronization time of the last bucket (never overlappable)
    pub t_u: f64,
}

impl CommModel {
    pub fn new(gamma: f64, t_o: f64, t_u: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma must lie in (0, 1), got {gamma}"
            )));
        }
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(t_o) || !ok(t_u) {
            return Err(Error::InvalidParameter(format!(
                "communication times must be finite and non-negative (t_o={t_o}, t_u={t_u})"
            )));
        }
        Ok(Self { gamma, t_o, t_u })
    }

    /// Total synchronization time `t_o + t_u`.
    #[inline]
    pub fn t_comm(&self) -> f64 {
        self.t_o + self.t_u
    }
}

/// Which resource limits a node at its assigned batch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BottleneckLabel {
    Compute,
    Communication,
}

/// A heterogeneous cluster: per-node compute models, one shared communication
/// model, optional per-node memory caps on the local batch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    nodes: Vec<NodeComputeModel>,
    comm: CommModel,
    max_local_batch: Option<Vec<u64>>,
}

impl ClusterSpec {
    pub fn new(
        nodes: Vec<NodeComputeModel>,
        comm: CommModel,
        max_local_batch: Option<Vec<u64>>,
    ) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::EmptyInput("cluster must have at least one node"));
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.node_id != i {
                return Err(Error::InvalidParameter(format!(
                    "node ids must be 0..n-1 in order; position {i} holds id {}",
                    node.node_id
                )));
            }
        }
        if let Some(caps) = &max_local_batch {
            if caps.len() != nodes.len() {
                return Err(Error::LengthMismatch {
                    expected: nodes.len(),
                    got: caps.len(),
                });
            }
            if let Some(&bad) = caps.iter().find(|&&c| c < 1) {
                return Err(Error::InvalidParameter(format!(
                    "per-node caps must be >= 1, got {bad}"
                )));
            }
        }
        Ok(Self {
            nodes,
            comm,
            max_local_batch,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[NodeComputeModel] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &NodeComputeModel {
        &self.nodes[i]
    }

    pub fn comm(&self) -> &CommModel {
        &self.comm
    }

    pub fn caps(&self) -> Option<&[u64]> {
        self.max_local_batch.as_deref()
    }

    /// Batch processing time of the whole cluster under `alloc`: the outer max
    /// of every node's compute-limited and communication-limited expression.
    pub fn cluster_batch_time(&self, alloc: &Allocation) -> Result<f64> {
        if alloc.locals().len() != self.nodes.len() {
            return Err(Error::LengthMismatch {
                expected: self.nodes.len(),
                got: alloc.locals().len(),
            });
        }
        let mut worst = f64::NEG_INFINITY;
        for (node, &b) in self.nodes.iter().zip(alloc.locals()) {
            check_batch(b)?;
            worst = worst.max(node_time_unchecked(node, &self.comm, b));
        }
        Ok(worst)
    }
}

// Eq.-7 style per-node time: max of the two overlap patterns, no branch on
// the classification. Used by hot solver/oracle loops.
#[inline]
pub(crate) fn node_time_unchecked(node: &NodeComputeModel, comm: &CommModel, b: f64) -> f64 {
    let a = node.phase_a(b);
    let p = node.backprop(b);
    let compute_limited = a + p + comm.t_u;
    let comm_limited = a + comm.gamma * p + comm.t_o + comm.t_u;
    compute_limited.max(comm_limited)
}

/// A split of a total batch across the cluster. Locals are real-valued in
/// solver output and integral after rounding; they always sum to the total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    total: u64,
    locals: Vec<f64>,
}

impl Allocation {
    pub fn new(total: u64, locals: Vec<f64>) -> Result<Self> {
        if total == 0 {
            return Err(Error::InvalidParameter(
                "total batch size must be positive".into(),
            ));
        }
        if locals.is_empty() {
            return Err(Error::EmptyInput("allocation needs at least one node"));
        }
        if let Some(&bad) = locals.iter().find(|&&b| b < 0.0 || b.is_nan()) {
            return Err(Error::NegativeBatch(bad));
        }
        let sum: f64 = locals.iter().sum();
        if (sum - total as f64).abs() > 1e-9 * total as f64 {
            return Err(Error::AllocationSum { sum, total });
        }
        Ok(Self { total, locals })
    }

    /// Real-valued even split of `total` over `n` nodes.
    pub fn even_split(total: u64, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyInput("allocation needs at least one node"));
        }
        let share = total as f64 / n as f64;
        Self::new(total, vec![share; n])
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn locals(&self) -> &[f64] {
        &self.locals
    }

    /// Per-node share of the total batch; sums to 1.
    pub fn ratios(&self) -> Vec<f64> {
        let b = self.total as f64;
        self.locals.iter().map(|&x| x / b).collect()
    }

    pub fn is_integral(&self) -> bool {
        self.locals.iter().all(|&b| b == b.trunc())
    }

    /// Integer view of the locals; `None` unless every entry is integral.
    pub fn as_integers(&self) -> Option<Vec<u64>> {
        if self.is_integral() {
            Some(self.locals.iter().map(|&b| b as u64).collect())
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn model() -> NodeComputeModel {
        NodeComputeModel::new(0, 0.001, 0.05, 0.002, 0.1).unwrap()
    }

    #[test]
    fn compute_time_matches_hand_evaluation() {
        let t = model().compute_time(100.0).unwrap();
        assert_relative_eq!(t, 0.45, epsilon = 1e-12);

        let other = NodeComputeModel::new(0, 0.002, 0.02, 0.004, 0.08).unwrap();
        assert_relative_eq!(other.compute_time(50.0).unwrap(), 0.40, epsilon = 1e-12);
    }

    #[test]
    fn compute_time_zero_batch_is_the_intercepts() {
        assert_relative_eq!(model().compute_time(0.0).unwrap(), 0.05 + 0.1);
    }

    #[test]
    fn compute_time_rejects_negative_batch() {
        assert!(matches!(
            model().compute_time(-1.0),
            Err(Error::NegativeBatch(_))
        ));
    }

    #[test]
    fn sync_start_hand_evaluation() {
        let comm = CommModel::new(0.5, 0.1, 0.05).unwrap();
        let t = model().sync_start(&comm, 100.0).unwrap();
        assert_relative_eq!(t, 0.15 + 0.5 * 0.3, epsilon = 1e-12);
        // zero batch: s + gamma*m
        assert_relative_eq!(model().sync_start(&comm, 0.0).unwrap(), 0.05 + 0.5 * 0.1);
    }

    #[test]
    fn sync_start_collapses_to_compute_time_as_gamma_approaches_one() {
        let comm = CommModel::new(1.0 - 1e-12, 0.1, 0.05).unwrap();
        let b = 100.0;
        let gap = model().compute_time(b).unwrap() - model().sync_start(&comm, b).unwrap();
        assert!(gap.abs() < 1e-9);
    }

    #[test]
    fn boundary_tie_classified_as_compute() {
        // (1-gamma)*P == t_o exactly
        let node = model();
        let b = 100.0;
        let p = node.backprop(b); // 0.3
        let comm = CommModel::new(0.5, 0.5 * p, 0.05).unwrap();
        assert_eq!(
            node.classify_bottleneck(&comm, b).unwrap(),
            BottleneckLabel::Compute
        );
    }

    #[test]
    fn zero_overlappable_comm_is_always_compute() {
        let comm = CommModel::new(0.5, 0.0, 0.05).unwrap();
        assert_eq!(
            model().classify_bottleneck(&comm, 0.0).unwrap(),
            BottleneckLabel::Compute
        );
    }

    #[test]
    fn small_batch_turns_communication_bound() {
        let comm = CommModel::new(0.5, 0.2, 0.05).unwrap();
        // (0.5)(0.002*10 + 0.1) = 0.06 < 0.2
        assert_eq!(
            model().classify_bottleneck(&comm, 10.0).unwrap(),
            BottleneckLabel::Communication
        );
    }

    #[test]
    fn node_batch_time_two_patterns() {
        // compute-limited: compute_time + t_u
        let comm = CommModel::new(0.5, 0.1, 0.05).unwrap();
        assert_relative_eq!(
            model().node_batch_time(&comm, 100.0).unwrap(),
            0.50,
            epsilon = 1e-12
        );

        // communication-limited: sync_start + t_comm, with t_comm = 0.35
        let comm = CommModel::new(0.5, 0.3, 0.05).unwrap();
        assert_relative_eq!(
            model().node_batch_time(&comm, 100.0).unwrap(),
            0.65,
            epsilon = 1e-12
        );
    }

    #[test]
    fn patterns_agree_at_the_classification_boundary() {
        let node = model();
        let b = 100.0;
        let p = node.backprop(b);
        let comm = CommModel::new(0.5, (1.0 - 0.5) * p, 0.05).unwrap();
        let eq5 = node.compute_time(b).unwrap() + comm.t_u;
        let eq6 = node.sync_start(&comm, b).unwrap() + comm.t_comm();
        assert_relative_eq!(eq5, eq6, epsilon = 1e-12);
        assert_relative_eq!(
            node.node_batch_time(&comm, b).unwrap(),
            eq5,
            epsilon = 1e-12
        );
    }

    fn three_node_spec() -> ClusterSpec {
        let nodes = vec![
            NodeComputeModel::new(0, 0.001, 0.05, 0.002, 0.10).unwrap(),
            NodeComputeModel::new(1, 0.002, 0.02, 0.004, 0.08).unwrap(),
            NodeComputeModel::new(2, 0.003, 0.07, 0.006, 0.12).unwrap(),
        ];
        ClusterSpec::new(nodes, CommModel::new(0.4, 0.15, 0.04).unwrap(), None).unwrap()
    }

    #[test]
    fn cluster_batch_time_single_node() {
        let spec =
            ClusterSpec::new(vec![model()], CommModel::new(0.5, 0.1, 0.05).unwrap(), None).unwrap();
        let alloc = Allocation::new(100, vec![100.0]).unwrap();
        assert_relative_eq!(
            spec.cluster_batch_time(&alloc).unwrap(),
            spec.node(0).node_batch_time(spec.comm(), 100.0).unwrap()
        );
    }

    #[test]
    fn cluster_batch_time_two_identical_nodes_even_split() {
        let nodes = vec![
            NodeComputeModel::new(0, 0.001, 0.05, 0.002, 0.1).unwrap(),
            NodeComputeModel::new(1, 0.001, 0.05, 0.002, 0.1).unwrap(),
        ];
        let comm = CommModel::new(0.5, 0.1, 0.05).unwrap();
        let spec = ClusterSpec::new(nodes, comm.clone(), None).unwrap();
        let alloc = Allocation::new(200, vec![100.0, 100.0]).unwrap();
        let each = spec.node(0).node_batch_time(&comm, 100.0).unwrap();
        assert_relative_eq!(spec.cluster_batch_time(&alloc).unwrap(), each);
    }

    #[test]
    fn cluster_batch_time_is_the_max_of_node_times() {
        let spec = three_node_spec();
        let alloc = Allocation::new(120, vec![60.0, 40.0, 20.0]).unwrap();
        let expected = (0..3)
            .map(|i| {
                spec.node(i)
                    .node_batch_time(spec.comm(), alloc.locals()[i])
                    .unwrap()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        assert_relative_eq!(
            spec.cluster_batch_time(&alloc).unwrap(),
            expected,
            epsilon = 1e-12
        );
    }

    #[test]
    fn cluster_batch_time_rejects_length_mismatch() {
        let spec = three_node_spec();
        let alloc = Allocation::new(100, vec![50.0, 50.0]).unwrap();
        assert!(matches!(
            spec.cluster_batch_time(&alloc),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn allocation_validates_sum_and_sign() {
        assert!(Allocation::new(100, vec![50.0, 49.0]).is_err());
        assert!(Allocation::new(100, vec![101.0, -1.0]).is_err());
        let ok = Allocation::new(100, vec![61.11, 38.89]).unwrap();
        assert_relative_eq!(ok.ratios().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(!ok.is_integral());
        assert!(Allocation::new(100, vec![61.0, 39.0])
            .unwrap()
            .is_integral());
    }

    #[test]
    fn spec_rejects_bad_node_ids_and_caps() {
        let nodes = vec![NodeComputeModel::new(1, 0.001, 0.0, 0.002, 0.0).unwrap()];
        let comm = CommModel::new(0.5, 0.1, 0.05).unwrap();
        assert!(ClusterSpec::new(nodes, comm.clone(), None).is_err());

        let nodes = vec![NodeComputeModel::new(0, 0.001, 0.0, 0.002, 0.0).unwrap()];
        assert!(ClusterSpec::new(nodes.clone(), comm.clone(), Some(vec![0])).is_err());
        assert!(ClusterSpec::new(nodes.clone(), comm.clone(), Some(vec![4, 5])).is_err());
        assert!(ClusterSpec::new(nodes, comm, Some(vec![8])).is_ok());
    }

    #[test]
    fn model_invariants_enforced() {
        assert!(NodeComputeModel::new(0, -0.001, 0.05, 0.002, 0.1).is_err());
        assert!(NodeComputeModel::new(0, 0.0, 0.05, 0.0, 0.1).is_err());
        assert!(NodeComputeModel::new(0, 0.001, -0.05, 0.002, 0.1).is_err());
        assert!(CommModel::new(0.0, 0.1, 0.05).is_err());
        assert!(CommModel::new(1.0, 0.1, 0.05).is_err());
        assert!(CommModel::new(0.5, -0.1, 0.05).is_err());
    }
}
