//! Optimal local batch-size allocation for a fixed total batch size.
//!
//! At the optimum every node limited by computation finishes its gradient at
//! the same moment, every node limited by bucket synchronization posts its
//! first bucket at the same moment, and in the mixed case the two groups meet:
//! shared compute time = shared sync start + `t_o`. Those equal-time
//! conditions reduce each hypothesis to one scalar linear equation, and the
//! hypothesis space (which nodes sit on which side) is searched with the
//! two whole-cluster checks plus a binary search over outliers ranked by
//! their sync-start intercept.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perf_model::{classify, Allocation, BottleneckLabel, ClusterSpec, NodeComputeModel};

/// Which equal-time regime a solution landed in. `Mixed.boundary` is the
/// number of outlier nodes placed on the compute side of the ranked split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    AllCompute,
    AllComm,
    Mixed { boundary: usize },
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scenario::AllCompute => write!(f, "AllCompute"),
            Scenario::AllComm => write!(f, "AllComm"),
            Scenario::Mixed { boundary } => write!(f, "Mixed({boundary})"),
        }
    }
}

/// Solver output: the optimal batch time, the real-valued and rounded
/// allocations that achieve it, and per-node bottleneck labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptPerfSolution {
    pub batch_time: f64,
    pub alloc_real: Allocation,
    pub alloc_int: Allocation,
    pub labels: Vec<BottleneckLabel>,
    pub scenario: Scenario,
    /// nodes pinned to zero samples (equalizing would need a negative share)
    pub clamped_zero: Vec<usize>,
    /// nodes pinned at their memory cap
    pub clamped_cap: Vec<usize>,
    /// true when no ranked-boundary hypothesis was self-consistent and the
    /// exact water-filling solver produced the allocation instead
    pub exact_fallback: bool,
}

impl OptPerfSolution {
    /// Nodes that take part in the equal-time conditions.
    pub fn is_clamped(&self, node: usize) -> bool {
        self.clamped_zero.contains(&node) || self.clamped_cap.contains(&node)
    }
}

/// Raw equal-time solve. Locals may be negative; callers decide how to react.
#[derive(Debug, Clone, PartialEq)]
pub struct EqualizedSolve {
    pub time: f64,
    pub locals: Vec<f64>,
    pub has_negative: bool,
}

// Per-node linear form b  ->  slope*b + intercept, equalized to the solve
// target minus `offset`.
#[derive(Clone, Copy)]
struct NodeLine {
    slope: f64,
    intercept: f64,
    offset: f64,
}

fn node_line(node: &NodeComputeModel, gamma: f64, t_o: f64, label: BottleneckLabel) -> NodeLine {
    match label {
        BottleneckLabel::Compute => NodeLine {
            slope: node.q + node.k,
            intercept: node.s + node.m,
            offset: 0.0,
        },
        BottleneckLabel::Communication => NodeLine {
            slope: node.q + gamma * node.k,
            intercept: node.s + gamma * node.m,
            offset: t_o,
        },
    }
}

// Single scalar solve of sum_i (t - offset_i - intercept_i)/slope_i = total
// over the given node subset. Returns (t, locals for that subset).
fn equalize(lines: &[(usize, NodeLine)], total: f64) -> Result<(f64, Vec<f64>)> {
    let mut inv_sum = 0.0;
    let mut shift_sum = 0.0;
    for &(id, line) in lines {
        if line.slope <= 0.0 {
            return Err(Error::SingularModel { node: id });
        }
        inv_sum += 1.0 / line.slope;
        shift_sum += (line.offset + line.intercept) / line.slope;
    }
    let t = (total + shift_sum) / inv_sum;
    let locals = lines
        .iter()
        .map(|&(_, line)| (t - line.offset - line.intercept) / line.slope)
        .collect();
    Ok((t, locals))
}

fn equalize_all(
    spec: &ClusterSpec,
    total: u64,
    label: BottleneckLabel,
    with_offset: bool,
) -> Result<EqualizedSolve> {
    if total == 0 {
        return Err(Error::InvalidParameter(
            "total batch size must be positive".into(),
        ));
    }
    let comm = spec.comm();
    let lines: Vec<_> = spec
        .nodes()
        .iter()
        .map(|n| {
            let mut line = node_line(n, comm.gamma, comm.t_o, label);
            if !with_offset {
                line.offset = 0.0;
            }
            (n.node_id, line)
        })
        .collect();
    let (t, locals) = equalize(&lines, total as f64)?;
    let has_negative = locals.iter().any(|&b| b < 0.0);
    Ok(EqualizedSolve {
        time: t,
        locals,
        has_negative,
    })
}

/// Equalize every node's computing time: `(q_i+k_i) b_i + (s_i+m_i) = t`,
/// `sum b_i = B`. Closed form, no bottleneck hypothesis involved.
pub fn solve_equal_compute(spec: &ClusterSpec, total: u64) -> Result<EqualizedSolve> {
    equalize_all(spec, total, BottleneckLabel::Compute, false)
}

/// Equalize every node's first-bucket sync start:
/// `(q_i + gamma k_i) b_i + (s_i + gamma m_i) = t`, `sum b_i = B`.
pub fn solve_equal_syncstart(spec: &ClusterSpec, total: u64) -> Result<EqualizedSolve> {
    equalize_all(spec, total, BottleneckLabel::Communication, false)
}

/// Mixed-partition solve output. `t_comb` is the shared compute time; the
/// communication side shares sync start `t_comb - t_o`. The batch-time
/// hypothesis this encodes is `t_comb + t_u`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedSolve {
    pub t_comb: f64,
    pub locals: Vec<f64>,
    pub has_negative: bool,
}

/// Solve the general equal-time system for a fixed side assignment:
/// compute-side nodes share `t_comb`, communication-side nodes share
/// `t_comb - t_o`, and the locals sum to `B`.
pub fn solve_mixed(
    spec: &ClusterSpec,
    total: u64,
    labels: &[BottleneckLabel],
) -> Result<MixedSolve> {
    if labels.len() != spec.len() {
        return Err(Error::LengthMismatch {
            expected: spec.len(),
            got: labels.len(),
        });
    }
    if total == 0 {
        return Err(Error::InvalidParameter(
            "total batch size must be positive".into(),
        ));
    }
    let comm = spec.comm();
    let lines: Vec<_> = spec
        .nodes()
        .iter()
        .zip(labels)
        .map(|(n, &label)| (n.node_id, node_line(n, comm.gamma, comm.t_o, label)))
        .collect();
    let (t_comb, locals) = equalize(&lines, total as f64)?;
    let has_negative = locals.iter().any(|&b| b < 0.0);
    Ok(MixedSolve {
        t_comb,
        locals,
        has_negative,
    })
}

#[derive(Debug, Clone)]
struct PartitionSolve {
    t_comb: f64,
    locals: Vec<f64>,
    clamped_zero: Vec<usize>,
    clamped_cap: Vec<usize>,
}

// Water-filling over monotone per-node batch capacities. Each node's maximum
// batch at water level t is clamp(min over its lines of (t - A)/w, 0, cap);
// the sum is continuous, piecewise linear, and non-decreasing in t, so the
// smallest t whose capacities sum to the budget is found by scanning the
// kink points and interpolating inside one segment. Free nodes then sit
// exactly at the water level (the equal-time condition), the rest are pinned
// at 0 or their cap.
fn water_fill(
    node_lines: &[Vec<NodeLine>],
    caps: Option<&[u64]>,
    budget: f64,
) -> Result<(f64, Vec<f64>)> {
    let n = node_lines.len();
    let cap_of = |i: usize| caps.map_or(f64::INFINITY, |c| c[i] as f64);
    for (i, lines) in node_lines.iter().enumerate() {
        for line in lines {
            if line.slope <= 0.0 {
                return Err(Error::SingularModel { node: i });
            }
        }
    }

    let b_max = |i: usize, t: f64| -> f64 {
        let unbounded = node_lines[i]
            .iter()
            .map(|l| (t - l.offset - l.intercept) / l.slope)
            .fold(f64::INFINITY, f64::min);
        unbounded.clamp(0.0, cap_of(i))
    };
    let g = |t: f64| -> f64 { (0..n).map(|i| b_max(i, t)).sum() };

    // every kink of sum b_max: line zeros, line cap hits, pairwise crossings
    let mut kinks: Vec<f64> = Vec::new();
    for (i, lines) in node_lines.iter().enumerate() {
        for line in lines {
            kinks.push(line.offset + line.intercept);
            let cap = cap_of(i);
            if cap.is_finite() {
                kinks.push(line.offset + line.intercept + line.slope * cap);
            }
        }
        for (a, b) in lines
            .iter()
            .enumerate()
            .flat_map(|(ai, la)| lines[ai + 1..].iter().map(move |lb| (la, lb)))
        {
            if (a.slope - b.slope).abs() > 0.0 {
                let t = (a.slope * (b.offset + b.intercept) - b.slope * (a.offset + a.intercept))
                    / (a.slope - b.slope);
                if t.is_finite() {
                    kinks.push(t);
                }
            }
        }
    }
    // upper bracket: the fastest line of any single node holding the budget
    let t_ub = node_lines
        .iter()
        .flat_map(|lines| lines.iter())
        .map(|l| l.offset + l.intercept + l.slope * budget)
        .fold(f64::NEG_INFINITY, f64::max)
        + 1.0;
    kinks.push(t_ub);
    kinks.retain(|t| t.is_finite());
    kinks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    kinks.dedup();

    let mut t_lo = kinks[0];
    let mut g_lo = g(t_lo);
    if g_lo >= budget {
        // already feasible at the first kink (budget absorbed by caps alone)
        let locals = (0..n).map(|i| b_max(i, t_lo)).collect();
        return Ok((t_lo, locals));
    }
    let mut root = None;
    for &t_hi in &kinks[1..] {
        let g_hi = g(t_hi);
        if g_hi >= budget {
            let t = if g_hi > g_lo {
                t_lo + (budget - g_lo) * (t_hi - t_lo) / (g_hi - g_lo)
            } else {
                t_hi
            };
            root = Some(t);
            break;
        }
        t_lo = t_hi;
        g_lo = g_hi;
    }
    let t =
        root.ok_or_else(|| Error::Infeasible(format!("caps cannot absorb {budget} samples")))?;

    let mut locals: Vec<f64> = (0..n).map(|i| b_max(i, t)).collect();
    // remove float dust so the locals sum exactly to the budget
    let drift = budget - locals.iter().sum::<f64>();
    if drift != 0.0 {
        let target = (0..n)
            .filter(|&i| {
                locals[i] > 0.0 && locals[i] + drift <= cap_of(i) && locals[i] + drift >= 0.0
            })
            .max_by(|&a, &b| locals[a].partial_cmp(&locals[b]).unwrap());
        if let Some(i) = target {
            locals[i] += drift;
        }
    }
    Ok((t, locals))
}

// Equal-time solve under a fixed side assignment, with nodes pinned at zero
// or their cap when equalizing would push them outside those bounds.
fn solve_partition_clamped(
    spec: &ClusterSpec,
    total: u64,
    labels: &[BottleneckLabel],
) -> Result<PartitionSolve> {
    let comm = spec.comm();
    let node_lines: Vec<Vec<NodeLine>> = spec
        .nodes()
        .iter()
        .zip(labels)
        .map(|(node, &label)| vec![node_line(node, comm.gamma, comm.t_o, label)])
        .collect();
    let (t_comb, locals) = water_fill(&node_lines, spec.caps(), total as f64)?;
    Ok(classify_pins(spec, t_comb, locals))
}

// The exact minimizer of the cluster batch time: every node carries both of
// its affine time lines and takes whichever admits more samples at the water
// level, so the search over side assignments is unnecessary. Used when the
// ranked-boundary search space does not contain a consistent assignment.
fn solve_exact(spec: &ClusterSpec, total: u64) -> Result<PartitionSolve> {
    let comm = spec.comm();
    let node_lines: Vec<Vec<NodeLine>> = spec
        .nodes()
        .iter()
        .map(|node| {
            vec![
                node_line(node, comm.gamma, comm.t_o, BottleneckLabel::Compute),
                node_line(node, comm.gamma, comm.t_o, BottleneckLabel::Communication),
            ]
        })
        .collect();
    let (t_comb, locals) = water_fill(&node_lines, spec.caps(), total as f64)?;
    Ok(classify_pins(spec, t_comb, locals))
}

fn classify_pins(spec: &ClusterSpec, t_comb: f64, locals: Vec<f64>) -> PartitionSolve {
    let mut clamped_zero = Vec::new();
    let mut clamped_cap = Vec::new();
    for (i, &b) in locals.iter().enumerate() {
        if b == 0.0 {
            clamped_zero.push(i);
        } else if let Some(caps) = spec.caps() {
            if b >= caps[i] as f64 {
                clamped_cap.push(i);
            }
        }
    }
    PartitionSolve {
        t_comb,
        locals,
        clamped_zero,
        clamped_cap,
    }
}

enum Verdict {
    Verified,
    NeedMoreCompute,
    NeedLessCompute,
    Inconsistent,
}

// A side assignment is correct when no node would finish later than the
// shared references of the other side: every compute time <= t_comb and every
// sync start <= t_comb - t_o. Pinned nodes sit on a simplex face and are
// exempt.
fn verify_partition(spec: &ClusterSpec, sol: &PartitionSolve) -> Verdict {
    let comm = spec.comm();
    let t_compute_ref = sol.t_comb;
    let sync_ref = sol.t_comb - comm.t_o;
    let tol = 1e-9 * sol.t_comb.abs().max(1e-12);

    let mut more = false;
    let mut less = false;
    for node in spec.nodes() {
        let id = node.node_id;
        if sol.clamped_zero.contains(&id) || sol.clamped_cap.contains(&id) {
            continue;
        }
        let b = sol.locals[id];
        if node.phase_a(b) + node.backprop(b) > t_compute_ref + tol {
            more = true;
        }
        if node.phase_a(b) + comm.gamma * node.backprop(b) > sync_ref + tol {
            less = true;
        }
    }
    match (more, less) {
        (false, false) => Verdict::Verified,
        (true, false) => Verdict::NeedMoreCompute,
        (false, true) => Verdict::NeedLessCompute,
        (true, true) => Verdict::Inconsistent,
    }
}

fn build_solution(
    spec: &ClusterSpec,
    total: u64,
    sol: PartitionSolve,
    scenario: Scenario,
    exact_fallback: bool,
) -> Result<OptPerfSolution> {
    let alloc_real = Allocation::new(total, sol.locals)?;
    let alloc_int = round_allocation(&alloc_real);
    let batch_time = spec.cluster_batch_time(&alloc_real)?;
    let comm = spec.comm();
    let labels = spec
        .nodes()
        .iter()
        .zip(alloc_real.locals())
        .map(|(node, &b)| classify(node, comm, b))
        .collect();
    Ok(OptPerfSolution {
        batch_time,
        alloc_real,
        alloc_int,
        labels,
        scenario,
        clamped_zero: sol.clamped_zero,
        clamped_cap: sol.clamped_cap,
        exact_fallback,
    })
}

fn labels_consistent(spec: &ClusterSpec, sol: &PartitionSolve, want: BottleneckLabel) -> bool {
    let comm = spec.comm();
    spec.nodes().iter().all(|node| {
        let id = node.node_id;
        if sol.clamped_zero.contains(&id) || sol.clamped_cap.contains(&id) {
            return true;
        }
        classify(node, comm, sol.locals[id]) == want
    })
}

/// Find the optimal batch time and allocation for `total` samples.
///
/// The two all-one-side hypotheses are checked first in closed form. If
/// neither classification is self-consistent, nodes that land on the same
/// side in both checks are pinned there and the remaining outliers, ranked by
/// their sync-start intercept `s + gamma*m`, are split by a binary-searched
/// boundary until no node would finish later than the other side's shared
/// time. `warm_start` seeds the first boundary probe with a previously solved
/// scenario; it never changes the result, only the probe order.
pub fn find_optperf(
    spec: &ClusterSpec,
    total: u64,
    warm_start: Option<Scenario>,
) -> Result<OptPerfSolution> {
    if total == 0 {
        return Err(Error::InvalidParameter(
            "total batch size must be positive".into(),
        ));
    }
    if let Some(caps) = spec.caps() {
        let cap_sum: u64 = caps.iter().sum();
        if cap_sum < total {
            return Err(Error::Infeasible(format!(
                "memory caps admit at most {cap_sum} samples, total batch is {total}"
            )));
        }
        if (total as usize) < spec.len() {
            return Err(Error::Infeasible(format!(
                "total batch {total} is below the node count {} while memory caps are in force",
                spec.len()
            )));
        }
    }
    let n = spec.len();
    let comm = spec.comm();

    // Check 1: everyone compute-limited.
    let all_compute = vec![BottleneckLabel::Compute; n];
    let c1 = solve_partition_clamped(spec, total, &all_compute)?;
    if labels_consistent(spec, &c1, BottleneckLabel::Compute) {
        return build_solution(spec, total, c1, Scenario::AllCompute, false);
    }

    // Check 2: everyone communication-limited.
    let all_comm = vec![BottleneckLabel::Communication; n];
    let c2 = solve_partition_clamped(spec, total, &all_comm)?;
    if labels_consistent(spec, &c2, BottleneckLabel::Communication) {
        return build_solution(spec, total, c2, Scenario::AllComm, false);
    }

    // Mixed: nodes labeled the same way in both checks keep that side.
    let side_in =
        |sol: &PartitionSolve, id: usize| classify(&spec.nodes()[id], comm, sol.locals[id]);
    let mut base = vec![None::<BottleneckLabel>; n];
    let mut outliers = Vec::new();
    for id in 0..n {
        let l1 = side_in(&c1, id);
        let l2 = side_in(&c2, id);
        if l1 == l2 {
            base[id] = Some(l1);
        } else {
            outliers.push(id);
        }
    }
    // rank outliers by fixed time (sync-start intercept), ties by node id
    outliers.sort_by(|&a, &b| {
        let fa = spec.nodes()[a].s + comm.gamma * spec.nodes()[a].m;
        let fb = spec.nodes()[b].s + comm.gamma * spec.nodes()[b].m;
        fa.partial_cmp(&fb).unwrap().then(a.cmp(&b))
    });
    let m = outliers.len();

    let assemble = |boundary: usize| -> Vec<BottleneckLabel> {
        let mut labels: Vec<BottleneckLabel> = base
            .iter()
            .map(|l| l.unwrap_or(BottleneckLabel::Communication))
            .collect();
        for (rank, &id) in outliers.iter().enumerate() {
            labels[id] = if rank < boundary {
                BottleneckLabel::Compute
            } else {
                BottleneckLabel::Communication
            };
        }
        labels
    };

    let mut lo = 0usize;
    let mut hi = m;
    let mut probe = match warm_start {
        Some(Scenario::Mixed { boundary }) => Some(boundary.min(m)),
        _ => None,
    };
    let mut found: Option<(usize, PartitionSolve)> = None;
    loop {
        let boundary = probe.take().unwrap_or(lo + (hi - lo) / 2);
        let sol = solve_partition_clamped(spec, total, &assemble(boundary))?;
        match verify_partition(spec, &sol) {
            Verdict::Verified => {
                found = Some((boundary, sol));
                break;
            }
            Verdict::NeedMoreCompute => {
                if boundary >= hi {
                    break;
                }
                lo = boundary + 1;
            }
            Verdict::NeedLessCompute => {
                if boundary <= lo {
                    break;
                }
                hi = boundary - 1;
            }
            Verdict::Inconsistent => break,
        }
        if lo > hi {
            break;
        }
    }

    // Binary search missed (inconsistent verdicts or an exhausted interval):
    // scan every boundary for a consistent assignment. The ranked-prefix
    // space can genuinely exclude the optimum (a node the two checks agree on
    // may still sit on the other side at the optimum), in which case the
    // exact water-filling solver takes over.
    let (boundary, sol, exact_fallback) = match found {
        Some((boundary, sol)) => (boundary, sol, false),
        None => {
            let mut verified: Option<(usize, PartitionSolve)> = None;
            for boundary in 0..=m {
                let sol = solve_partition_clamped(spec, total, &assemble(boundary))?;
                if matches!(verify_partition(spec, &sol), Verdict::Verified) {
                    verified = Some((boundary, sol));
                    break;
                }
            }
            match verified {
                Some((boundary, sol)) => (boundary, sol, false),
                None => {
                    let sol = solve_exact(spec, total)?;
                    let boundary = outliers
                        .iter()
                        .filter(|&&id| {
                            classify(&spec.nodes()[id], comm, sol.locals[id].max(0.0))
                                == BottleneckLabel::Compute
                        })
                        .count();
                    (boundary, sol, true)
                }
            }
        }
    };
    build_solution(
        spec,
        total,
        sol,
        Scenario::Mixed { boundary },
        exact_fallback,
    )
}

/// Model-free warmup split: each node's share is inversely proportional to
/// its observed per-sample computing time, rounded to integers.
pub fn warmup_allocation(t_sample: &[f64], total: u64) -> Result<Allocation> {
    if t_sample.is_empty() {
        return Err(Error::EmptyInput(
            "warmup needs at least one per-sample time",
        ));
    }
    if total == 0 {
        return Err(Error::InvalidParameter(
            "total batch size must be positive".into(),
        ));
    }
    if let Some(&bad) = t_sample.iter().find(|&&t| !t.is_finite() || t <= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "per-sample times must be positive, got {bad}"
        )));
    }
    let sum_t: f64 = t_sample.iter().sum();
    let weights: Vec<f64> = t_sample.iter().map(|&t| sum_t / t).collect();
    let weight_sum: f64 = weights.iter().sum();
    let locals: Vec<f64> = weights
        .iter()
        .map(|w| w / weight_sum * total as f64)
        .collect();
    Ok(round_allocation(&Allocation::new(total, locals)?))
}

/// Round a real-valued allocation to integers that still sum to the total:
/// floor everything, then hand the missing samples to the largest remainders
/// (ties to the lower node index).
pub fn round_allocation(alloc: &Allocation) -> Allocation {
    let total = alloc.total();
    let floors: Vec<u64> = alloc.locals().iter().map(|&b| b.floor() as u64).collect();
    let assigned: u64 = floors.iter().sum();
    let deficit = total.saturating_sub(assigned) as usize;

    let mut by_remainder: Vec<usize> = (0..floors.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = alloc.locals()[a] - alloc.locals()[a].floor();
        let rb = alloc.locals()[b] - alloc.locals()[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });

    let mut locals: Vec<f64> = floors.iter().map(|&f| f as f64).collect();
    for &i in by_remainder.iter().take(deficit) {
        locals[i] += 1.0;
    }
    Allocation::new(total, locals).expect("rounded allocation sums to the total")
}

const GRID_GUARD: f64 = 2e7;

/// Exhaustive-search oracle: minimize the cluster batch time over the simplex
/// of real allocations on a grid of the given step. When the full grid fits
/// under the evaluation guard it is enumerated directly; otherwise the grid
/// is refined level by level around the incumbent (the objective is a max of
/// per-node affine functions, hence convex, so narrowing windows keep the
/// optimum). Intended for tests and validation, not production solving.
pub fn brute_force_optperf(
    spec: &ClusterSpec,
    total: u64,
    grid_step: f64,
) -> Result<OptPerfSolution> {
    if total == 0 {
        return Err(Error::InvalidParameter(
            "total batch size must be positive".into(),
        ));
    }
    if !grid_step.is_finite() || grid_step <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "grid step must be positive, got {grid_step}"
        )));
    }
    let n = spec.len();
    let b = total as f64;
    if n == 1 {
        let sol = PartitionSolve {
            t_comb: 0.0,
            locals: vec![b],
            clamped_zero: vec![],
            clamped_cap: vec![],
        };
        return build_solution(spec, total, sol, Scenario::AllCompute, false);
    }

    let free_dims = n - 1;
    let full_points = ((b / grid_step + 1.0).powi(free_dims as i32)) / factorial(free_dims);
    let windows_full = vec![(0.0, b); n];

    let best = if full_points <= GRID_GUARD {
        grid_scan(spec, total, grid_step, &windows_full)?
    } else {
        // refinement pyramid: coarse full grid, then shrink around the incumbent
        let mut step = b
            / (GRID_GUARD.powf(1.0 / free_dims as f64).min(400.0))
                .floor()
                .max(4.0);
        let mut windows = windows_full;
        let mut incumbent = grid_scan(spec, total, step, &windows)?;
        while step > grid_step {
            let next = (step / 8.0).max(grid_step);
            windows = incumbent
                .1
                .iter()
                .map(|&bi| ((bi - 2.0 * step).max(0.0), (bi + 2.0 * step).min(b)))
                .collect();
            step = next;
            let refined = grid_scan(spec, total, step, &windows)?;
            if refined.0 < incumbent.0 {
                incumbent = refined;
            }
        }
        incumbent
    };

    let sol = PartitionSolve {
        t_comb: 0.0,
        locals: best.1,
        clamped_zero: vec![],
        clamped_cap: vec![],
    };
    let scenario = oracle_scenario(spec, &sol.locals);
    build_solution(spec, total, sol, scenario, false)
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|x| x as f64).product::<f64>().max(1.0)
}

fn oracle_scenario(spec: &ClusterSpec, locals: &[f64]) -> Scenario {
    let comm = spec.comm();
    let labels: Vec<_> = spec
        .nodes()
        .iter()
        .zip(locals)
        .map(|(node, &b)| classify(node, comm, b))
        .collect();
    if labels.iter().all(|&l| l == BottleneckLabel::Compute) {
        Scenario::AllCompute
    } else if labels.iter().all(|&l| l == BottleneckLabel::Communication) {
        Scenario::AllComm
    } else {
        let boundary = labels
            .iter()
            .filter(|&&l| l == BottleneckLabel::Compute)
            .count();
        Scenario::Mixed { boundary }
    }
}

// Enumerate allocations on the step grid restricted to per-node windows (and
// caps), the last node absorbing the remainder. Returns (time, locals).
fn grid_scan(
    spec: &ClusterSpec,
    total: u64,
    step: f64,
    windows: &[(f64, f64)],
) -> Result<(f64, Vec<f64>)> {
    let n = spec.len();
    let b = total as f64;
    let comm = spec.comm();
    let caps = spec.caps();
    let upper = |i: usize| -> f64 {
        let cap = caps.map_or(b, |c| c[i] as f64);
        windows[i].1.min(cap)
    };
    let lower = |i: usize| windows[i].0.max(0.0);

    // per-node affine forms: time = max(wc*b + cc, ws*b + cs)
    let forms: Vec<(f64, f64, f64, f64)> = spec
        .nodes()
        .iter()
        .map(|node| {
            (
                node.q + node.k,
                node.s + node.m + comm.t_u,
                node.q + comm.gamma * node.k,
                node.s + comm.gamma * node.m + comm.t_o + comm.t_u,
            )
        })
        .collect();
    struct Scanner<'a> {
        n: usize,
        step: f64,
        bounds: Vec<(f64, f64)>,
        forms: &'a [(f64, f64, f64, f64)],
        point: Vec<f64>,
        best: Vec<f64>,
        best_time: f64,
    }

    impl Scanner<'_> {
        fn eval_node(&self, i: usize, bi: f64) -> f64 {
            let (wc, cc, ws, cs) = self.forms[i];
            (wc * bi + cc).max(ws * bi + cs)
        }

        // depth-first walk over the first n-1 coordinates, the last node
        // absorbing the remainder; prefixes already worse than the incumbent
        // are pruned
        fn walk(&mut self, dim: usize, remaining: f64, prefix_max: f64) {
            if dim == self.n - 1 {
                let last = remaining;
                let (lo, hi) = self.bounds[dim];
                if last < lo - 1e-9 || last > hi + 1e-9 || last < -1e-9 {
                    return;
                }
                let t = prefix_max.max(self.eval_node(dim, last.max(0.0)));
                if t < self.best_time {
                    self.best_time = t;
                    self.point[dim] = last.max(0.0);
                    self.best.clone_from(&self.point);
                }
                return;
            }
            let (lo, hi) = self.bounds[dim];
            let hi = hi.min(remaining);
            let mut j = (lo / self.step).ceil();
            loop {
                let bi = j * self.step;
                if bi > hi + 1e-12 {
                    break;
                }
                self.point[dim] = bi;
                let pm = prefix_max.max(self.eval_node(dim, bi));
                if pm < self.best_time {
                    self.walk(dim + 1, remaining - bi, pm);
                }
                j += 1.0;
            }
        }
    }

    let mut scanner = Scanner {
        n,
        step,
        bounds: (0..n).map(|i| (lower(i), upper(i))).collect(),
        forms: &forms,
        point: vec![0.0; n],
        best: vec![0.0; n],
        best_time: f64::INFINITY,
    };
    scanner.walk(0, b, f64::NEG_INFINITY);
    let (best_time, mut best) = (scanner.best_time, scanner.best);

    if best_time.is_infinite() {
        return Err(Error::Infeasible(
            "no grid point satisfies the windows and caps".into(),
        ));
    }
    // snap the float dust so the locals sum exactly to B
    let drift: f64 = b - best.iter().sum::<f64>();
    if drift.abs() > 0.0 {
        let i = best
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        best[i] += drift;
    }
    Ok((best_time, best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perf_model::CommModel;
    use approx::assert_relative_eq;

    fn spec2() -> ClusterSpec {
        // (q+k) = [0.003, 0.006], (s+m) = [0.15, 0.10]
        let nodes = vec![
            NodeComputeModel::new(0, 0.001, 0.05, 0.002, 0.10).unwrap(),
            NodeComputeModel::new(1, 0.002, 0.02, 0.004, 0.08).unwrap(),
        ];
        ClusterSpec::new(nodes, CommModel::new(0.5, 0.02, 0.01).unwrap(), None).unwrap()
    }

    #[test]
    fn equal_compute_closed_form() {
        let sol = solve_equal_compute(&spec2(), 100).unwrap();
        assert_relative_eq!(sol.time, 1.0 / 3.0, epsilon = 1e-9);
        assert_relative_eq!(sol.locals[0], 61.11, epsilon = 0.005);
        assert_relative_eq!(sol.locals[1], 38.89, epsilon = 0.005);
        assert_relative_eq!(sol.locals.iter().sum::<f64>(), 100.0, epsilon = 1e-9);
        // both compute times equal
        let spec = spec2();
        let t0 = spec.node(0).compute_time(sol.locals[0]).unwrap();
        let t1 = spec.node(1).compute_time(sol.locals[1]).unwrap();
        assert_relative_eq!(t0, t1, epsilon = 1e-12);
        assert!(!sol.has_negative);
    }

    #[test]
    fn equal_compute_two_identical_nodes_split_evenly() {
        let nodes = vec![
            NodeComputeModel::new(0, 0.001, 0.05, 0.002, 0.10).unwrap(),
            NodeComputeModel::new(1, 0.001, 0.05, 0.002, 0.10).unwrap(),
        ];
        let spec = ClusterSpec::new(nodes, CommModel::new(0.5, 0.02, 0.01).unwrap(), None).unwrap();
        let sol = solve_equal_compute(&spec, 100).unwrap();
        assert_relative_eq!(sol.locals[0], 50.0, epsilon = 1e-9);
        assert_relative_eq!(sol.locals[1], 50.0, epsilon = 1e-9);
    }

    #[test]
    fn equal_compute_single_node() {
        let nodes = vec![NodeComputeModel::new(0, 0.001, 0.05, 0.002, 0.10).unwrap()];
        let spec = ClusterSpec::new(nodes, CommModel::new(0.5, 0.02, 0.01).unwrap(), None).unwrap();
        let sol = solve_equal_compute(&spec, 100).unwrap();
        assert_relative_eq!(sol.locals[0], 100.0);
        assert_relative_eq!(sol.time, 0.003 * 100.0 + 0.15, epsilon = 1e-12);
    }

    #[test]
    fn equal_syncstart_hand_example() {
        let sol = solve_equal_syncstart(&spec2(), 100).unwrap();
        assert_relative_eq!(sol.time, 0.22, epsilon = 1e-12);
        assert_relative_eq!(sol.locals[0], 60.0, epsilon = 1e-9);
        assert_relative_eq!(sol.locals[1], 40.0, epsilon = 1e-9);
        let spec = spec2();
        let s0 = spec.node(0).sync_start(spec.comm(), sol.locals[0]).unwrap();
        let s1 = spec.node(1).sync_start(spec.comm(), sol.locals[1]).unwrap();
        assert_relative_eq!(s0, s1, epsilon = 1e-12);
    }

    #[test]
    fn equal_syncstart_degenerates_to_equal_compute_as_gamma_approaches_one() {
        let nodes = vec![
            NodeComputeModel::new(0, 0.001, 0.05, 0.002, 0.10).unwrap(),
            NodeComputeModel::new(1, 0.002, 0.02, 0.004, 0.08).unwrap(),
        ];
        let spec = ClusterSpec::new(
            nodes,
            CommModel::new(1.0 - 1e-12, 0.02, 0.01).unwrap(),
            None,
        )
        .unwrap();
        let a = solve_equal_compute(&spec, 100).unwrap();
        let b = solve_equal_syncstart(&spec, 100).unwrap();
        assert_relative_eq!(a.time, b.time, epsilon = 1e-6);
        assert_relative_eq!(a.locals[0], b.locals[0], epsilon = 1e-6);
    }

    #[test]
    fn mixed_with_empty_comm_side_equals_equal_compute() {
        let spec = spec2();
        let mixed = solve_mixed(&spec, 100, &[BottleneckLabel::Compute; 2]).unwrap();
        let eq = solve_equal_compute(&spec, 100).unwrap();
        assert_relative_eq!(mixed.t_comb, eq.time, epsilon = 1e-12);
        assert_relative_eq!(mixed.locals[0], eq.locals[0], epsilon = 1e-12);
    }

    #[test]
    fn mixed_with_empty_compute_side_is_syncstart_shifted_by_t_o() {
        let spec = spec2();
        let mixed = solve_mixed(&spec, 100, &[BottleneckLabel::Communication; 2]).unwrap();
        let eq = solve_equal_syncstart(&spec, 100).unwrap();
        assert_relative_eq!(mixed.t_comb, eq.time + spec.comm().t_o, epsilon = 1e-12);
        assert_relative_eq!(mixed.locals[0], eq.locals[0], epsilon = 1e-12);
    }

    #[test]
    fn warmup_inverse_proportional() {
        let alloc = warmup_allocation(&[0.001, 0.003], 100).unwrap();
        assert_eq!(alloc.as_integers().unwrap(), vec![75, 25]);

        let alloc = warmup_allocation(&[0.001, 0.001, 0.002], 100).unwrap();
        assert_eq!(alloc.as_integers().unwrap(), vec![40, 40, 20]);
    }

    #[test]
    fn warmup_equal_times_split_evenly() {
        let alloc = warmup_allocation(&[0.002; 4], 128).unwrap();
        assert_eq!(alloc.as_integers().unwrap(), vec![32; 4]);
    }

    #[test]
    fn warmup_rejects_nonpositive_times() {
        assert!(warmup_allocation(&[0.001, 0.0], 100).is_err());
        assert!(warmup_allocation(&[0.001, -0.2], 100).is_err());
    }

    #[test]
    fn rounding_largest_remainder() {
        let a = Allocation::new(100, vec![61.11, 38.89]).unwrap();
        assert_eq!(round_allocation(&a).as_integers().unwrap(), vec![61, 39]);

        let a = Allocation::new(100, vec![33.4, 33.3, 33.3]).unwrap();
        assert_eq!(
            round_allocation(&a).as_integers().unwrap(),
            vec![34, 33, 33]
        );
    }

    #[test]
    fn rounding_keeps_integer_input_unchanged() {
        let a = Allocation::new(100, vec![61.0, 39.0]).unwrap();
        assert_eq!(round_allocation(&a).locals(), a.locals());
    }

    #[test]
    fn rounding_stays_within_one_sample() {
        let a = Allocation::new(10, vec![3.2, 3.4, 3.4]).unwrap();
        let r = round_allocation(&a);
        assert_eq!(r.locals().iter().sum::<f64>(), 10.0);
        for (x, y) in a.locals().iter().zip(r.locals()) {
            assert!((x - y).abs() < 1.0);
        }
    }

    #[test]
    fn find_optperf_homogeneous_cluster_splits_evenly() {
        let nodes = (0..4)
            .map(|i| NodeComputeModel::new(i, 0.001, 0.05, 0.002, 0.10).unwrap())
            .collect();
        let spec = ClusterSpec::new(nodes, CommModel::new(0.5, 0.02, 0.01).unwrap(), None).unwrap();
        let sol = find_optperf(&spec, 128, None).unwrap();
        assert_eq!(sol.alloc_int.as_integers().unwrap(), vec![32; 4]);
        let per_node = spec.node(0).node_batch_time(spec.comm(), 32.0).unwrap();
        assert_relative_eq!(sol.batch_time, per_node, epsilon = 1e-12);
    }

    #[test]
    fn find_optperf_all_compute_matches_equal_compute() {
        // t_o tiny: both nodes stay compute-limited
        let nodes = vec![
            NodeComputeModel::new(0, 0.001, 0.05, 0.002, 0.10).unwrap(),
            NodeComputeModel::new(1, 0.002, 0.02, 0.004, 0.08).unwrap(),
        ];
        let spec =
            ClusterSpec::new(nodes, CommModel::new(0.5, 0.001, 0.01).unwrap(), None).unwrap();
        let sol = find_optperf(&spec, 100, None).unwrap();
        assert_eq!(sol.scenario, Scenario::AllCompute);
        let eq = solve_equal_compute(&spec, 100).unwrap();
        assert_relative_eq!(sol.batch_time, eq.time + 0.01, epsilon = 1e-12);
    }

    #[test]
    fn find_optperf_all_comm_matches_equal_syncstart() {
        // t_o huge: both nodes communication-limited
        let nodes = vec![
            NodeComputeModel::new(0, 0.001, 0.05, 0.002, 0.10).unwrap(),
            NodeComputeModel::new(1, 0.002, 0.02, 0.004, 0.08).unwrap(),
        ];
        let spec = ClusterSpec::new(nodes, CommModel::new(0.5, 2.0, 0.01).unwrap(), None).unwrap();
        let sol = find_optperf(&spec, 100, None).unwrap();
        assert_eq!(sol.scenario, Scenario::AllComm);
        let eq = solve_equal_syncstart(&spec, 100).unwrap();
        assert_relative_eq!(sol.batch_time, eq.time + 2.01, epsilon = 1e-12);
    }

    #[test]
    fn find_optperf_agrees_with_grid_oracle_two_nodes() {
        let spec = spec2();
        let sol = find_optperf(&spec, 100, None).unwrap();
        let oracle = brute_force_optperf(&spec, 100, 0.01).unwrap();
        assert!(sol.batch_time <= oracle.batch_time + 1e-4);
        assert!(oracle.batch_time >= sol.batch_time - 1e-6);
    }

    #[test]
    fn clamps_node_to_zero_when_equalizing_needs_negative_share() {
        // node 1 is so slow at b=0 that any equal-compute split goes negative
        let nodes = vec![
            NodeComputeModel::new(0, 0.001, 0.01, 0.001, 0.01).unwrap(),
            NodeComputeModel::new(1, 0.05, 1.0, 0.05, 1.0).unwrap(),
        ];
        let spec =
            ClusterSpec::new(nodes, CommModel::new(0.5, 0.001, 0.01).unwrap(), None).unwrap();
        let raw = solve_equal_compute(&spec, 10).unwrap();
        assert!(raw.has_negative);

        let sol = find_optperf(&spec, 10, None).unwrap();
        assert_eq!(sol.clamped_zero, vec![1]);
        assert_relative_eq!(sol.alloc_real.locals()[1], 0.0);
        assert_relative_eq!(sol.alloc_real.locals()[0], 10.0);
        // batch time is the zero-batch straggler's time
        assert_relative_eq!(sol.batch_time, 2.0 + 0.01, epsilon = 1e-9);
    }

    #[test]
    fn caps_clamp_and_redistribute() {
        let nodes = vec![
            NodeComputeModel::new(0, 0.001, 0.05, 0.002, 0.10).unwrap(),
            NodeComputeModel::new(1, 0.002, 0.02, 0.004, 0.08).unwrap(),
        ];
        let spec = ClusterSpec::new(
            nodes,
            CommModel::new(0.5, 0.001, 0.01).unwrap(),
            Some(vec![50, 100]),
        )
        .unwrap();
        // uncapped optimum wants ~61 on node 0; the cap forces 50/50
        let sol = find_optperf(&spec, 100, None).unwrap();
        assert_eq!(sol.clamped_cap, vec![0]);
        assert_relative_eq!(sol.alloc_real.locals()[0], 50.0);
        assert_relative_eq!(sol.alloc_real.locals()[1], 50.0);
    }

    #[test]
    fn infeasible_when_caps_cannot_hold_the_batch() {
        let nodes = vec![
            NodeComputeModel::new(0, 0.001, 0.05, 0.002, 0.10).unwrap(),
            NodeComputeModel::new(1, 0.002, 0.02, 0.004, 0.08).unwrap(),
        ];
        let spec = ClusterSpec::new(
            nodes,
            CommModel::new(0.5, 0.001, 0.01).unwrap(),
            Some(vec![30, 30]),
        )
        .unwrap();
        assert!(matches!(
            find_optperf(&spec, 100, None),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn warm_start_does_not_change_the_result() {
        let nodes = vec![
            NodeComputeModel::new(0, 0.0005, 0.01, 0.001, 0.02).unwrap(),
            NodeComputeModel::new(1, 0.001, 0.03, 0.002, 0.05).unwrap(),
            NodeComputeModel::new(2, 0.002, 0.06, 0.004, 0.09).unwrap(),
            NodeComputeModel::new(3, 0.004, 0.09, 0.008, 0.15).unwrap(),
        ];
        let spec = ClusterSpec::new(nodes, CommModel::new(0.4, 0.12, 0.02).unwrap(), None).unwrap();
        for b in [64u64, 128, 256, 512] {
            let cold = find_optperf(&spec, b, None).unwrap();
            for warm in [
                Scenario::AllCompute,
                Scenario::AllComm,
                Scenario::Mixed { boundary: 0 },
                Scenario::Mixed { boundary: 3 },
            ] {
                let sol = find_optperf(&spec, b, Some(warm)).unwrap();
                assert_eq!(sol.scenario, cold.scenario);
                assert_relative_eq!(sol.batch_time, cold.batch_time, epsilon = 1e-12);
                assert_eq!(sol.alloc_int.locals(), cold.alloc_int.locals());
            }
        }
    }

    #[test]
    fn oracle_single_node_takes_everything() {
        let nodes = vec![NodeComputeModel::new(0, 0.001, 0.05, 0.002, 0.10).unwrap()];
        let spec = ClusterSpec::new(nodes, CommModel::new(0.5, 0.02, 0.01).unwrap(), None).unwrap();
        let sol = brute_force_optperf(&spec, 100, 0.5).unwrap();
        assert_eq!(sol.alloc_real.locals(), &[100.0]);
    }
}
