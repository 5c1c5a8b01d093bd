//! Epoch-level driver: even-split and model-free warmup epochs, online model
//! learning, candidate batch-size enumeration with cached solver state, and
//! goodput-based total-batch-size selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gns::{gns_estimate, LocalGradientStat, NoiseScaleEma};
use crate::learner::LearnedModel;
use crate::optperf::{
    find_optperf, round_allocation, warmup_allocation, OptPerfSolution, Scenario,
};
use crate::perf_model::{Allocation, ClusterSpec};
use crate::simulator::{GradientTruth, TruthWorld};

/// Geometrically spaced integer batch-size candidates from `b_min` to `b_max`
/// inclusive, deduplicated. When `count` exceeds the number of integers in
/// the range, every integer in the range is returned.
pub fn enumerate_candidates(b_min: u64, b_max: u64, count: usize) -> Result<Vec<u64>> {
    if b_min < 1 || b_max < b_min || count < 1 {
        return Err(Error::InvalidParameter(format!(
            "invalid candidate range: b_min={b_min}, b_max={b_max}, count={count}"
        )));
    }
    let span = b_max - b_min + 1;
    if count as u64 >= span {
        return Ok((b_min..=b_max).collect());
    }
    if count == 1 {
        return Ok(vec![b_min]);
    }
    let ratio = b_max as f64 / b_min as f64;
    let mut out: Vec<u64> = (0..count)
        .map(|k| {
            let t = k as f64 / (count - 1) as f64;
            (b_min as f64 * ratio.powf(t)).round() as u64
        })
        .collect();
    out.dedup();
    Ok(out)
}

/// One cached solver result per candidate total batch size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateEntry {
    pub batch: u64,
    /// `None` when the solver reported the candidate infeasible
    pub solution: Option<OptPerfSolution>,
}

/// Cached solutions for all candidates, ascending in the batch size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateTable {
    entries: Vec<CandidateEntry>,
    pub stale: bool,
}

impl CandidateTable {
    pub fn entries(&self) -> &[CandidateEntry] {
        &self.entries
    }

    pub fn get(&self, batch: u64) -> Option<&CandidateEntry> {
        self.entries.iter().find(|e| e.batch == batch)
    }

    fn update_entry(&mut self, batch: u64, solution: OptPerfSolution) {
        if let Some(entry) = self.entries.iter_mut().find(|e| e.batch == batch) {
            entry.solution = Some(solution);
        }
    }
}

/// Solve every candidate in ascending order, chaining each solution's
/// scenario into the next candidate's warm start, and cache the results.
pub fn init_table(spec: &ClusterSpec, candidates: &[u64]) -> CandidateTable {
    build_table(spec, candidates).0
}

fn build_table(spec: &ClusterSpec, candidates: &[u64]) -> (CandidateTable, usize) {
    let mut entries = Vec::with_capacity(candidates.len());
    let mut warm: Option<Scenario> = None;
    let mut calls = 0;
    for &batch in candidates {
        calls += 1;
        match find_optperf(spec, batch, warm) {
            Ok(sol) => {
                warm = Some(sol.scenario);
                entries.push(CandidateEntry {
                    batch,
                    solution: Some(sol),
                });
            }
            Err(_) => entries.push(CandidateEntry {
                batch,
                solution: None,
            }),
        }
    }
    (
        CandidateTable {
            entries,
            stale: false,
        },
        calls,
    )
}

/// Statistical efficiency of total batch `b` relative to `b_ref`:
/// `(b_ref + b_noise) / (b + b_noise)`, 1 at `b = b_ref`.
pub fn efficiency(b: f64, b_noise: f64, b_ref: f64) -> f64 {
    (b_ref + b_noise) / (b + b_noise)
}

/// Pick the candidate maximizing goodput = throughput x efficiency, with
/// throughput `B / OptPerf(B)`. Ties break toward the smaller batch.
pub fn select_batch_size(table: &CandidateTable, b_noise: f64, b_ref: f64) -> Result<(u64, f64)> {
    if b_noise < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "b_noise must be >= 0, got {b_noise}"
        )));
    }
    let mut best: Option<(u64, f64)> = None;
    for entry in &table.entries {
        let Some(sol) = &entry.solution else { continue };
        let b = entry.batch as f64;
        let goodput = b / sol.batch_time * efficiency(b, b_noise, b_ref);
        if best.is_none_or(|(_, g)| goodput > g) {
            best = Some((entry.batch, goodput));
        }
    }
    best.ok_or(Error::Infeasible("no feasible batch-size candidate".into()))
}

/// Per-epoch tr(Sigma) of the synthetic gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrSigmaSchedule {
    Constant {
        value: f64,
    },
    /// `initial * rate^epoch`
    Decay {
        initial: f64,
        rate: f64,
    },
}

impl TrSigmaSchedule {
    pub fn at(&self, epoch: u64) -> f64 {
        match *self {
            TrSigmaSchedule::Constant { value } => value,
            TrSigmaSchedule::Decay { initial, rate } => initial * rate.powf(epoch as f64),
        }
    }
}

/// How an epoch's allocation was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Phase {
    EvenSplit,
    Warmup,
    Optimized(Scenario),
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::EvenSplit => write!(f, "EvenSplit"),
            Phase::Warmup => write!(f, "Warmup"),
            Phase::Optimized(s) => write!(f, "{s}"),
        }
    }
}

/// Everything reported about one training epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: u64,
    pub chosen_batch: u64,
    pub allocation: Vec<u64>,
    /// solver-predicted batch time; absent until the model is ready
    pub predicted_time: Option<f64>,
    pub realized_mean_time: f64,
    pub b_noise: f64,
    pub efficiency: f64,
    pub goodput: f64,
    pub phase: Phase,
    pub model_ready: bool,
}

/// Full configuration of a simulated training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub world: TruthWorld,
    pub epochs: u64,
    pub batches_per_epoch: u64,
    pub b_min: u64,
    pub b_max: u64,
    pub candidate_count: usize,
    /// efficiency reference batch; defaults to the initial batch size
    pub b_ref: Option<u64>,
    /// disable adaptive selection and train at this total batch size
    pub fixed_batch: Option<u64>,
    pub tr_sigma_schedule: TrSigmaSchedule,
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.world.spec.len() as u64;
        if self.epochs < 1 || self.batches_per_epoch < 1 {
            return Err(Error::InvalidParameter(
                "epochs and batches_per_epoch must be >= 1".into(),
            ));
        }
        if self.b_min < n {
            return Err(Error::InvalidParameter(format!(
                "b_min={} is below the node count {n}",
                self.b_min
            )));
        }
        if self.b_max < self.b_min || self.candidate_count < 1 {
            return Err(Error::InvalidParameter(format!(
                "invalid candidate range {}..{} x{}",
                self.b_min, self.b_max, self.candidate_count
            )));
        }
        if let Some(b) = self.fixed_batch {
            if b < n {
                return Err(Error::InvalidParameter(format!(
                    "fixed batch {b} is below the node count {n}"
                )));
            }
        }
        Ok(())
    }
}

// A node whose warmup batch lands close to its previous batch gets no
// leverage to fit its time lines against noisy telemetry: the fitted-slope
// error grows like noise_cv / delta_b. Every node therefore has to move by
// at least `sep_fraction` of its previous size between the two learning
// epochs (one sample when the telemetry is noiseless, where any two distinct
// sizes interpolate exactly). Under-explored nodes are paired and swap that
// separation between themselves (keeping the total fixed); an odd one out
// borrows from the node with the most separation to spare. Allocations
// already separated pass through untouched.
fn diversify(
    alloc: Allocation,
    prev: &[u64],
    caps: Option<&[u64]>,
    sep_fraction: f64,
) -> Result<Allocation> {
    let Some(mut ints) = alloc.as_integers() else {
        return Ok(alloc);
    };
    if prev.len() != ints.len() {
        return Ok(alloc);
    }
    let n = ints.len();
    let cap_of = |i: usize| caps.map_or(u64::MAX, |c| c[i]);
    let min_sep = |i: usize| ((prev[i] as f64) * sep_fraction).ceil().max(1.0) as u64;
    let sep = |b: u64, i: usize| b.abs_diff(prev[i]);

    let todo: Vec<usize> = (0..n).filter(|&i| sep(ints[i], i) < min_sep(i)).collect();
    if todo.is_empty() {
        return Ok(alloc);
    }

    // transfer `s` samples from j to i if both end up separated and in bounds
    let try_shift = |ints: &mut Vec<u64>, i: usize, j: usize, s: u64| -> bool {
        if ints[j] < s + 1 || ints[i] + s > cap_of(i) {
            return false;
        }
        let bi = ints[i] + s;
        let bj = ints[j] - s;
        if sep(bi, i) >= min_sep(i) && sep(bj, j) >= min_sep(j) {
            ints[i] = bi;
            ints[j] = bj;
            true
        } else {
            false
        }
    };

    for pair in todo.chunks(2) {
        match *pair {
            [i, j] => {
                let s = (min_sep(i) + sep(ints[i], i)).max(min_sep(j) + sep(ints[j], j));
                let _ = try_shift(&mut ints, i, j, s) || try_shift(&mut ints, j, i, s);
            }
            [i] => {
                // borrow from the best-separated node that stays separated
                let s = min_sep(i) + sep(ints[i], i);
                let mut partners: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                partners.sort_by_key(|&j| std::cmp::Reverse(sep(ints[j], j)));
                for j in partners {
                    if try_shift(&mut ints, i, j, s) || try_shift(&mut ints, j, i, s) {
                        break;
                    }
                }
            }
            _ => unreachable!(),
        }
    }
    Allocation::new(alloc.total(), ints.into_iter().map(|b| b as f64).collect())
}

/// Reports plus per-epoch solver-call counts (the instrumentation hook for
/// the one-solve-per-epoch cache property).
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub reports: Vec<EpochReport>,
    pub solver_calls_per_epoch: Vec<usize>,
}

/// Run the epoch loop: epoch 0 splits evenly, epoch 1 uses the model-free
/// warmup split from observed per-sample times, and once every node has two
/// distinct batch sizes the learned models drive goodput-based selection and
/// optimal allocation. A change in the realized per-node bottleneck labels
/// rebuilds the candidate table; otherwise only the chosen entry is
/// refreshed.
pub fn run_training(cfg: &TrainingConfig) -> Result<TrainingRun> {
    cfg.validate()?;
    let n = cfg.world.spec.len();
    let caps = cfg.world.spec.caps().map(|c| c.to_vec());
    let b0 = cfg.fixed_batch.unwrap_or(cfg.b_min);
    let b_ref = cfg.b_ref.unwrap_or(b0) as f64;
    let candidates = match cfg.fixed_batch {
        Some(b) => vec![b],
        None => enumerate_candidates(cfg.b_min, cfg.b_max, cfg.candidate_count)?,
    };

    let mut learner = LearnedModel::new(n);
    let mut ema = NoiseScaleEma::new(0.9);
    let mut table: Option<CandidateTable> = None;
    let mut reports = Vec::with_capacity(cfg.epochs as usize);
    let mut solver_calls = Vec::with_capacity(cfg.epochs as usize);

    for epoch in 0..cfg.epochs {
        let mut calls = 0usize;
        let world = TruthWorld {
            gradient_truth: GradientTruth {
                mean: cfg.world.gradient_truth.mean.clone(),
                tr_sigma: cfg.tr_sigma_schedule.at(epoch),
            },
            ..cfg.world.clone()
        };

        let model_ready = learner.ready();
        let (phase, chosen_batch, alloc, predicted) = if !model_ready {
            let warmup = if epoch > 0 {
                let t_sample: Option<Vec<f64>> =
                    (0..n).map(|i| learner.last_epoch_sample_time(i)).collect();
                t_sample.map(|ts| warmup_allocation(&ts, b0)).transpose()?
            } else {
                None
            };
            match warmup {
                Some(alloc) => {
                    // warmup exists to produce a second, usefully different
                    // batch size per node
                    let prev = reports
                        .last()
                        .map(|r: &EpochReport| r.allocation.clone())
                        .unwrap_or_default();
                    let sep_fraction = (5.0 * cfg.world.noise_cv).min(0.4);
                    let alloc = diversify(alloc, &prev, caps.as_deref(), sep_fraction)?;
                    (Phase::Warmup, b0, alloc, None)
                }
                None => (
                    Phase::EvenSplit,
                    b0,
                    round_allocation(&Allocation::even_split(b0, n)?),
                    None,
                ),
            }
        } else {
            let spec = learner.to_cluster_spec(caps.clone())?;
            if table.as_ref().is_none_or(|t| t.stale) {
                let (t, c) = build_table(&spec, &candidates);
                calls += c;
                table = Some(t);
            }
            let b_noise = ema.b_noise().unwrap_or(0.0);
            let (mut chosen, _) = select_batch_size(table.as_ref().unwrap(), b_noise, b_ref)?;
            let cached = table
                .as_ref()
                .unwrap()
                .get(chosen)
                .and_then(|e| e.solution.clone());
            let mut fresh = find_optperf(&spec, chosen, cached.as_ref().map(|s| s.scenario))?;
            calls += 1;
            let labels_changed = cached.as_ref().is_some_and(|c| c.labels != fresh.labels);
            if labels_changed {
                // overlap pattern moved: redo every candidate, then re-choose
                table.as_mut().unwrap().stale = true;
                let (t, c) = build_table(&spec, &candidates);
                calls += c;
                table = Some(t);
                let (rechosen, _) = select_batch_size(table.as_ref().unwrap(), b_noise, b_ref)?;
                chosen = rechosen;
                fresh = table
                    .as_ref()
                    .unwrap()
                    .get(chosen)
                    .and_then(|e| e.solution.clone())
                    .ok_or(Error::Infeasible("re-chosen candidate infeasible".into()))?;
            } else {
                table.as_mut().unwrap().update_entry(chosen, fresh.clone());
            }
            // predict the time of the integer allocation actually loaded
            let time = spec.cluster_batch_time(&fresh.alloc_int)?;
            (
                Phase::Optimized(fresh.scenario),
                chosen,
                fresh.alloc_int,
                Some(time),
            )
        };

        let mut time_sum = 0.0;
        let mut epoch_obs = Vec::with_capacity((cfg.batches_per_epoch as usize) * n);
        let gradients_on = n >= 2
            && alloc
                .as_integers()
                .is_some_and(|v| v.iter().all(|&b| b >= 1));
        for batch in 0..cfg.batches_per_epoch {
            let trace = world.simulate_batch(&alloc, epoch, batch)?;
            time_sum += trace.batch_time;
            epoch_obs.extend(trace.observations);

            if gradients_on {
                let sample = world.sample_local_means(&alloc, epoch, batch)?;
                let ints = alloc.as_integers().unwrap();
                let stats: Vec<LocalGradientStat> = ints
                    .iter()
                    .enumerate()
                    .map(|(node_id, &b)| LocalGradientStat {
                        node_id,
                        b,
                        local_sq_norm: sample.local_sq_norms[node_id],
                    })
                    .collect();
                if let Ok(est) = gns_estimate(&stats, sample.global_sq_norm, chosen_batch) {
                    ema.update(&est);
                }
            }
        }
        learner.update(&epoch_obs);

        let realized_mean_time = time_sum / cfg.batches_per_epoch as f64;
        let b_noise = ema.b_noise().unwrap_or(0.0);
        let eff = efficiency(chosen_batch as f64, b_noise, b_ref);
        let throughput = chosen_batch as f64 / realized_mean_time;
        reports.push(EpochReport {
            epoch,
            chosen_batch,
            allocation: alloc.as_integers().expect("loop allocations are integral"),
            predicted_time: predicted,
            realized_mean_time,
            b_noise,
            efficiency: eff,
            goodput: throughput * eff,
            phase,
            model_ready,
        });
        solver_calls.push(calls);
    }

    Ok(TrainingRun {
        reports,
        solver_calls_per_epoch: solver_calls,
    })
}
