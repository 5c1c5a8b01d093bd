//! Optimal local batch-size allocation for data-parallel training over
//! heterogeneous nodes: per-node performance models with ring-all-reduce
//! bucket overlap, a closed-form equal-time solver for the optimal split at
//! any total batch size, online learning of the model parameters from noisy
//! telemetry, minimum-variance gradient-noise-scale estimation across unequal
//! local batches, and an epoch-level adaptive driver, all validated against
//! an event-driven pipeline simulator and brute-force oracles.

pub mod adaptive_loop;
pub mod error;
pub mod fixture;
pub mod gns;
pub mod learner;
pub mod optperf;
pub mod perf_model;
pub mod simulator;

pub use adaptive_loop::{
    enumerate_candidates, init_table, run_training, select_batch_size, CandidateEntry,
    CandidateTable, EpochReport, Phase, TrSigmaSchedule, TrainingConfig, TrainingRun,
};
pub use error::{Error, Result};
pub use gns::{
    aggregate_gradients, gns_estimate, local_estimates, optimal_weights, predicted_moments,
    weight_matrices, GnsEstimate, LocalEstimates, LocalGradientStat, NoiseScaleEma,
    PredictedMoments, SquareMatrix,
};
pub use learner::{
    estimate_comm_time, estimate_gamma, fit_compute_model, CommEstimate, LearnedModel,
    TimingObservation,
};
pub use optperf::{
    brute_force_optperf, find_optperf, round_allocation, solve_equal_compute,
    solve_equal_syncstart, solve_mixed, warmup_allocation, EqualizedSolve, MixedSolve,
    OptPerfSolution, Scenario,
};
pub use perf_model::{Allocation, BottleneckLabel, ClusterSpec, CommModel, NodeComputeModel};
pub use simulator::{
    sample_sq_norms_delta_model, simulate_pipeline, substream, BatchTrace, GradientSample,
    GradientTruth, PipelineTrace, TruthWorld,
};
