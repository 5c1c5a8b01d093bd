//! The three subcommands: one-shot solving, full simulated training runs,
//! and Monte-Carlo validation of the noise-scale estimator.

use std::fmt::Write as _;
use std::path::Path;

use optperf_core::{
    find_optperf, gns_estimate, predicted_moments, run_training, sample_sq_norms_delta_model,
    substream, weight_matrices, BottleneckLabel, Error as CoreError, LocalGradientStat,
    OptPerfSolution, SquareMatrix,
};

use crate::config::RunConfig;
use crate::report::{self, sig9};

/// Exit-code contract: 0 success, 1 usage/config error, 2 infeasible problem.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Infeasible(_)) => 2,
        _ => 1,
    }
}

fn solution_text(sol: &OptPerfSolution) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "batch_time: {} s", sig9(sol.batch_time));
    let _ = writeln!(out, "scenario:   {}", sol.scenario);
    let _ = writeln!(out, "node  b_real          b_int   label");
    for (i, (&b_real, &b_int)) in sol
        .alloc_real
        .locals()
        .iter()
        .zip(sol.alloc_int.locals())
        .enumerate()
    {
        let label = match sol.labels[i] {
            BottleneckLabel::Compute => "Compute",
            BottleneckLabel::Communication => "Communication",
        };
        let _ = writeln!(
            out,
            "{i:<5} {:<15} {:<7} {label}",
            sig9(b_real),
            b_int as u64
        );
    }
    if !sol.clamped_zero.is_empty() {
        let _ = writeln!(out, "pinned to zero samples: {:?}", sol.clamped_zero);
    }
    if !sol.clamped_cap.is_empty() {
        let _ = writeln!(out, "pinned at memory cap:  {:?}", sol.clamped_cap);
    }
    out
}

/// `solve`: optimal allocation of `batch` samples over the configured cluster.
pub fn cmd_solve(config_path: &Path, batch: u64, json: bool) -> anyhow::Result<String> {
    let cfg = RunConfig::load(config_path)?;
    let spec = cfg.cluster_spec()?;
    let sol = find_optperf(&spec, batch, None)?;
    if json {
        Ok(format!("{}\n", serde_json::to_string_pretty(&sol)?))
    } else {
        Ok(solution_text(&sol))
    }
}

/// `run`: simulate the configured training run and write `epochs.csv` and
/// `epochs.json` into `out_dir`.
pub fn cmd_run(config_path: &Path, out_dir: &Path) -> anyhow::Result<String> {
    let cfg = RunConfig::load(config_path)?;
    let training = cfg.training_config()?;
    let run = run_training(&training)?;
    report::write_reports(out_dir, &run.reports)?;
    let mut out = report::summary_table(&run.reports);
    let _ = writeln!(out, "reports written to {}", out_dir.display());
    Ok(out)
}

struct Moments {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    cross: SquareMatrix,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; n],
            m2: vec![0.0; n],
            cross: SquareMatrix::zeros(n),
        }
    }

    // online covariance accumulation
    fn push(&mut self, xs: &[f64]) {
        self.count += 1.0;
        let deltas: Vec<f64> = xs.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        for (i, d) in deltas.iter().enumerate() {
            self.mean[i] += d / self.count;
        }
        for i in 0..xs.len() {
            let post_i = xs[i] - self.mean[i];
            self.m2[i] += deltas[i] * post_i;
            for j in 0..xs.len() {
                let v = self.cross.get(i, j) + deltas[i] * (xs[j] - self.mean[j]);
                self.cross.set(i, j, v);
            }
        }
    }

    fn var(&self, i: usize) -> f64 {
        self.m2[i] / (self.count - 1.0).max(1.0)
    }

    fn cov(&self, i: usize, j: usize) -> f64 {
        self.cross.get(i, j) / (self.count - 1.0).max(1.0)
    }
}

fn ratio_str(empirical: f64, predicted: f64) -> String {
    if predicted == 0.0 {
        if empirical == 0.0 {
            "exact".to_string()
        } else {
            "n/a".to_string()
        }
    } else {
        format!("{:+.2}%", (empirical / predicted - 1.0) * 100.0)
    }
}

/// `gns-check`: Monte-Carlo comparison of empirical estimator moments with
/// the closed-form predictions, plus the weighted-vs-uniform variance ratio.
/// The local batch layout is the solver's optimal split of the fixed batch
/// size if one is configured, otherwise of the geometric midpoint of the
/// batch-size range.
pub fn cmd_gns_check(config_path: &Path, trials: u64) -> anyhow::Result<String> {
    let cfg = RunConfig::load(config_path)?;
    if trials < 1 {
        anyhow::bail!("--trials must be >= 1");
    }
    let spec = cfg.cluster_spec()?;
    if spec.len() < 2 {
        return Err(CoreError::Infeasible(
            "noise-scale estimation needs at least two nodes".into(),
        )
        .into());
    }
    let total = cfg.adaptive.fixed_batch.unwrap_or_else(|| {
        ((cfg.adaptive.b_min as f64) * (cfg.adaptive.b_max as f64))
            .sqrt()
            .round() as u64
    });
    let sol = find_optperf(&spec, total, None)?;
    let b_int = sol.alloc_int.as_integers().expect("rounded allocation");
    if b_int.iter().any(|&b| b < 1) {
        return Err(CoreError::Infeasible(
            "optimal split leaves a node without samples; raise the batch size".into(),
        )
        .into());
    }
    let b: Vec<f64> = b_int.iter().map(|&x| x as f64).collect();
    let n = b.len();
    let g_sq = cfg.gradients.g_sq_norm;
    let tr_sigma = cfg.gradients.tr_sigma.at(0);
    let predicted = predicted_moments(&b, total as f64, g_sq, tr_sigma)?;

    let (a_g, a_s) = weight_matrices(&b, total as f64)?;
    let w_g = optperf_core::optimal_weights(&a_g)?.weights;
    let w_s = optperf_core::optimal_weights(&a_s)?.weights;
    let uniform = vec![1.0 / n as f64; n];

    let mut rng = substream(cfg.simulation.seed, &[0x6E5]);
    let mut g_stats = Moments::new(n);
    let mut s_stats = Moments::new(n);
    // weighted G, uniform G, weighted S, uniform S, B_noise accumulators
    let mut agg = Moments::new(4);
    let mut sum_g = 0.0;
    let mut sum_s = 0.0;
    for _ in 0..trials {
        let (locals, global) =
            sample_sq_norms_delta_model(&b, total as f64, g_sq, tr_sigma, &mut rng)?;
        let stats: Vec<LocalGradientStat> = (0..n)
            .map(|i| LocalGradientStat {
                node_id: i,
                b: b_int[i],
                local_sq_norm: locals[i],
            })
            .collect();
        let ests: Vec<_> = stats
            .iter()
            .map(|s| optperf_core::local_estimates(s, global, total))
            .collect::<optperf_core::Result<_>>()?;
        let g_i: Vec<f64> = ests.iter().map(|e| e.g_est).collect();
        let s_i: Vec<f64> = ests.iter().map(|e| e.s_est).collect();
        g_stats.push(&g_i);
        s_stats.push(&s_i);
        let dot = |w: &[f64], x: &[f64]| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        agg.push(&[
            dot(&w_g, &g_i),
            dot(&uniform, &g_i),
            dot(&w_s, &s_i),
            dot(&uniform, &s_i),
        ]);
        let est = gns_estimate(&stats, global, total)?;
        sum_g += est.g_agg;
        sum_s += est.s_agg;
    }

    let mut out = String::new();
    let _ = writeln!(
        out,
        "noise-scale estimator check: {trials} trials, b = {b_int:?}, B = {total}"
    );
    let _ = writeln!(
        out,
        "true |G|^2 = {}, true tr(Sigma) = {}",
        sig9(g_sq),
        sig9(tr_sigma)
    );
    if trials < 100 {
        let _ = writeln!(
            out,
            "warning: {trials} trial(s) give wide Monte-Carlo intervals; treat deviations as noise"
        );
    }
    let _ = writeln!(out, "\naggregated means over trials:");
    let _ = writeln!(
        out,
        "  mean(G) = {}  (truth {})    mean(S) = {}  (truth {})",
        sig9(sum_g / trials as f64),
        sig9(g_sq),
        sig9(sum_s / trials as f64),
        sig9(tr_sigma)
    );

    let _ = writeln!(out, "\nper-node moments, empirical vs predicted:");
    let _ = writeln!(
        out,
        "  quantity        node  empirical       predicted       deviation"
    );
    for i in 0..n {
        let _ = writeln!(
            out,
            "  Var(G_i)        {i:<5} {:<15} {:<15} {}",
            sig9(g_stats.var(i)),
            sig9(predicted.var_g[i]),
            ratio_str(g_stats.var(i), predicted.var_g[i])
        );
    }
    for i in 0..n {
        let _ = writeln!(
            out,
            "  Var(S_i)        {i:<5} {:<15} {:<15} {}",
            sig9(s_stats.var(i)),
            sig9(predicted.var_s[i]),
            ratio_str(s_stats.var(i), predicted.var_s[i])
        );
    }
    if n >= 2 {
        let _ = writeln!(
            out,
            "  Cov(G_0,G_1)    -     {:<15} {:<15} {}",
            sig9(g_stats.cov(0, 1)),
            sig9(predicted.cov_g.get(0, 1)),
            ratio_str(g_stats.cov(0, 1), predicted.cov_g.get(0, 1))
        );
        let _ = writeln!(
            out,
            "  Cov(S_0,S_1)    -     {:<15} {:<15} {}",
            sig9(s_stats.cov(0, 1)),
            sig9(predicted.cov_s.get(0, 1)),
            ratio_str(s_stats.cov(0, 1), predicted.cov_s.get(0, 1))
        );
    }

    let var_wg = agg.var(0);
    let var_ug = agg.var(1);
    let var_ws = agg.var(2);
    let var_us = agg.var(3);
    let _ = writeln!(out, "\nweighted vs uniform aggregation variance:");
    let ratio = |w: f64, u: f64| {
        if u == 0.0 {
            "n/a".to_string()
        } else {
            format!("{:.4}", w / u)
        }
    };
    let _ = writeln!(
        out,
        "  Var(weighted G) = {}  Var(uniform G) = {}  ratio = {}",
        sig9(var_wg),
        sig9(var_ug),
        ratio(var_wg, var_ug)
    );
    let _ = writeln!(
        out,
        "  Var(weighted S) = {}  Var(uniform S) = {}  ratio = {}",
        sig9(var_ws),
        sig9(var_us),
        ratio(var_ws, var_us)
    );
    Ok(out)
}
