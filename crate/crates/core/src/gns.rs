//! Gradient-noise-scale estimation across nodes with unequal local batches.
//!
//! Every node forms local unbiased estimates of the squared true-gradient
//! norm and of the total gradient variance from its own and the global
//! gradient norms. Because the estimates have batch-size-dependent variances
//! and are correlated through the shared global norm, they are combined with
//! minimum-variance weights derived from the closed-form covariance
//! structure, and the noise scale is the ratio of the two aggregates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One node's contribution to the noise-scale estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalGradientStat {
    pub node_id: usize,
    /// local batch size; must satisfy 1 <= b < B
    pub b: u64,
    /// squared norm of the node's mean gradient
    pub local_sq_norm: f64,
}

/// Per-node unbiased estimates of `|G|^2` and `tr(Sigma)`. Either may be
/// negative for a single draw; only their expectations are constrained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalEstimates {
    pub g_est: f64,
    pub s_est: f64,
}

/// Aggregated noise-scale estimate with the weights that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnsEstimate {
    pub g_agg: f64,
    pub s_agg: f64,
    /// noise scale `s_agg / g_agg`
    pub b_noise: f64,
    pub weights_g: Vec<f64>,
    pub weights_s: Vec<f64>,
    /// weights fell back to batch-size proportions (singular covariance)
    pub degraded: bool,
    /// false when `g_agg <= 0`; such snapshots are excluded from smoothing
    pub usable: bool,
}

/// Weighted combination of local gradients: `g = sum_i r_i g_i`.
pub fn aggregate_gradients(locals: &[Vec<f64>], ratios: &[f64]) -> Result<Vec<f64>> {
    if locals.is_empty() {
        return Err(Error::EmptyInput(
            "gradient aggregation needs at least one node",
        ));
    }
    if locals.len() != ratios.len() {
        return Err(Error::LengthMismatch {
            expected: locals.len(),
            got: ratios.len(),
        });
    }
    let ratio_sum: f64 = ratios.iter().sum();
    if (ratio_sum - 1.0).abs() > 1e-9 {
        return Err(Error::RatioSum(ratio_sum));
    }
    let d = locals[0].len();
    let mut out = vec![0.0; d];
    for (g, &r) in locals.iter().zip(ratios) {
        if g.len() != d {
            return Err(Error::DimensionMismatch(d, g.len()));
        }
        for (slot, &x) in out.iter_mut().zip(g) {
            *slot += r * x;
        }
    }
    Ok(out)
}

/// Local estimates from one node's squared norm and the global squared norm:
/// `G_i = (B|g|^2 - b_i|g_i|^2)/(B - b_i)`,
/// `S_i = (b_i B/(B - b_i)) (|g_i|^2 - |g|^2)`.
pub fn local_estimates(
    stat: &LocalGradientStat,
    global_sq_norm: f64,
    total: u64,
) -> Result<LocalEstimates> {
    let b = stat.b as f64;
    let big_b = total as f64;
    if !(b >= 1.0 && b < big_b) {
        return Err(Error::DegenerateBatch {
            node: stat.node_id,
            b,
            total: big_b,
        });
    }
    let g_est = (big_b * global_sq_norm - b * stat.local_sq_norm) / (big_b - b);
    let s_est = (b * big_b / (big_b - b)) * (stat.local_sq_norm - global_sq_norm);
    Ok(LocalEstimates { g_est, s_est })
}

/// Dense symmetric n-by-n matrix, row major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    /// Quadratic form `w' A w`.
    pub fn quadratic_form(&self, w: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                acc += w[i] * self.get(i, j) * w[j];
            }
        }
        acc
    }

    // Gaussian elimination with partial pivoting; returns the solution of
    // A x = rhs and the pivot-ratio condition estimate.
    fn solve(&self, rhs: &[f64]) -> Result<(Vec<f64>, f64)> {
        let n = self.n;
        let mut a = self.data.clone();
        let mut x = rhs.to_vec();
        let mut max_pivot: f64 = 0.0;
        let mut min_pivot = f64::INFINITY;
        for col in 0..n {
            let (pivot_row, pivot) = (col..n)
                .map(|r| (r, a[r * n + col]))
                .max_by(|lhs, rhs| lhs.1.abs().partial_cmp(&rhs.1.abs()).unwrap())
                .unwrap();
            if pivot.abs() < f64::MIN_POSITIVE * 1e4 || !pivot.is_finite() {
                return Err(Error::SingularMatrix);
            }
            max_pivot = max_pivot.max(pivot.abs());
            min_pivot = min_pivot.min(pivot.abs());
            if pivot_row != col {
                for j in 0..n {
                    a.swap(col * n + j, pivot_row * n + j);
                }
                x.swap(col, pivot_row);
            }
            for row in col + 1..n {
                let factor = a[row * n + col] / pivot;
                if factor == 0.0 {
                    continue;
                }
                for j in col..n {
                    a[row * n + j] -= factor * a[col * n + j];
                }
                x[row] -= factor * x[col];
            }
        }
        for col in (0..n).rev() {
            let mut acc = x[col];
            for j in col + 1..n {
                acc -= a[col * n + j] * x[j];
            }
            x[col] = acc / a[col * n + col];
        }
        Ok((x, max_pivot / min_pivot))
    }
}

/// The covariance-shape matrices of the local estimates, with the common
/// factor `4 |G|^2 tr(Sigma)` divided out:
/// `a_G(i,i) = (B+2b_i)/(B^2-B b_i)`,
/// `a_G(i,j) = (B^2-b_i^2-b_j^2)/(B(B-b_i)(B-b_j))`,
/// `a_S(i,i) = B b_i/(B-b_i)`,
/// `a_S(i,j) = b_i b_j (B-b_i-b_j)/((B-b_i)(B-b_j))`.
pub fn weight_matrices(b: &[f64], total: f64) -> Result<(SquareMatrix, SquareMatrix)> {
    let n = b.len();
    if n == 0 {
        return Err(Error::EmptyInput("weight matrices need at least one node"));
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
    let big_b = total;
    let mut a_g = SquareMatrix::zeros(n);
    let mut a_s = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let (bi, bj) = (b[i], b[j]);
            if i == j {
                a_g.set(i, j, (big_b + 2.0 * bi) / (big_b * big_b - big_b * bi));
                a_s.set(i, j, big_b * bi / (big_b - bi));
            } else {
                a_g.set(
                    i,
                    j,
                    (big_b * big_b - bi * bi - bj * bj) / (big_b * (big_b - bi) * (big_b - bj)),
                );
                a_s.set(
                    i,
                    j,
                    bi * bj * (big_b - bi - bj) / ((big_b - bi) * (big_b - bj)),
                );
            }
        }
    }
    Ok((a_g, a_s))
}

/// Minimum-variance unbiased combination weights `w = 1'A^{-1} / (1'A^{-1}1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSolve {
    pub weights: Vec<f64>,
    /// pivot-ratio condition estimate exceeded 1e12
    pub near_singular: bool,
}

pub fn optimal_weights(a: &SquareMatrix) -> Result<WeightSolve> {
    let ones = vec![1.0; a.n()];
    let (x, condition) = a.solve(&ones)?;
    let sum: f64 = x.iter().sum();
    if sum == 0.0 || !sum.is_finite() {
        return Err(Error::SingularMatrix);
    }
    let weights = x.iter().map(|v| v / sum).collect();
    Ok(WeightSolve {
        weights,
        near_singular: condition > 1e12,
    })
}

/// Aggregate the per-node statistics into the global noise-scale estimate.
/// On a singular covariance shape the weights degrade to batch-size
/// proportions and the estimate is flagged.
pub fn gns_estimate(
    stats: &[LocalGradientStat],
    global_sq_norm: f64,
    total: u64,
) -> Result<GnsEstimate> {
    if stats.len() < 2 {
        return Err(Error::EmptyInput(
            "noise-scale estimation needs at least two nodes",
        ));
    }
    let locals: Vec<LocalEstimates> = stats
        .iter()
        .map(|s| local_estimates(s, global_sq_norm, total))
        .collect::<Result<_>>()?;
    let b: Vec<f64> = stats.iter().map(|s| s.b as f64).collect();
    let (a_g, a_s) = weight_matrices(&b, total as f64)?;

    let proportional = || -> Vec<f64> { b.iter().map(|&bi| bi / total as f64).collect() };
    let mut degraded = false;
    let weights_g = match optimal_weights(&a_g) {
        Ok(w) => w.weights,
        Err(Error::SingularMatrix) => {
            degraded = true;
            proportional()
        }
        Err(e) => return Err(e),
    };
    let weights_s = match optimal_weights(&a_s) {
        Ok(w) => w.weights,
        Err(Error::SingularMatrix) => {
            degraded = true;
            proportional()
        }
        Err(e) => return Err(e),
    };

    let g_agg: f64 = weights_g
        .iter()
        .zip(&locals)
        .map(|(w, l)| w * l.g_est)
        .sum();
    let s_agg: f64 = weights_s
        .iter()
        .zip(&locals)
        .map(|(w, l)| w * l.s_est)
        .sum();
    Ok(GnsEstimate {
        g_agg,
        s_agg,
        b_noise: s_agg / g_agg,
        weights_g,
        weights_s,
        degraded,
        usable: g_agg > 0.0,
    })
}

/// Closed-form variance/covariance predictions for the local estimates and
/// the gradient norms they are built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedMoments {
    pub var_g: Vec<f64>,
    pub var_s: Vec<f64>,
    pub cov_g: SquareMatrix,
    pub cov_s: SquareMatrix,
    /// Var(|g_i|^2) ~= 4 |G|^2 tr(Sigma) / b_i
    pub var_norm_local: Vec<f64>,
    /// Var(|g|^2) ~= 4 |G|^2 tr(Sigma) / B
    pub var_norm_global: f64,
    /// Cov(|g|^2, |g_i|^2) = 4 b_i |G|^2 tr(Sigma) / B^2
    pub cov_norm_global_local: Vec<f64>,
}

/// Evaluate every closed-form second moment at the given batch layout and
/// true gradient moments.
pub fn predicted_moments(
    b: &[f64],
    total: f64,
    g_sq_norm: f64,
    tr_sigma: f64,
) -> Result<PredictedMoments> {
    let (a_g, a_s) = weight_matrices(b, total)?;
    let v = 4.0 * g_sq_norm * tr_sigma;
    let n = b.len();
    let mut cov_g = SquareMatrix::zeros(n);
    let mut cov_s = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            cov_g.set(i, j, v * a_g.get(i, j));
            cov_s.set(i, j, v * a_s.get(i, j));
        }
    }
    Ok(PredictedMoments {
        var_g: (0..n).map(|i| cov_g.get(i, i)).collect(),
        var_s: (0..n).map(|i| cov_s.get(i, i)).collect(),
        cov_g,
        cov_s,
        var_norm_local: b.iter().map(|&bi| v / bi).collect(),
        var_norm_global: v / total,
        cov_norm_global_local: b.iter().map(|&bi| v * bi / (total * total)).collect(),
    })
}

/// Exponential smoothing of the signal and variance aggregates separately;
/// the noise scale is the ratio of the smoothed terms. Snapshots with a
/// non-positive signal term are skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseScaleEma {
    decay: f64,
    g: Option<f64>,
    s: Option<f64>,
}

impl NoiseScaleEma {
    pub fn new(decay: f64) -> Self {
        Self {
            decay,
            g: None,
            s: None,
        }
    }

    pub fn update(&mut self, estimate: &GnsEstimate) {
        if !estimate.usable {
            return;
        }
        let blend = |old: Option<f64>, new: f64, decay: f64| match old {
            Some(v) => decay * v + (1.0 - decay) * new,
            None => new,
        };
        self.g = Some(blend(self.g, estimate.g_agg, self.decay));
        self.s = Some(blend(self.s, estimate.s_agg, self.decay));
    }

    /// Smoothed noise scale, clamped below at 0.
    pub fn b_noise(&self) -> Option<f64> {
        match (self.g, self.s) {
            (Some(g), Some(s)) if g > 0.0 => Some((s / g).max(0.0)),
            _ => None,
        }
    }
}
