//! Deterministic weighted reductions over paths.
//!
//! Sums are taken over fixed-size chunks in parallel and the chunk results are
//! added in index order, so results do not depend on the worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub(crate) const CHUNK: usize = 4096;

/// `sum_j f(j)` over `0..n` with a fixed reduction tree.
pub(crate) fn det_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let chunks: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let end = ((c + 1) * CHUNK).min(n);
            (c * CHUNK..end).map(&f).sum::<f64>()
        })
        .collect();
    chunks.iter().sum()
}

/// Componentwise `sum_j f(j)` for vector-valued `f` of length `len`.
pub(crate) fn det_sum_vec<F>(n: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let chunks: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let end = ((c + 1) * CHUNK).min(n);
            let mut acc = vec![0.0; len];
            for j in c * CHUNK..end {
                f(j, &mut acc);
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; len];
    for ch in chunks {
        for (o, v) in out.iter_mut().zip(ch) {
            *o += v;
        }
    }
    out
}

/// Mean and Monte Carlo standard error of a per-path quantity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

impl Estimate {
    /// `|a - b|` measured in combined standard errors; treats a zero combined
    /// error as exact.
    pub fn z_distance(&self, other: &Estimate) -> f64 {
        let d = (self.mean - other.mean).abs();
        let s = self.stderr.hypot(other.stderr);
        if s == 0.0 {
            if d == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            d / s
        }
    }
}

/// Weighted mean and standard error of `values`.
///
/// Without weights every path counts `1/n` and the standard error is the
/// sample standard deviation over `sqrt(n)`. With weights `w` (summing to one)
/// it is `sqrt(sum w (v - mean)^2 * sum w^2)`, which matches the unweighted
/// formula up to the `n - 1` correction.
pub fn weighted_estimate(values: &[f64], weights: Option<&[f64]>) -> Estimate {
    let n = values.len();
    if n == 0 {
        return Estimate {
            mean: f64::NAN,
            stderr: f64::NAN,
        };
    }
    match weights {
        None => {
            let mean = det_sum(n, |j| values[j]) / n as f64;
            if n == 1 {
                return Estimate { mean, stderr: 0.0 };
            }
            let ss = det_sum(n, |j| (values[j] - mean).powi(2));
            Estimate {
                mean,
                stderr: (ss / (n as f64 - 1.0) / n as f64).sqrt(),
            }
        }
        Some(w) => {
            let mean = det_sum(n, |j| w[j] * values[j]);
            let var = det_sum(n, |j| w[j] * (values[j] - mean).powi(2));
            let w2 = det_sum(n, |j| w[j] * w[j]);
            Estimate {
                mean,
                stderr: (var * w2).max(0.0).sqrt(),
            }
        }
    }
}

/// Weighted mean only.
pub fn weighted_mean(values: &[f64], weights: Option<&[f64]>) -> f64 {
    let n = values.len();
    match weights {
        None => det_sum(n, |j| values[j]) / n as f64,
        Some(w) => det_sum(n, |j| w[j] * values[j]),
    }
}

/// Ordinary least squares `y = intercept + slope * x`.
pub(crate) fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (my - slope * mx, slope)
}
