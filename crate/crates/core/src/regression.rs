//! Least-squares Monte Carlo estimation of conditional expectations.
//!
//! Features are standardized, constant features are dropped, and the basis is
//! the set of monomials of total degree at most `degree`. Every non-intercept
//! column is centered and scaled by its weighted moments, so the fitted
//! intercept is exactly the weighted mean of the target and fitted values
//! preserve the target mean.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{det_sum, det_sum_vec};

/// Ridge added to the diagonal of the (unit-diagonal) normal matrix.
pub const RIDGE: f64 = 1e-10;
/// Condition number above which a design is rejected.
pub const MAX_CONDITION: f64 = 1e12;
/// Minimum paths per basis function for unweighted (Monte Carlo) designs.
pub const PATHS_PER_BASIS_FUNCTION: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub degree: usize,
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec { degree: 2 }
    }
}

/// Number of monomials of total degree `<= degree` in `dim` variables,
/// including the constant.
pub fn basis_size(dim: usize, degree: usize) -> usize {
    // C(dim + degree, degree)
    let mut num = 1u128;
    let mut den = 1u128;
    for i in 1..=degree as u128 {
        num *= dim as u128 + i;
        den *= i;
    }
    (num / den) as usize
}

fn monomials(dim: usize, degree: usize) -> Vec<Vec<u32>> {
    fn rec(dim: usize, left: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if cur.len() == dim {
            if cur.iter().any(|e| *e > 0) {
                out.push(cur.clone());
            }
            return;
        }
        for e in 0..=left {
            cur.push(e as u32);
            rec(dim, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(dim, degree, &mut Vec::with_capacity(dim), &mut out);
    out.sort_by_key(|m| (m.iter().sum::<u32>(), std::cmp::Reverse(m.clone())));
    out
}

/// Maps a raw feature vector to the centered, scaled basis columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    dim: usize,
    active: Vec<usize>,
    feat_mean: Vec<f64>,
    feat_scale: Vec<f64>,
    exponents: Vec<Vec<u32>>,
    col_mean: Vec<f64>,
    col_scale: Vec<f64>,
}

impl Transform {
    /// Number of non-intercept columns.
    pub fn n_columns(&self) -> usize {
        self.exponents.len()
    }

    fn raw_column(&self, x: &[f64], c: usize) -> f64 {
        let mut v = 1.0;
        for (a, e) in self.active.iter().zip(&self.exponents[c]) {
            if *e > 0 {
                let xi = (x[*a] - self.feat_mean[*a]) / self.feat_scale[*a];
                v *= xi.powi(*e as i32);
            }
        }
        v
    }

    fn columns_into(&self, x: &[f64], out: &mut [f64]) {
        for c in 0..self.exponents.len() {
            out[c] = (self.raw_column(x, c) - self.col_mean[c]) / self.col_scale[c];
        }
    }
}

/// Regression diagnostics for one design.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub basis_size: usize,
    pub condition: f64,
    pub residual_rms: f64,
}

/// A fitted conditional-expectation map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedMap {
    transform: Transform,
    intercept: f64,
    coefs: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

impl FittedMap {
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        let mut cols = vec![0.0; self.coefs.len()];
        self.transform.columns_into(x, &mut cols);
        self.intercept + cols.iter().zip(&self.coefs).map(|(c, b)| c * b).sum::<f64>()
    }

    /// Coefficients on the raw monomials of the (unstandardized) features,
    /// keyed by exponent vectors over all `dim` features. Constant term first.
    pub fn raw_polynomial(&self) -> Vec<(Vec<u32>, f64)> {
        // Expand each centered/scaled column back into raw monomials.
        use std::collections::BTreeMap;
        let t = &self.transform;
        let mut acc: BTreeMap<Vec<u32>, f64> = BTreeMap::new();
        *acc.entry(vec![0; t.dim]).or_default() += self.intercept;
        for (c, b) in self.coefs.iter().enumerate() {
            let w = b / t.col_scale[c];
            *acc.entry(vec![0; t.dim]).or_default() -= w * t.col_mean[c];
            // prod over active features of ((x_a - m_a)/s_a)^e, expanded binomially
            let mut terms: Vec<(Vec<u32>, f64)> = vec![(vec![0; t.dim], w)];
            for (a, e) in t.active.iter().zip(&t.exponents[c]) {
                let (m, s) = (t.feat_mean[*a], t.feat_scale[*a]);
                let mut next = Vec::new();
                for (mono, coef) in &terms {
                    for j in 0..=*e {
                        let binom = binomial(*e, j) as f64;
                        let mut mm = mono.clone();
                        mm[*a] += j;
                        let c2 = coef * binom * (-m).powi((*e - j) as i32) / s.powi(*e as i32);
                        next.push((mm, c2));
                    }
                }
                terms = next;
            }
            for (mono, coef) in terms {
                *acc.entry(mono).or_default() += coef;
            }
        }
        let mut v: Vec<_> = acc.into_iter().collect();
        v.sort_by_key(|(m, _)| (m.iter().sum::<u32>(), m.clone()));
        v
    }
}

fn binomial(n: u32, k: u32) -> u64 {
    (1..=k as u64).fold(1u64, |acc, i| acc * (n as u64 + 1 - i) / i)
}

/// Design matrix shared by several targets regressed on the same features.
pub struct Design<'a> {
    n: usize,
    weights: Option<&'a [f64]>,
    transform: Transform,
    /// Column-major `p x n`.
    cols: Vec<f64>,
    /// Damped normal matrix factor and the undamped matrix, for refinement.
    chol: Option<(nalgebra::Cholesky<f64, nalgebra::Dyn>, DMatrix<f64>)>,
    condition: f64,
}

impl<'a> Design<'a> {
    /// `features` is path-major with `dim` entries per path.
    pub fn build(features: &[f64], dim: usize, weights: Option<&'a [f64]>, basis: BasisSpec) -> Result<Self> {
        if dim == 0 || !features.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument("feature matrix has inconsistent shape".into()));
        }
        let n = features.len() / dim;
        if n == 0 {
            return Err(Error::InvalidArgument("regression needs at least one path".into()));
        }
        if let Some(j) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "regression feature is not finite on path {}",
                j / dim
            )));
        }
        let wsum = weights.map(|w| w.iter().sum::<f64>());
        let mean_of = |f: &(dyn Fn(usize) -> f64 + Sync)| -> f64 {
            match weights {
                None => det_sum(n, f) / n as f64,
                Some(w) => det_sum(n, |j| w[j] * f(j)) / wsum.unwrap(),
            }
        };

        let mut feat_mean = vec![0.0; dim];
        let mut feat_scale = vec![1.0; dim];
        let mut active = Vec::new();
        for a in 0..dim {
            let m = mean_of(&|j| features[j * dim + a]);
            let v = mean_of(&|j| (features[j * dim + a] - m).powi(2));
            feat_mean[a] = m;
            let s = v.max(0.0).sqrt();
            if s > 1e-12 * (1.0 + m.abs()) {
                feat_scale[a] = s;
                active.push(a);
            }
        }

        let exponents = if basis.degree == 0 || active.is_empty() {
            Vec::new()
        } else {
            monomials(active.len(), basis.degree)
        };
        let mut transform = Transform {
            dim,
            active,
            feat_mean,
            feat_scale,
            exponents,
            col_mean: Vec::new(),
            col_scale: Vec::new(),
        };

        let full_size = 1 + transform.exponents.len();
        if weights.is_none() && n < PATHS_PER_BASIS_FUNCTION * full_size {
            return Err(Error::InsufficientPaths {
                required: PATHS_PER_BASIS_FUNCTION * full_size,
                available: n,
            });
        }

        // Raw columns, then center/scale; columns with no spread are dropped.
        let p0 = transform.exponents.len();
        let mut raw = vec![0.0; p0 * n];
        raw.par_chunks_mut(n.max(1)).enumerate().for_each(|(c, col)| {
            for (j, v) in col.iter_mut().enumerate() {
                *v = transform.raw_column(&features[j * dim..(j + 1) * dim], c);
            }
        });
        let mut keep = Vec::new();
        let mut col_mean = Vec::new();
        let mut col_scale = Vec::new();
        for c in 0..p0 {
            let col = &raw[c * n..(c + 1) * n];
            let m = mean_of(&|j| col[j]);
            let s = mean_of(&|j| (col[j] - m).powi(2)).max(0.0).sqrt();
            if s > 1e-10 * (1.0 + m.abs()) {
                keep.push(c);
                col_mean.push(m);
                col_scale.push(s);
            }
        }
        transform.exponents = keep.iter().map(|c| transform.exponents[*c].clone()).collect();
        transform.col_mean = col_mean;
        transform.col_scale = col_scale;
        let p = keep.len();
        let mut cols = vec![0.0; p * n];
        for (k, c) in keep.iter().enumerate() {
            let (m, s) = (transform.col_mean[k], transform.col_scale[k]);
            let src = &raw[c * n..(c + 1) * n];
            cols[k * n..(k + 1) * n]
                .par_iter_mut()
                .zip(src.par_iter())
                .for_each(|(d, v)| *d = (v - m) / s);
        }
        drop(raw);

        let (chol, condition) = if p == 0 {
            (None, 1.0)
        } else {
            let wn = |j: usize| match weights {
                None => 1.0 / n as f64,
                Some(w) => w[j] / wsum.unwrap(),
            };
            let gram = det_sum_vec(n, p * p, |j, acc| {
                let wj = wn(j);
                for a in 0..p {
                    let ca = cols[a * n + j] * wj;
                    for b in a..p {
                        acc[a * p + b] += ca * cols[b * n + j];
                    }
                }
            });
            let mut g0 = DMatrix::<f64>::zeros(p, p);
            for a in 0..p {
                for b in a..p {
                    g0[(a, b)] = gram[a * p + b];
                    g0[(b, a)] = gram[a * p + b];
                }
            }
            let mut g = g0.clone();
            for a in 0..p {
                g[(a, a)] += RIDGE;
            }
            let eig = g.clone().symmetric_eigen();
            let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
            let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
            let condition = if min > 0.0 { max / min } else { f64::INFINITY };
            if !condition.is_finite() || condition > MAX_CONDITION {
                return Err(Error::IllConditioned { condition });
            }
            let chol = g.cholesky().ok_or(Error::IllConditioned { condition })?;
            (Some((chol, g0)), condition)
        };

        Ok(Design {
            n,
            weights,
            transform,
            cols,
            chol,
            condition,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.n
    }

    pub fn basis_size(&self) -> usize {
        1 + self.transform.n_columns()
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    fn weight(&self, j: usize) -> f64 {
        match self.weights {
            None => 1.0 / self.n as f64,
            Some(w) => w[j],
        }
    }

    /// Fits one target and returns the fitted map together with the in-sample
    /// fitted values.
    pub fn fit(&self, target: &[f64]) -> Result<(FittedMap, Vec<f64>)> {
        let n = self.n;
        if target.len() != n {
            return Err(Error::InvalidArgument(format!(
                "regression target has {} entries, expected {n}",
                target.len()
            )));
        }
        if let Some(j) = target.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("regression target is not finite on path {j}")));
        }
        let wsum = match self.weights {
            None => 1.0,
            Some(w) => w.iter().sum::<f64>(),
        };
        // Shifting by the first value makes constant targets exact.
        let shift = target[0];
        let intercept = shift + det_sum(n, |j| self.weight(j) * (target[j] - shift)) / wsum;
        let p = self.transform.n_columns();
        let coefs = match &self.chol {
            None => Vec::new(),
            Some((ch, g0)) => {
                let rhs = DVector::from_vec(det_sum_vec(n, p, |j, acc| {
                    let wy = self.weight(j) / wsum * (target[j] - shift);
                    for a in 0..p {
                        acc[a] += self.cols[a * n + j] * wy;
                    }
                }));
                // Two refinement sweeps remove the ridge bias on well-posed designs.
                let mut beta = ch.solve(&rhs);
                for _ in 0..2 {
                    let r = &rhs - g0 * &beta;
                    beta += ch.solve(&r);
                }
                beta.iter().copied().collect()
            }
        };
        let mut fitted = vec![intercept; n];
        for (a, b) in coefs.iter().enumerate() {
            let col = &self.cols[a * n..(a + 1) * n];
            fitted.par_iter_mut().zip(col.par_iter()).for_each(|(f, c)| *f += b * c);
        }
        let rss = det_sum(n, |j| self.weight(j) * (target[j] - fitted[j]).powi(2)) / wsum;
        let map = FittedMap {
            transform: self.transform.clone(),
            intercept,
            coefs,
            diagnostics: FitDiagnostics {
                basis_size: self.basis_size(),
                condition: self.condition,
                residual_rms: rss.max(0.0).sqrt(),
            },
        };
        Ok((map, fitted))
    }

    /// In-sample fitted values only.
    pub fn project(&self, target: &[f64]) -> Result<Vec<f64>> {
        Ok(self.fit(target)?.1)
    }
}

/// Least-squares fit of `targets` on polynomial functions of `features`
/// (path-major, `dim` per path). Paths are equally weighted unless `weights`
/// is given.
pub fn regress_conditional_expectation(
    targets: &[f64],
    features: &[f64],
    dim: usize,
    weights: Option<&[f64]>,
    basis: BasisSpec,
) -> Result<FittedMap> {
    let d = Design::build(features, dim, weights, basis)?;
    Ok(d.fit(targets)?.0)
}
