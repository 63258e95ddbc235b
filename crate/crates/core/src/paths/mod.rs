//! Time discretisation and driving noise for the (W, Y) pair.
//!
//! Gaussian bundles are seeded per path: path `j` draws its W increments from
//! ChaCha stream `2j` and its Y increments from stream `2j + 1`, so any subset
//! of paths can be regenerated on its own and parallel generation matches
//! serial generation bit for bit.

mod io;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::hash::{Hash, Hasher};
use std::sync::OnceLock;

use crate::error::{invalid, Error, Result};

/// Largest binomial enumeration (4^9 paths).
pub const MAX_BINOMIAL_STEPS: usize = 9;

/// Uniform grid on `[0, T]` with `N` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid(format!("horizon must be positive and finite, got {horizon}")));
        }
        if steps == 0 {
            return Err(invalid("time grid needs at least one step"));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Node time `t_i = i * dt`; the last node is pinned to `T` exactly.
    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }
}

/// Convenience wrapper matching the operation name used across the crate docs.
pub fn make_time_grid(horizon: f64, steps: usize) -> Result<TimeGrid> {
    TimeGrid::new(horizon, steps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseOrigin {
    Gaussian { seed: u64 },
    Binomial,
    Coarsened { factor: usize },
    Imported,
}

/// Increments of W and Y under the reference measure, stored path-major.
#[derive(Clone, Debug)]
pub struct NoiseBundle {
    grid: TimeGrid,
    n_paths: usize,
    dw: Vec<f64>,
    dy: Vec<f64>,
    weights: Option<Vec<f64>>,
    origin: NoiseOrigin,
    fingerprint: OnceLock<u64>,
}

impl PartialEq for NoiseBundle {
    fn eq(&self, other: &Self) -> bool {
        self.grid == other.grid
            && self.n_paths == other.n_paths
            && self.dw == other.dw
            && self.dy == other.dy
            && self.weights == other.weights
            && self.origin == other.origin
    }
}

impl NoiseBundle {
    /// Assembles a bundle from raw increments (`n_paths * steps` each, path-major).
    pub fn from_parts(
        grid: TimeGrid,
        n_paths: usize,
        dw: Vec<f64>,
        dy: Vec<f64>,
        weights: Option<Vec<f64>>,
        origin: NoiseOrigin,
    ) -> Result<Self> {
        if n_paths == 0 {
            return Err(invalid("noise bundle needs at least one path"));
        }
        let len = n_paths
            .checked_mul(grid.steps())
            .ok_or_else(|| invalid("noise bundle size overflows"))?;
        if dw.len() != len || dy.len() != len {
            return Err(invalid(format!(
                "expected {len} increments per stream, got {} and {}",
                dw.len(),
                dy.len()
            )));
        }
        if dw.iter().chain(dy.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("noise increments must be finite"));
        }
        if let Some(w) = &weights {
            if w.len() != n_paths {
                return Err(invalid("one weight per path required"));
            }
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(invalid("path weights must be finite and non-negative"));
            }
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("path weights must sum to 1, got {total}")));
            }
        }
        Ok(Self {
            grid,
            n_paths,
            dw,
            dy,
            weights,
            origin,
            fingerprint: OnceLock::new(),
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn origin(&self) -> &NoiseOrigin {
        &self.origin
    }

    #[inline]
    pub fn dw(&self, path: usize, step: usize) -> f64 {
        self.dw[path * self.grid.steps + step]
    }

    #[inline]
    pub fn dy(&self, path: usize, step: usize) -> f64 {
        self.dy[path * self.grid.steps + step]
    }

    pub fn dw_path(&self, path: usize) -> &[f64] {
        let n = self.grid.steps;
        &self.dw[path * n..(path + 1) * n]
    }

    pub fn dy_path(&self, path: usize) -> &[f64] {
        let n = self.grid.steps;
        &self.dy[path * n..(path + 1) * n]
    }

    /// Explicit path weights, `None` for equally weighted Monte Carlo samples.
    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// Probability weight of `path` (`1/n` when unweighted).
    #[inline]
    pub fn weight(&self, path: usize) -> f64 {
        match &self.weights {
            Some(w) => w[path],
            None => 1.0 / self.n_paths as f64,
        }
    }

    /// Hash of the grid, the increments and the weights. Used to check that
    /// trajectories handed to later stages share one bundle.
    pub fn fingerprint(&self) -> u64 {
        *self.fingerprint.get_or_init(|| {
            let mut h = std::collections::hash_map::DefaultHasher::new();
            self.grid.steps.hash(&mut h);
            self.grid.horizon.to_bits().hash(&mut h);
            self.n_paths.hash(&mut h);
            for v in self.dw.iter().chain(&self.dy) {
                v.to_bits().hash(&mut h);
            }
            if let Some(w) = &self.weights {
                for v in w {
                    v.to_bits().hash(&mut h);
                }
            }
            h.finish()
        })
    }

    /// Merges blocks of `factor` consecutive steps, giving the same Brownian
    /// paths observed on a grid with `steps / factor` steps.
    pub fn coarsen(&self, factor: usize) -> Result<NoiseBundle> {
        let n = self.grid.steps;
        if factor == 0 || !n.is_multiple_of(factor) {
            return Err(invalid(format!("cannot coarsen {n} steps by {factor}")));
        }
        let coarse = TimeGrid::new(self.grid.horizon, n / factor)?;
        let merge = |src: &[f64]| -> Vec<f64> {
            src.chunks(factor).map(|c| c.iter().sum()).collect()
        };
        Ok(NoiseBundle {
            grid: coarse,
            n_paths: self.n_paths,
            dw: merge(&self.dw),
            dy: merge(&self.dy),
            weights: self.weights.clone(),
            origin: NoiseOrigin::Coarsened { factor },
            fingerprint: OnceLock::new(),
        })
    }

    /// Keeps the first `count` paths (unweighted bundles only).
    pub fn truncate_paths(&self, count: usize) -> Result<NoiseBundle> {
        if self.weights.is_some() {
            return Err(invalid("cannot truncate a weighted bundle"));
        }
        if count == 0 || count > self.n_paths {
            return Err(invalid(format!("cannot keep {count} of {} paths", self.n_paths)));
        }
        let n = self.grid.steps;
        Ok(NoiseBundle {
            grid: self.grid,
            n_paths: count,
            dw: self.dw[..count * n].to_vec(),
            dy: self.dy[..count * n].to_vec(),
            weights: None,
            origin: self.origin.clone(),
            fingerprint: OnceLock::new(),
        })
    }
}

fn path_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Gaussian increments `sqrt(dt) * N(0, 1)` for W and Y, independent substreams per path.
pub fn sample_noise(grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<NoiseBundle> {
    if n_paths == 0 {
        return Err(invalid("n_paths must be at least 1"));
    }
    let n = grid.steps();
    let scale = grid.dt().sqrt();
    let mut dw = vec![0.0; n_paths * n];
    let mut dy = vec![0.0; n_paths * n];
    dw.par_chunks_mut(n)
        .zip(dy.par_chunks_mut(n))
        .enumerate()
        .for_each(|(j, (w, y))| {
            let mut rw = path_stream(seed, 2 * j as u64);
            let mut ry = path_stream(seed, 2 * j as u64 + 1);
            for v in w.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rw);
                *v = scale * z;
            }
            for v in y.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut ry);
                *v = scale * z;
            }
        });
    NoiseBundle::from_parts(*grid, n_paths, dw, dy, None, NoiseOrigin::Gaussian { seed })
}

/// All `4^N` sign paths with `dW, dY = ±sqrt(dt)`, each weighted `4^-N`.
///
/// Path `j` encodes step `i` in bits `2(N-1-i)+1` (W sign) and `2(N-1-i)` (Y sign),
/// set bit meaning a negative increment, so paths are ordered lexicographically
/// with the first step most significant.
pub fn enumerate_binomial(grid: &TimeGrid) -> Result<NoiseBundle> {
    let n = grid.steps();
    if n > MAX_BINOMIAL_STEPS {
        return Err(Error::TooLarge(format!(
            "binomial enumeration with {n} steps needs 4^{n} = {:.3e} paths (limit 4^{MAX_BINOMIAL_STEPS})",
            4f64.powi(n as i32)
        )));
    }
    let count = 1usize << (2 * n);
    let s = grid.dt().sqrt();
    let mut dw = Vec::with_capacity(count * n);
    let mut dy = Vec::with_capacity(count * n);
    for j in 0..count {
        for i in 0..n {
            let bits = (j >> (2 * (n - 1 - i))) & 3;
            dw.push(if bits & 2 == 0 { s } else { -s });
            dy.push(if bits & 1 == 0 { s } else { -s });
        }
    }
    // 4^-N is a power of two, so the weights and their sum are exact.
    let w = 0.25f64.powi(n as i32);
    NoiseBundle::from_parts(
        *grid,
        count,
        dw,
        dy,
        Some(vec![w; count]),
        NoiseOrigin::Binomial,
    )
}
