use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::CostParts;
use crate::model::{ControlProcess, Point, ProblemSpec};
use crate::paths::TimeGrid;

/// Largest lattice depth accepted by [`enumerate_lattice`].
pub const MAX_LATTICE_STEPS: usize = 9;
/// Largest grid accepted by [`exhaustive_control_search`].
pub const MAX_SEARCH_STEPS: usize = 4;
/// Largest number of control assignments [`exhaustive_control_search`] evaluates.
pub const MAX_ASSIGNMENTS: usize = 1_000_000;

/// Exact solution on the recombination-free lattice where each step branches
/// into the four sign combinations of `(dW, dY) = (+-sqrt(dt), +-sqrt(dt))`.
///
/// Level `i` holds `4^i` nodes; the children of node `a` are `4a..4a+4`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatticeSolution {
    pub j: f64,
    pub parts: CostParts,
    pub steps: usize,
    /// Per level, states (`4^i x n`).
    pub x: Vec<Vec<f64>>,
    /// Per level, backward values (`4^i x m`).
    pub y: Vec<Vec<f64>>,
}

impl LatticeSolution {
    /// Probability of each node on `level`.
    pub fn node_weight(&self, level: usize) -> f64 {
        0.25f64.powi(level as i32)
    }

    pub fn n_nodes(&self, level: usize) -> usize {
        1 << (2 * level)
    }
}

const SIGNS: [(f64, f64); 4] = [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)];

/// Computes the discretized strong-formulation cost and the backward values
/// exactly by enumerating all `4^N` branches.
pub fn enumerate_lattice(spec: &ProblemSpec, u: &ControlProcess) -> Result<LatticeSolution> {
    let grid = *u.grid();
    if grid.steps() > MAX_LATTICE_STEPS {
        return Err(Error::TooLarge(format!(
            "lattice enumeration supports at most {MAX_LATTICE_STEPS} steps, got {}",
            grid.steps()
        )));
    }
    if u.dim() != spec.dims.k {
        return Err(Error::InvalidArgument("control dimension does not match the problem".into()));
    }
    solve(spec, &grid, u.as_flat())
}

fn solve(spec: &ProblemSpec, grid: &TimeGrid, u: &[f64]) -> Result<LatticeSolution> {
    if (grid.horizon() - spec.horizon).abs() > 1e-12 * spec.horizon {
        return Err(Error::GridMismatch(format!(
            "grid horizon {} differs from the problem horizon {}",
            grid.horizon(),
            spec.horizon
        )));
    }
    let c = spec.coefficients();
    let (n, m, k) = (spec.dims.n, spec.dims.m, spec.dims.k);
    let (steps, dt) = (grid.steps(), grid.dt());
    let sq = dt.sqrt();

    let mut xs = vec![spec.initial_x.clone()];
    let mut rhos = vec![vec![1.0]];
    let mut hs: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let (mut b, mut s1, mut s2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..steps {
        let t = grid.time(i);
        let ui = &u[i * k..(i + 1) * k];
        let nodes = 1usize << (2 * i);
        let mut xn = vec![0.0; nodes * 4 * n];
        let mut rn = vec![0.0; nodes * 4];
        let mut hv = vec![0.0; nodes];
        for a in 0..nodes {
            let x = &xs[i][a * n..(a + 1) * n];
            c.drift(t, x, ui, &mut b);
            c.sigma1(t, x, ui, &mut s1);
            c.sigma2(t, x, ui, &mut s2);
            let h = c.observation(t, x, ui);
            hv[a] = h;
            for (ch, (sw, sy)) in SIGNS.iter().enumerate() {
                let (dw, dy) = (sw * sq, sy * sq);
                let idx = 4 * a + ch;
                for e in 0..n {
                    xn[idx * n + e] = x[e] + (b[e] - s2[e] * h) * dt + s1[e] * dw + s2[e] * dy;
                }
                rn[idx] = rhos[i][a] * (h * dy - 0.5 * h * h * dt).exp();
            }
        }
        if xn.iter().chain(&rn).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteTerm(format!("lattice state at level {}", i + 1)));
        }
        xs.push(xn);
        rhos.push(rn);
        hs.push(hv);
    }

    let leaves = 1usize << (2 * steps);
    let mut ys = vec![Vec::new(); steps + 1];
    let mut z1s = vec![Vec::new(); steps];
    let mut z2s = vec![Vec::new(); steps];
    let mut yl = vec![0.0; leaves * m];
    for a in 0..leaves {
        c.terminal_map(&xs[steps][a * n..(a + 1) * n], &mut yl[a * m..(a + 1) * m]);
    }
    ys[steps] = yl;
    let (mut f, mut ystar) = (vec![0.0; m], vec![0.0; m]);
    for i in (0..steps).rev() {
        let t = grid.time(i);
        let ui = &u[i * k..(i + 1) * k];
        let nodes = 1usize << (2 * i);
        let mut yv = vec![0.0; nodes * m];
        let mut z1v = vec![0.0; nodes * m];
        let mut z2v = vec![0.0; nodes * m];
        for a in 0..nodes {
            let x = &xs[i][a * n..(a + 1) * n];
            let h = hs[i][a];
            let mut yhat = vec![0.0; m];
            for e in 0..m {
                let mut mean = 0.0;
                for ch in 0..4 {
                    mean += 0.25 * ys[i + 1][(4 * a + ch) * m + e];
                }
                let (mut zw, mut zy) = (0.0, 0.0);
                for (ch, (sw, sy)) in SIGNS.iter().enumerate() {
                    let dev = ys[i + 1][(4 * a + ch) * m + e] - mean;
                    zw += 0.25 * dev * sw * sq / dt;
                    zy += 0.25 * dev * sy * sq / dt;
                }
                yhat[e] = mean;
                z1v[a * m + e] = zw;
                z2v[a * m + e] = zy;
            }
            let z1 = &z1v[a * m..(a + 1) * m];
            let z2 = &z2v[a * m..(a + 1) * m];
            let pt = Point {
                t,
                x,
                y: &yhat,
                z1,
                z2,
                u: ui,
            };
            c.driver(&pt, &mut f);
            for e in 0..m {
                ystar[e] = yhat[e] - (f[e] - z2[e] * h) * dt;
            }
            c.driver(&Point { y: &ystar, ..pt }, &mut f);
            for e in 0..m {
                yv[a * m + e] = yhat[e] - (f[e] - z2[e] * h) * dt;
            }
        }
        ys[i] = yv;
        z1s[i] = z1v;
        z2s[i] = z2v;
    }

    let mut running = 0.0;
    for i in 0..steps {
        let t = grid.time(i);
        let ui = &u[i * k..(i + 1) * k];
        let nodes = 1usize << (2 * i);
        let w = 0.25f64.powi(i as i32);
        let mut level = 0.0;
        for a in 0..nodes {
            let pt = Point {
                t,
                x: &xs[i][a * n..(a + 1) * n],
                y: &ys[i][a * m..(a + 1) * m],
                z1: &z1s[i][a * m..(a + 1) * m],
                z2: &z2s[i][a * m..(a + 1) * m],
                u: ui,
            };
            level += w * rhos[i][a] * c.running_cost(&pt) * dt;
        }
        running += level;
    }
    let wl = 0.25f64.powi(steps as i32);
    let terminal: f64 = (0..leaves)
        .map(|a| wl * rhos[steps][a] * c.terminal_cost(&xs[steps][a * n..(a + 1) * n]))
        .sum();
    let initial = c.initial_cost(&ys[0]);
    let parts = CostParts {
        running,
        terminal,
        initial,
    };
    let j = running + terminal + initial;
    if !j.is_finite() {
        return Err(Error::NonFiniteTerm("lattice cost".into()));
    }
    Ok(LatticeSolution {
        j,
        parts,
        steps,
        x: xs,
        y: ys,
    })
}

/// Best control over a finite mesh.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchResult {
    pub control: ControlProcess,
    pub cost: f64,
    pub evaluated: usize,
}

/// Minimizes the lattice cost over all assignments of `mesh` points to the
/// steps of `grid`. Ties go to the first assignment in lexicographic order,
/// with the first step most significant and mesh points in the given order.
pub fn exhaustive_control_search(spec: &ProblemSpec, grid: &TimeGrid, mesh: &[Vec<f64>]) -> Result<SearchResult> {
    let steps = grid.steps();
    if steps > MAX_SEARCH_STEPS {
        return Err(Error::TooLarge(format!(
            "exhaustive search supports at most {MAX_SEARCH_STEPS} steps, got {steps}"
        )));
    }
    if mesh.is_empty() {
        return Err(Error::InvalidArgument("control mesh is empty".into()));
    }
    let k = spec.dims.k;
    for v in mesh {
        if v.len() != k || !spec.control_set.contains(v, crate::model::MEMBERSHIP_TOL) {
            return Err(Error::InvalidArgument(format!("mesh point {v:?} is not in the control set")));
        }
    }
    let g = mesh.len();
    let count = (0..steps).try_fold(1usize, |acc, _| acc.checked_mul(g));
    let count = match count {
        Some(c) if c <= MAX_ASSIGNMENTS => c,
        _ => {
            return Err(Error::TooLarge(format!(
                "{g}^{steps} control assignments exceed the budget of {MAX_ASSIGNMENTS}"
            )))
        }
    };
    let assignment = |idx: usize| -> Vec<f64> {
        let mut digits = vec![0usize; steps];
        let mut rest = idx;
        for d in digits.iter_mut().rev() {
            *d = rest % g;
            rest /= g;
        }
        digits.iter().flat_map(|d| mesh[*d].iter().copied()).collect()
    };
    let costs: Vec<f64> = (0..count)
        .into_par_iter()
        .map(|idx| solve(spec, grid, &assignment(idx)).map(|s| s.j))
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (idx, c) in costs.iter().enumerate() {
        if *c < costs[best] {
            best = idx;
        }
    }
    let flat = assignment(best);
    let values = flat.chunks(k).map(<[f64]>::to_vec).collect();
    Ok(SearchResult {
        control: ControlProcess::new(*grid, values, &spec.control_set)?,
        cost: costs[best],
        evaluated: count,
    })
}
