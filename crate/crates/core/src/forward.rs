//! Euler-Maruyama simulation of the state and the observation density, and
//! the two cost functionals.
//!
//! All per-path arrays are stored step-major: entry `(i, j, c)` of a quantity
//! with `d` components lives at `(i * n_paths + j) * d + c`, so the cross
//! section at one node (what a regression needs) is contiguous.

use std::hash::{Hash, Hasher};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{solve_backward, BackwardTrajectories};
use crate::error::{Error, Result};
use crate::model::{ControlPolicy, ControlProcess, Dims, Point, ProblemSpec};
use crate::paths::{sample_noise, NoiseBundle, TimeGrid};
use crate::regression::BasisSpec;
use crate::stats::{det_sum, weighted_estimate, weighted_mean};

/// States beyond this magnitude are treated as a blow-up.
pub const BLOWUP_THRESHOLD: f64 = 1e8;

/// Which law the simulated paths follow.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    /// Reference measure: `W` and the observation `Y` are independent Brownian
    /// motions and the control enters through the density `rho`.
    Strong,
    /// Controlled measure: the second noise is the innovation `W^u`, `rho = 1`.
    Weak,
}

#[derive(Clone, Debug)]
enum ControlValues {
    /// `N x k`, shared by all paths.
    Shared(Vec<f64>),
    /// `N x paths x k`.
    PerPath(Vec<f64>),
}

/// Simulated forward paths.
#[derive(Clone, Debug)]
pub struct ForwardTrajectories {
    grid: TimeGrid,
    n_paths: usize,
    dims: Dims,
    formulation: Formulation,
    x: Vec<f64>,
    rho: Vec<f64>,
    h: Vec<f64>,
    controls: ControlValues,
    weights: Option<Vec<f64>>,
    pub(crate) noise_fp: u64,
    pub(crate) control_fp: u64,
}

impl ForwardTrajectories {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }
    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn formulation(&self) -> Formulation {
        self.formulation
    }
    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }
    #[inline]
    pub fn weight(&self, j: usize) -> f64 {
        match &self.weights {
            Some(w) => w[j],
            None => 1.0 / self.n_paths as f64,
        }
    }

    /// State of path `j` at node `i`.
    #[inline]
    pub fn x(&self, i: usize, j: usize) -> &[f64] {
        let n = self.dims.n;
        let o = (i * self.n_paths + j) * n;
        &self.x[o..o + n]
    }
    /// All states at node `i`, path-major.
    pub fn x_at(&self, i: usize) -> &[f64] {
        let w = self.n_paths * self.dims.n;
        &self.x[i * w..(i + 1) * w]
    }
    #[inline]
    pub fn rho(&self, i: usize, j: usize) -> f64 {
        self.rho[i * self.n_paths + j]
    }
    pub fn rho_at(&self, i: usize) -> &[f64] {
        &self.rho[i * self.n_paths..(i + 1) * self.n_paths]
    }
    /// Observation drift `h(t_i, x_i, u_i)` used on step `i` (zero in the weak formulation).
    #[inline]
    pub fn h(&self, i: usize, j: usize) -> f64 {
        self.h[i * self.n_paths + j]
    }
    /// Control applied on step `i` along path `j`.
    #[inline]
    pub fn u(&self, i: usize, j: usize) -> &[f64] {
        let k = self.dims.k;
        match &self.controls {
            ControlValues::Shared(v) => &v[i * k..(i + 1) * k],
            ControlValues::PerPath(v) => {
                let o = (i * self.n_paths + j) * k;
                &v[o..o + k]
            }
        }
    }

    pub(crate) fn check_noise(&self, noise: &NoiseBundle) -> Result<()> {
        if noise.grid() != &self.grid || noise.n_paths() != self.n_paths || noise.fingerprint() != self.noise_fp {
            return Err(Error::GridMismatch(
                "trajectories were simulated on a different noise bundle".into(),
            ));
        }
        Ok(())
    }

    /// CSV with columns `path, step, x0.., rho`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let n = self.dims.n;
        let mut header = vec!["path".to_string(), "step".to_string()];
        header.extend((0..n).map(|c| format!("x{c}")));
        header.push("rho".into());
        w.write_record(&header)?;
        for j in 0..self.n_paths {
            for i in 0..=self.grid.steps() {
                let mut rec = vec![j.to_string(), i.to_string()];
                rec.extend(self.x(i, j).iter().map(|v| format!("{v:e}")));
                rec.push(format!("{:e}", self.rho(i, j)));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn control_fingerprint(values: &[f64]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    values.len().hash(&mut h);
    for v in values {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Simulates the state and density under the reference measure:
///
/// ```text
/// x_{i+1}   = x_i + (b - sigma2 h) dt + sigma1 dW_i + sigma2 dY_i
/// rho_{i+1} = rho_i * exp(h dY_i - h^2 dt / 2)
/// ```
///
/// with all coefficients frozen at `(t_i, x_i, u_i)`.
pub fn simulate_forward(spec: &ProblemSpec, u: &dyn ControlPolicy, noise: &NoiseBundle) -> Result<ForwardTrajectories> {
    simulate(spec, u, noise, Formulation::Strong)
}

/// Simulates the state under the controlled measure, reading the bundle's
/// second stream as the innovation `W^u`: `x_{i+1} = x_i + b dt + sigma1 dW_i + sigma2 dW^u_i`.
pub fn simulate_forward_weak(spec: &ProblemSpec, u: &dyn ControlPolicy, noise: &NoiseBundle) -> Result<ForwardTrajectories> {
    simulate(spec, u, noise, Formulation::Weak)
}

struct StepBufs {
    b: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

fn simulate(
    spec: &ProblemSpec,
    policy: &dyn ControlPolicy,
    noise: &NoiseBundle,
    formulation: Formulation,
) -> Result<ForwardTrajectories> {
    let grid = *noise.grid();
    if policy.grid() != &grid {
        return Err(Error::GridMismatch(format!(
            "control has {} steps on [0, {}], noise has {} steps on [0, {}]",
            policy.grid().steps(),
            policy.grid().horizon(),
            grid.steps(),
            grid.horizon()
        )));
    }
    if (grid.horizon() - spec.horizon).abs() > 1e-12 * spec.horizon {
        return Err(Error::GridMismatch(format!(
            "noise horizon {} differs from the problem horizon {}",
            grid.horizon(),
            spec.horizon
        )));
    }
    let dims = spec.dims;
    if policy.control_dim() != dims.k {
        return Err(Error::InvalidArgument("control dimension does not match the problem".into()));
    }
    let (n, k) = (dims.n, dims.k);
    let np = noise.n_paths();
    let steps = grid.steps();
    let dt = grid.dt();
    let coeffs = spec.coefficients();

    let shared = policy.as_open_loop().map(|c| c.as_flat().to_vec());
    let mut per_path = if shared.is_none() { vec![0.0; steps * np * k] } else { Vec::new() };

    let mut x = vec![0.0; (steps + 1) * np * n];
    let mut rho = vec![0.0; (steps + 1) * np];
    let mut h = vec![0.0; steps * np];
    for j in 0..np {
        x[j * n..(j + 1) * n].copy_from_slice(&spec.initial_x);
    }
    rho[..np].fill(1.0);

    for i in 0..steps {
        let t = grid.time(i);
        let (x_done, x_rest) = x.split_at_mut((i + 1) * np * n);
        let x_cur = &x_done[i * np * n..];
        let x_next = &mut x_rest[..np * n];
        let (r_done, r_rest) = rho.split_at_mut((i + 1) * np);
        let r_cur = &r_done[i * np..];
        let r_next = &mut r_rest[..np];
        let h_i = &mut h[i * np..(i + 1) * np];
        let u_i: &mut [f64] = if shared.is_none() {
            &mut per_path[i * np * k..(i + 1) * np * k]
        } else {
            &mut []
        };
        let shared_u = shared.as_ref().map(|v| &v[i * k..(i + 1) * k]);

        let body = |bufs: &mut StepBufs, j: usize, xn: &mut [f64], rn: &mut f64, hv: &mut f64, uj: &[f64]| {
            let xi = &x_cur[j * n..(j + 1) * n];
            coeffs.drift(t, xi, uj, &mut bufs.b);
            coeffs.sigma1(t, xi, uj, &mut bufs.s1);
            coeffs.sigma2(t, xi, uj, &mut bufs.s2);
            let (dw, dy) = (noise.dw(j, i), noise.dy(j, i));
            match formulation {
                Formulation::Strong => {
                    let hh = coeffs.observation(t, xi, uj);
                    for c in 0..n {
                        xn[c] = xi[c] + (bufs.b[c] - bufs.s2[c] * hh) * dt + bufs.s1[c] * dw + bufs.s2[c] * dy;
                    }
                    *rn = r_cur[j] * (hh * dy - 0.5 * hh * hh * dt).exp();
                    *hv = hh;
                }
                Formulation::Weak => {
                    for c in 0..n {
                        xn[c] = xi[c] + bufs.b[c] * dt + bufs.s1[c] * dw + bufs.s2[c] * dy;
                    }
                    *rn = 1.0;
                    *hv = 0.0;
                }
            }
        };
        let init = || StepBufs {
            b: vec![0.0; n],
            s1: vec![0.0; n],
            s2: vec![0.0; n],
        };

        match shared_u {
            Some(uv) => {
                x_next
                    .par_chunks_mut(n)
                    .zip(r_next.par_iter_mut())
                    .zip(h_i.par_iter_mut())
                    .enumerate()
                    .for_each_init(init, |bufs, (j, ((xn, rn), hv))| body(bufs, j, xn, rn, hv, uv));
            }
            None => {
                x_next
                    .par_chunks_mut(n)
                    .zip(r_next.par_iter_mut())
                    .zip(h_i.par_iter_mut())
                    .zip(u_i.par_chunks_mut(k))
                    .enumerate()
                    .for_each_init(init, |bufs, (j, (((xn, rn), hv), uj))| {
                        policy.evaluate(i, &x_cur[j * n..(j + 1) * n], uj);
                        body(bufs, j, xn, rn, hv, uj)
                    });
            }
        }

        // Sequential scan keeps the reported path deterministic.
        for j in 0..np {
            let bad_x = x_next[j * n..(j + 1) * n]
                .iter()
                .any(|v| !v.is_finite() || v.abs() > BLOWUP_THRESHOLD);
            if bad_x {
                return Err(Error::NonFinite {
                    what: "state x (blow-up)".into(),
                    path: j,
                    step: i + 1,
                });
            }
            if !(r_next[j].is_finite() && r_next[j] > 0.0) {
                return Err(Error::NonFinite {
                    what: "density rho".into(),
                    path: j,
                    step: i + 1,
                });
            }
        }
    }

    let (controls, control_fp) = match shared {
        Some(v) => {
            let fp = control_fingerprint(&v);
            (ControlValues::Shared(v), fp)
        }
        None => {
            let fp = control_fingerprint(&per_path);
            (ControlValues::PerPath(per_path), fp)
        }
    };
    Ok(ForwardTrajectories {
        grid,
        n_paths: np,
        dims,
        formulation,
        x,
        rho,
        h,
        controls,
        weights: noise.weights().map(<[f64]>::to_vec),
        noise_fp: noise.fingerprint(),
        control_fp,
    })
}

/// Additive parts of a cost estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostParts {
    pub running: f64,
    pub terminal: f64,
    pub initial: f64,
}

/// Monte Carlo cost estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    #[serde(rename = "J")]
    pub j: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub parts: CostParts,
    pub formulation: Formulation,
    /// Cross-path mean of `y_0`, the argument of `gamma`.
    pub y0_mean: Vec<f64>,
    /// Largest cross-path standard deviation of a `y_0` component. The exact
    /// `y_0` is deterministic, so this records the regression spread that the
    /// averaging absorbs.
    pub y0_spread: f64,
}

/// Per-path `sum_i rho_i l_i dt + rho_N Phi(x_N)` together with the report.
pub(crate) fn cost_with_paths(
    spec: &ProblemSpec,
    fwd: &ForwardTrajectories,
    bwd: &BackwardTrajectories,
) -> Result<(CostReport, Vec<f64>)> {
    bwd.check_forward(fwd)?;
    let c = spec.coefficients();
    let grid = fwd.grid;
    let (np, steps, dt) = (fwd.n_paths, grid.steps(), grid.dt());
    let mut running = vec![0.0; np];
    let mut terminal = vec![0.0; np];
    running
        .par_iter_mut()
        .zip(terminal.par_iter_mut())
        .enumerate()
        .for_each(|(j, (run, term))| {
            let mut acc = 0.0;
            for i in 0..steps {
                let p = Point {
                    t: grid.time(i),
                    x: fwd.x(i, j),
                    y: bwd.y(i, j),
                    z1: bwd.z1(i, j),
                    z2: bwd.z2(i, j),
                    u: fwd.u(i, j),
                };
                acc += fwd.rho(i, j) * c.running_cost(&p) * dt;
            }
            *run = acc;
            *term = fwd.rho(steps, j) * c.terminal_cost(fwd.x(steps, j));
        });
    if let Some(j) = (0..np).find(|j| !(running[*j].is_finite() && terminal[*j].is_finite())) {
        return Err(Error::NonFinite {
            what: "path cost".into(),
            path: j,
            step: steps,
        });
    }
    let w = fwd.weights();
    let m = spec.dims.m;
    let mut y0_mean = vec![0.0; m];
    let mut y0_spread = 0.0f64;
    for (c_idx, slot) in y0_mean.iter_mut().enumerate() {
        let vals: Vec<f64> = (0..np).map(|j| bwd.y(0, j)[c_idx]).collect();
        let mean = weighted_mean(&vals, w);
        let var = match w {
            None => det_sum(np, |j| (vals[j] - mean).powi(2)) / np as f64,
            Some(w) => det_sum(np, |j| w[j] * (vals[j] - mean).powi(2)),
        };
        *slot = mean;
        y0_spread = y0_spread.max(var.max(0.0).sqrt());
    }
    let initial = c.initial_cost(&y0_mean);
    if !initial.is_finite() {
        return Err(Error::NonFinite {
            what: "initial cost gamma".into(),
            path: 0,
            step: 0,
        });
    }
    let totals: Vec<f64> = running.iter().zip(&terminal).map(|(a, b)| a + b).collect();
    let est = weighted_estimate(&totals, w);
    let parts = CostParts {
        running: weighted_mean(&running, w),
        terminal: weighted_mean(&terminal, w),
        initial,
    };
    let report = CostReport {
        j: parts.running + parts.terminal + parts.initial,
        stderr: est.stderr,
        n_paths: np,
        parts,
        formulation: fwd.formulation,
        y0_mean,
        y0_spread,
    };
    Ok((report, totals))
}

/// `J = E[sum_i rho_i l_i dt + rho_N Phi(x_N)] + gamma(mean y_0)` from
/// reference-measure trajectories.
pub fn evaluate_cost_strong(spec: &ProblemSpec, fwd: &ForwardTrajectories, bwd: &BackwardTrajectories) -> Result<CostReport> {
    if fwd.formulation != Formulation::Strong {
        return Err(Error::InvalidArgument("strong cost needs reference-measure trajectories".into()));
    }
    Ok(cost_with_paths(spec, fwd, bwd)?.0)
}

/// Weak-formulation cost on a fresh Gaussian bundle drawn from `seed`.
pub fn evaluate_cost_weak(
    spec: &ProblemSpec,
    u: &ControlProcess,
    seed: u64,
    n_paths: usize,
    grid: &TimeGrid,
    basis: BasisSpec,
) -> Result<CostReport> {
    let noise = sample_noise(grid, n_paths, seed)?;
    evaluate_cost_weak_on(spec, u, &noise, basis)
}

/// Weak-formulation cost on a given bundle, whose second stream is read as `W^u`.
pub fn evaluate_cost_weak_on(spec: &ProblemSpec, u: &ControlProcess, noise: &NoiseBundle, basis: BasisSpec) -> Result<CostReport> {
    let fwd = simulate_forward_weak(spec, u, noise)?;
    let bwd = solve_backward(spec, &fwd, noise, basis)?;
    Ok(cost_with_paths(spec, &fwd, &bwd)?.0)
}

/// Strong-formulation cost: simulate, solve the backward equation, evaluate.
pub fn strong_cost(spec: &ProblemSpec, u: &dyn ControlPolicy, noise: &NoiseBundle, basis: BasisSpec) -> Result<CostReport> {
    let fwd = simulate_forward(spec, u, noise)?;
    let bwd = solve_backward(spec, &fwd, noise, basis)?;
    evaluate_cost_strong(spec, &fwd, &bwd)
}
