//! Near-optimality certificates built on the control gradient `H_u`.
//!
//! For a candidate `u_eps` and any admissible `u`, the necessary-condition gap
//! is `E^eps[ int H_u . (u - u_eps) dt ]`, with the expectation under the
//! controlled law realized by weighting with the density `rho^eps`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{solve_adjoint, solve_backward, AdjointTrajectories, BackwardTrajectories};
use crate::error::{Error, Result};
use crate::forward::{cost_with_paths, simulate_forward, CostReport, ForwardTrajectories};
use crate::hamiltonian::{check_h_convexity, dot, ConvexityReport, HamiltonianWorkspace, MultiplierPoint, StatePoint};
use crate::model::{ControlProcess, Point, ProblemSpec};
use crate::paths::{NoiseBundle, NoiseOrigin};
use crate::regression::BasisSpec;
use crate::stats::{det_sum, linear_fit, weighted_estimate, weighted_mean, Estimate};

/// Forward, backward and adjoint solutions for one open-loop control on one
/// noise bundle, with the cost and the control gradient.
#[derive(Clone, Debug)]
pub struct ControlAnalysis {
    pub control: ControlProcess,
    pub fwd: ForwardTrajectories,
    pub bwd: BackwardTrajectories,
    pub adj: AdjointTrajectories,
    pub cost: CostReport,
    pub(crate) path_costs: Vec<f64>,
    /// `H_u` per step and path (`N x paths x k`), shifted convention.
    hu: Vec<f64>,
    /// `H_u` with `p_hat_i` replaced by `p_hat_i + sum_{l >= i} (p_{l+1} - p_hat_l)`.
    /// Same mean, but the per-path spread includes the martingale increments the
    /// regressions average out; used only for standard errors.
    hu_spread: Vec<f64>,
}

impl ControlAnalysis {
    #[inline]
    pub fn control_gradient(&self, i: usize, j: usize) -> &[f64] {
        let k = self.control.dim();
        let o = (i * self.fwd.n_paths() + j) * k;
        &self.hu[o..o + k]
    }

    #[inline]
    fn spread_gradient(&self, i: usize, j: usize) -> &[f64] {
        let k = self.control.dim();
        let o = (i * self.fwd.n_paths() + j) * k;
        &self.hu_spread[o..o + k]
    }

    /// `mean_paths(rho_i H_u(t_i))` per step.
    pub fn mean_gradient(&self) -> Vec<Vec<f64>> {
        let k = self.control.dim();
        let np = self.fwd.n_paths();
        let w = self.fwd.weights();
        (0..self.fwd.grid().steps())
            .map(|i| {
                (0..k)
                    .map(|a| {
                        let vals: Vec<f64> = (0..np)
                            .map(|j| self.fwd.rho(i, j) * self.control_gradient(i, j)[a])
                            .collect();
                        weighted_mean(&vals, w)
                    })
                    .collect()
            })
            .collect()
    }

    /// Per-path `sum_i dt rho_i H_u . (v_i - u_i)` for a deterministic `v`.
    fn gap_paths(&self, v: &ControlProcess, spread: bool) -> Vec<f64> {
        let grid = self.fwd.grid();
        let dt = grid.dt();
        let steps = grid.steps();
        (0..self.fwd.n_paths())
            .into_par_iter()
            .map(|j| {
                let mut acc = 0.0;
                for i in 0..steps {
                    let g = if spread {
                        self.spread_gradient(i, j)
                    } else {
                        self.control_gradient(i, j)
                    };
                    let d: f64 = g
                        .iter()
                        .zip(v.value(i).iter().zip(self.control.value(i)))
                        .map(|(g, (a, b))| g * (a - b))
                        .sum();
                    acc += dt * self.fwd.rho(i, j) * d;
                }
                acc
            })
            .collect()
    }

    fn gap_estimate(&self, v: &ControlProcess) -> Estimate {
        let w = self.fwd.weights();
        Estimate {
            mean: weighted_mean(&self.gap_paths(v, false), w),
            stderr: weighted_estimate(&self.gap_paths(v, true), w).stderr,
        }
    }

    /// Multipliers the Hamiltonian is evaluated with on step `i`, path `j`.
    pub fn multipliers(&self, i: usize, j: usize) -> MultiplierPoint {
        MultiplierPoint {
            k: self.adj.k(i, j).to_vec(),
            p: self.adj.p_hat(i, j).to_vec(),
            q1: self.adj.q1(i, j).to_vec(),
            q2: self.adj.q2(i, j).to_vec(),
            r2: self.adj.r2(i, j),
        }
    }

    pub fn state(&self, i: usize, j: usize) -> StatePoint {
        StatePoint {
            t: self.fwd.grid().time(i),
            x: self.fwd.x(i, j).to_vec(),
            y: self.bwd.y(i, j).to_vec(),
            z1: self.bwd.z1(i, j).to_vec(),
            z2: self.bwd.z2(i, j).to_vec(),
            u: self.fwd.u(i, j).to_vec(),
        }
    }
}

/// Runs simulation, backward solve, adjoint solve and cost for `u`.
pub fn analyze_control(spec: &ProblemSpec, u: &ControlProcess, noise: &NoiseBundle, basis: BasisSpec) -> Result<ControlAnalysis> {
    let fwd = simulate_forward(spec, u, noise)?;
    let bwd = solve_backward(spec, &fwd, noise, basis)?;
    let adj = solve_adjoint(spec, &fwd, &bwd, noise, basis)?;
    let (cost, path_costs) = cost_with_paths(spec, &fwd, &bwd)?;
    let (hu, hu_spread) = control_gradients(spec, &fwd, &bwd, &adj)?;
    Ok(ControlAnalysis {
        control: u.clone(),
        fwd,
        bwd,
        adj,
        cost,
        path_costs,
        hu,
        hu_spread,
    })
}

fn control_gradients(
    spec: &ProblemSpec,
    fwd: &ForwardTrajectories,
    bwd: &BackwardTrajectories,
    adj: &AdjointTrajectories,
) -> Result<(Vec<f64>, Vec<f64>)> {
    adj.check_forward(fwd)?;
    let c = spec.coefficients();
    let dims = spec.dims;
    let (n, kd) = (dims.n, dims.k);
    let np = fwd.n_paths();
    let steps = fwd.grid().steps();
    let mut hu = vec![0.0; steps * np * kd];
    let mut hu_spread = vec![0.0; steps * np * kd];
    // Running sums of p_{l+1} - p_hat_l from the terminal step down.
    let mut tail = vec![0.0; np * n];
    for i in (0..steps).rev() {
        let t = fwd.grid().time(i);
        let block = i * np * kd..(i + 1) * np * kd;
        let bad: Vec<Option<&'static str>> = hu[block.clone()]
            .par_chunks_mut(kd)
            .zip(hu_spread[block].par_chunks_mut(kd))
            .zip(tail.par_chunks_mut(n))
            .enumerate()
            .map_init(
                || (HamiltonianWorkspace::new(dims), vec![0.0; n]),
                |(ws, p_spread), (j, ((out, out_spread), tail))| {
                    let pt = Point {
                        t,
                        x: fwd.x(i, j),
                        y: bwd.y(i, j),
                        z1: bwd.z1(i, j),
                        z2: bwd.z2(i, j),
                        u: fwd.u(i, j),
                    };
                    let (k, p) = (adj.k(i, j), adj.p_hat(i, j));
                    let slot = ws.shifted_r2(c, &pt, k, p, adj.r2(i, j));
                    ws.partials(c, &pt, k, p, adj.q1(i, j), adj.q2(i, j), slot);
                    out.copy_from_slice(&ws.hu);
                    let bad = ws.non_finite_partial();

                    let next = adj.p(i + 1, j);
                    for a in 0..n {
                        tail[a] += next[a] - p[a];
                        p_spread[a] = p[a] + tail[a];
                    }
                    let slot = ws.shifted_r2(c, &pt, k, p_spread, adj.r2(i, j));
                    ws.partials(c, &pt, k, p_spread, adj.q1(i, j), adj.q2(i, j), slot);
                    out_spread.copy_from_slice(&ws.hu);
                    bad.or(ws.non_finite_partial())
                },
            )
            .collect();
        if let Some(name) = bad.iter().flatten().next() {
            return Err(Error::NonFiniteTerm(format!("Hamiltonian partial {name} on step {i}")));
        }
    }
    Ok((hu, hu_spread))
}

fn check_same_grid(a: &ControlProcess, b: &ControlProcess) -> Result<()> {
    if a.grid() != b.grid() || a.dim() != b.dim() {
        return Err(Error::GridMismatch("controls live on different grids".into()));
    }
    Ok(())
}

/// `sum_i dt * mean_paths(rho_i H_u(t_i) . (u_i - u_eps_i))` along the
/// analysis of `u_eps`.
pub fn necessary_gap(analysis: &ControlAnalysis, u: &ControlProcess) -> Result<Estimate> {
    check_same_grid(&analysis.control, u)?;
    Ok(analysis.gap_estimate(u))
}

/// Infimum of the gap over deterministic admissible controls.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MinGap {
    pub gap: f64,
    pub stderr: f64,
    pub minimizer: ControlProcess,
    /// `mean_paths(rho_i H_u(t_i))` per step.
    pub mean_gradient: Vec<Vec<f64>>,
}

/// Over piecewise-constant deterministic controls the infimum decouples per
/// step: `v_i = argmin_{v in U} <g_i, v>` with `g_i = mean_paths(rho_i H_u)`.
/// Each step contributes `dt <g_i, v_i - u_eps_i> <= 0`.
pub fn min_gap_over_a(spec: &ProblemSpec, analysis: &ControlAnalysis) -> Result<MinGap> {
    let grid = *analysis.control.grid();
    let dt = grid.dt();
    let mean_gradient = analysis.mean_gradient();
    let values: Vec<Vec<f64>> = mean_gradient.iter().map(|g| spec.control_set.linear_minimize(g)).collect();
    let minimizer = ControlProcess::new(grid, values, &spec.control_set)?;
    let gap: f64 = mean_gradient
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let d: Vec<f64> = minimizer
                .value(i)
                .iter()
                .zip(analysis.control.value(i))
                .map(|(a, b)| a - b)
                .collect();
            // The exact value is non-positive; clamp rounding.
            (dt * dot(g, &d)).min(0.0)
        })
        .sum();
    let est = analysis.gap_estimate(&minimizer);
    Ok(MinGap {
        gap,
        stderr: est.stderr,
        minimizer,
        mean_gradient,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    NecessaryHolds,
    NecessaryViolated,
    SufficientNearOptimal,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub instance: String,
    pub noise: NoiseOrigin,
    pub n_paths: usize,
    pub steps: usize,
    pub basis_degree: usize,
    pub noise_fingerprint: String,
}

impl Provenance {
    fn new(spec: &ProblemSpec, noise: &NoiseBundle, basis: BasisSpec) -> Self {
        Self {
            instance: spec.name.clone(),
            noise: noise.origin().clone(),
            n_paths: noise.n_paths(),
            steps: noise.grid().steps(),
            basis_degree: basis.degree,
            noise_fingerprint: format!("{:016x}", noise.fingerprint()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub gap: f64,
    pub gap_stderr: f64,
    pub epsilon: f64,
    pub constant_c: f64,
    pub order_lambda: f64,
    /// `-C eps^lambda - 3 stderr`, the bound the gap is compared with.
    pub threshold: f64,
    pub verdict: Verdict,
    pub cost: CostReport,
    pub convexity: Option<ConvexityReport>,
    pub provenance: Provenance,
}

/// Monte Carlo slack, in standard errors, on every certificate inequality.
pub const SLACK_STDERRS: f64 = 3.0;

fn check_certificate_inputs(epsilon: f64, constant: f64, lambda: f64) -> Result<()> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if !(constant.is_finite() && constant > 0.0) {
        return Err(Error::InvalidArgument(format!("constant C must be > 0, got {constant}")));
    }
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("order exponent must be > 0, got {lambda}")));
    }
    Ok(())
}

/// Necessary-condition certificate: holds iff
/// `min_gap >= -C sqrt(eps) - 3 stderr`.
pub fn certify_necessary(
    spec: &ProblemSpec,
    u_eps: &ControlProcess,
    epsilon: f64,
    constant: f64,
    noise: &NoiseBundle,
    basis: BasisSpec,
) -> Result<Certificate> {
    check_certificate_inputs(epsilon, constant, 0.5)?;
    let analysis = analyze_control(spec, u_eps, noise, basis)?;
    Ok(necessary_from_analysis(spec, &analysis, epsilon, constant, noise, basis)?.0)
}

/// As [`certify_necessary`] on an existing analysis; also returns the min gap.
pub fn necessary_from_analysis(
    spec: &ProblemSpec,
    analysis: &ControlAnalysis,
    epsilon: f64,
    constant: f64,
    noise: &NoiseBundle,
    basis: BasisSpec,
) -> Result<(Certificate, MinGap)> {
    check_certificate_inputs(epsilon, constant, 0.5)?;
    let mg = min_gap_over_a(spec, analysis)?;
    let threshold = -constant * epsilon.sqrt() - SLACK_STDERRS * mg.stderr;
    let verdict = if mg.gap >= threshold {
        Verdict::NecessaryHolds
    } else {
        Verdict::NecessaryViolated
    };
    let cert = Certificate {
        gap: mg.gap,
        gap_stderr: mg.stderr,
        epsilon,
        constant_c: constant,
        order_lambda: 0.5,
        threshold,
        verdict,
        cost: analysis.cost.clone(),
        convexity: None,
        provenance: Provenance::new(spec, noise, basis),
    };
    Ok((cert, mg))
}

fn check_sufficient_structure(spec: &ProblemSpec) -> Result<()> {
    if !spec.structure.control_free_observation {
        return Err(Error::Precondition(format!(
            "instance {} has an observation drift depending on the state or control",
            spec.name
        )));
    }
    if !spec.structure.linear_terminal_map {
        return Err(Error::Precondition(format!(
            "instance {} has a nonlinear terminal map phi",
            spec.name
        )));
    }
    Ok(())
}

/// Convexity probes drawn from trajectory points of an analysis.
pub fn trajectory_probes(analysis: &ControlAnalysis, count: usize, seed: u64) -> Vec<(StatePoint, MultiplierPoint)> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let steps = analysis.fwd.grid().steps();
    let np = analysis.fwd.n_paths();
    (0..count)
        .map(|_| {
            let i = rng.random_range(0..steps);
            let j = rng.random_range(0..np);
            (analysis.state(i, j), analysis.multipliers(i, j))
        })
        .collect()
}

/// Sufficient-condition certificate. Requires a control-free observation drift
/// and a linear terminal map (otherwise a precondition error). Inconclusive if
/// any sampled convexity probe fails; otherwise sufficient-near-optimal iff
/// `min_gap >= -C eps^lambda - 3 stderr`, and necessary-violated if not.
#[allow(clippy::too_many_arguments)]
pub fn certify_sufficient(
    spec: &ProblemSpec,
    u_eps: &ControlProcess,
    epsilon: f64,
    lambda: f64,
    constant: f64,
    noise: &NoiseBundle,
    basis: BasisSpec,
    n_probes: usize,
    seed: u64,
) -> Result<Certificate> {
    check_certificate_inputs(epsilon, constant, lambda)?;
    check_sufficient_structure(spec)?;
    let analysis = analyze_control(spec, u_eps, noise, basis)?;
    let probes = trajectory_probes(&analysis, n_probes.max(1), seed);
    let convexity = check_h_convexity(spec, &probes, n_probes.max(1), seed)?;
    let mg = min_gap_over_a(spec, &analysis)?;
    let threshold = -constant * epsilon.powf(lambda) - SLACK_STDERRS * mg.stderr;
    let verdict = if !convexity.passed {
        Verdict::Inconclusive
    } else if mg.gap >= threshold {
        Verdict::SufficientNearOptimal
    } else {
        Verdict::NecessaryViolated
    };
    Ok(Certificate {
        gap: mg.gap,
        gap_stderr: mg.stderr,
        epsilon,
        constant_c: constant,
        order_lambda: lambda,
        threshold,
        verdict,
        cost: analysis.cost.clone(),
        convexity: Some(convexity),
        provenance: Provenance::new(spec, noise, basis),
    })
}

/// Both sides of the cost-difference representation on common noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostDifference {
    /// `J(u) - J(u_eps)`.
    pub lhs: f64,
    pub lhs_stderr: f64,
    /// Hamiltonian-increment expansion along the adjoints of `u_eps`.
    pub rhs: f64,
    pub rhs_stderr: f64,
    /// Standard error of the per-path difference `lhs - rhs`.
    pub paired_stderr: f64,
    /// `necessary_gap(u)` at `u_eps`; by convexity `rhs >= gap_term`.
    pub gap_term: f64,
    pub gap_stderr: f64,
}

impl CostDifference {
    pub fn combined_stderr(&self) -> f64 {
        self.lhs_stderr.hypot(self.rhs_stderr)
    }
}

/// Computes `J(u) - J(u_eps)` directly and through
///
/// ```text
/// E[ sum_i dt rho_i ( H(Theta^u, u) - H(Theta^eps, u_eps)
///                     - <H_x, dx> - <H_y, dy> - <H_z1, dz1> - <H_z2, dz2> ) ]
///   + E[ rho_N ( Phi(x^u_N) - Phi(x^eps_N) - <Phi_x(x^eps_N), dx_N> ) ]
///   + gamma(y^u_0) - gamma(y^eps_0) - <gamma_y(y^eps_0), dy_0>
/// ```
///
/// where the Hamiltonian and its partials use the adjoints of `u_eps` and
/// `d. = .^u - .^eps`. Both controls run on the same noise.
pub fn cost_difference_representation(
    spec: &ProblemSpec,
    u: &ControlProcess,
    eps: &ControlAnalysis,
    noise: &NoiseBundle,
    basis: BasisSpec,
) -> Result<CostDifference> {
    check_sufficient_structure(spec)?;
    check_same_grid(u, &eps.control)?;
    eps.fwd.check_noise(noise)?;
    let fwd_u = simulate_forward(spec, u, noise)?;
    let bwd_u = solve_backward(spec, &fwd_u, noise, basis)?;
    let (cost_u, paths_u) = cost_with_paths(spec, &fwd_u, &bwd_u)?;

    let c = spec.coefficients();
    let dims = spec.dims;
    let (n, m) = (dims.n, dims.m);
    let grid = *eps.fwd.grid();
    let (steps, dt) = (grid.steps(), grid.dt());
    let np = eps.fwd.n_paths();
    let w = eps.fwd.weights();

    let rhs_paths: Vec<f64> = (0..np)
        .into_par_iter()
        .map_init(
            || (HamiltonianWorkspace::new(dims), vec![0.0; n]),
            |(ws, phix), j| {
                let mut acc = 0.0;
                for i in 0..steps {
                    let t = grid.time(i);
                    let pe = Point {
                        t,
                        x: eps.fwd.x(i, j),
                        y: eps.bwd.y(i, j),
                        z1: eps.bwd.z1(i, j),
                        z2: eps.bwd.z2(i, j),
                        u: eps.fwd.u(i, j),
                    };
                    let pu = Point {
                        t,
                        x: fwd_u.x(i, j),
                        y: bwd_u.y(i, j),
                        z1: bwd_u.z1(i, j),
                        z2: bwd_u.z2(i, j),
                        u: fwd_u.u(i, j),
                    };
                    let (k, p, q1, q2, r2) = (
                        eps.adj.k(i, j),
                        eps.adj.p_hat(i, j),
                        eps.adj.q1(i, j),
                        eps.adj.q2(i, j),
                        eps.adj.r2(i, j),
                    );
                    let h_u = ws.value(c, &pu, k, p, q1, q2, r2);
                    let h_e = ws.value(c, &pe, k, p, q1, q2, r2);
                    let slot = ws.shifted_r2(c, &pe, k, p, r2);
                    ws.partials(c, &pe, k, p, q1, q2, slot);
                    let mut lin = 0.0;
                    for a in 0..n {
                        lin += ws.hx[a] * (pu.x[a] - pe.x[a]);
                    }
                    for a in 0..m {
                        lin += ws.hy[a] * (pu.y[a] - pe.y[a])
                            + ws.hz1[a] * (pu.z1[a] - pe.z1[a])
                            + ws.hz2[a] * (pu.z2[a] - pe.z2[a]);
                    }
                    acc += dt * eps.fwd.rho(i, j) * (h_u - h_e - lin);
                }
                let (xu, xe) = (fwd_u.x(steps, j), eps.fwd.x(steps, j));
                c.terminal_cost_gradient(xe, phix);
                let lin: f64 = (0..n).map(|a| phix[a] * (xu[a] - xe[a])).sum();
                acc + eps.fwd.rho(steps, j) * (c.terminal_cost(xu) - c.terminal_cost(xe) - lin)
            },
        )
        .collect();
    if rhs_paths.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteTerm("cost-difference expansion".into()));
    }

    let (ye, yu) = (&eps.cost.y0_mean, &cost_u.y0_mean);
    let mut gy = vec![0.0; m];
    c.initial_cost_gradient(ye, &mut gy);
    let dy0: Vec<f64> = yu.iter().zip(ye).map(|(a, b)| a - b).collect();
    let gamma_bracket = c.initial_cost(yu) - c.initial_cost(ye) - dot(&gy, &dy0);

    let lhs_paths: Vec<f64> = paths_u.iter().zip(&eps.path_costs).map(|(a, b)| a - b).collect();
    let lhs_est = weighted_estimate(&lhs_paths, w);
    let rhs_est = weighted_estimate(&rhs_paths, w);
    let diff: Vec<f64> = lhs_paths.iter().zip(&rhs_paths).map(|(a, b)| a - b).collect();
    let paired = weighted_estimate(&diff, w);
    let gap = necessary_gap(eps, u)?;
    Ok(CostDifference {
        lhs: cost_u.j - eps.cost.j,
        lhs_stderr: lhs_est.stderr,
        rhs: rhs_est.mean + gamma_bracket,
        rhs_stderr: rhs_est.stderr,
        paired_stderr: paired.stderr,
        gap_term: gap.mean,
        gap_stderr: gap.stderr,
    })
}

/// Power law `-min_gap = C eps^exponent` fitted in log-log coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    pub exponent: f64,
    pub constant: f64,
    pub used: usize,
    /// Points dropped because `eps <= 0` or `min_gap >= 0`.
    pub excluded: usize,
}

/// Least-squares fit of `log(-min_gap)` against `log(eps)`.
pub fn estimate_order(points: &[(f64, f64)]) -> Result<OrderFit> {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|(e, g)| e.is_finite() && g.is_finite() && *e > 0.0 && *g < 0.0)
        .map(|(e, g)| (e.ln(), (-g).ln()))
        .collect();
    if usable.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "order fit needs at least 3 points with eps > 0 and min_gap < 0, got {}",
            usable.len()
        )));
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = usable.iter().copied().unzip();
    if xs.iter().all(|x| *x == xs[0]) {
        return Err(Error::InvalidArgument("order fit needs distinct eps values".into()));
    }
    let (intercept, slope) = linear_fit(&xs, &ys);
    Ok(OrderFit {
        exponent: slope,
        constant: intercept.exp(),
        used: usable.len(),
        excluded: points.len() - usable.len(),
    })
}

/// One row of an order study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub delta: f64,
    pub epsilon: f64,
    pub min_gap: f64,
    pub stderr: f64,
}

/// Writes `delta, epsilon, min_gap, stderr, fitted_exponent` rows.
pub fn write_order_csv<W: std::io::Write>(rows: &[OrderRow], fit: Option<&OrderFit>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["delta", "epsilon", "min_gap", "stderr", "fitted_exponent"])?;
    let exp = fit.map(|f| format!("{:e}", f.exponent)).unwrap_or_default();
    for r in rows {
        w.write_record([
            format!("{:e}", r.delta),
            format!("{:e}", r.epsilon),
            format!("{:e}", r.min_gap),
            format!("{:e}", r.stderr),
            exp.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Norms entering the Lipschitz estimate of the state and adjoint maps:
/// suprema over nodes of path-averaged squared differences for the node
/// processes, plus time-integrated squared differences for the martingale
/// integrands.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDistance {
    pub state: f64,
    pub adjoint: f64,
}

impl TrajectoryDistance {
    pub fn total(&self) -> f64 {
        self.state + self.adjoint
    }
}

/// Distance between two analyses on the same noise.
pub fn trajectory_distance(a: &ControlAnalysis, b: &ControlAnalysis) -> Result<TrajectoryDistance> {
    if a.fwd.noise_fp != b.fwd.noise_fp {
        return Err(Error::GridMismatch("analyses use different noise".into()));
    }
    let grid = *a.fwd.grid();
    let (steps, dt) = (grid.steps(), grid.dt());
    let np = a.fwd.n_paths();
    let w = a.fwd.weights();
    let avg = |f: &(dyn Fn(usize) -> f64 + Sync)| -> f64 {
        match w {
            None => det_sum(np, f) / np as f64,
            Some(w) => det_sum(np, |j| w[j] * f(j)),
        }
    };
    let sq = |u: &[f64], v: &[f64]| -> f64 { u.iter().zip(v).map(|(x, y)| (x - y).powi(2)).sum() };
    let mut sup_state = [0.0f64; 2];
    let mut sup_adj = [0.0f64; 3];
    let mut int_state = 0.0;
    let mut int_adj = 0.0;
    for i in 0..=steps {
        sup_state[0] = sup_state[0].max(avg(&|j| sq(a.fwd.x(i, j), b.fwd.x(i, j))));
        sup_state[1] = sup_state[1].max(avg(&|j| sq(a.bwd.y(i, j), b.bwd.y(i, j))));
        sup_adj[0] = sup_adj[0].max(avg(&|j| sq(a.adj.k(i, j), b.adj.k(i, j))));
        sup_adj[1] = sup_adj[1].max(avg(&|j| sq(a.adj.p(i, j), b.adj.p(i, j))));
        sup_adj[2] = sup_adj[2].max(avg(&|j| (a.adj.r(i, j) - b.adj.r(i, j)).powi(2)));
        if i < steps {
            int_state += dt * avg(&|j| sq(a.bwd.z1(i, j), b.bwd.z1(i, j)) + sq(a.bwd.z2(i, j), b.bwd.z2(i, j)));
            int_adj += dt
                * avg(&|j| {
                    sq(a.adj.q1(i, j), b.adj.q1(i, j))
                        + sq(a.adj.q2(i, j), b.adj.q2(i, j))
                        + (a.adj.r1(i, j) - b.adj.r1(i, j)).powi(2)
                        + (a.adj.r2(i, j) - b.adj.r2(i, j)).powi(2)
                });
        }
    }
    Ok(TrajectoryDistance {
        state: sup_state.iter().sum::<f64>() + int_state,
        adjoint: sup_adj.iter().sum::<f64>() + int_adj,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_lq_instance, ControlSet, LqParams};
    use crate::paths::{make_time_grid, sample_noise};

    fn lq_setup(steps: usize, paths: usize) -> (ProblemSpec, NoiseBundle) {
        let spec = make_lq_instance(&LqParams::default()).unwrap();
        let g = make_time_grid(1.0, steps).unwrap();
        (spec, sample_noise(&g, paths, 11).unwrap())
    }

    #[test]
    fn order_fit_exact_lines() {
        let pts: Vec<(f64, f64)> = [1e-4, 1e-3, 1e-2, 1e-1].iter().map(|e: &f64| (*e, -e.sqrt())).collect();
        let f = estimate_order(&pts).unwrap();
        assert!((f.exponent - 0.5).abs() < 1e-12 && (f.constant - 1.0).abs() < 1e-12);
        let pts: Vec<(f64, f64)> = [1e-3, 1e-2, 1e-1].iter().map(|e| (*e, -3.0 * e)).collect();
        let f = estimate_order(&pts).unwrap();
        assert!((f.exponent - 1.0).abs() < 1e-12 && (f.constant - 3.0).abs() < 1e-12);
    }

    #[test]
    fn order_fit_excludes_and_rejects() {
        let pts = [(1e-3, -0.1), (1e-2, 0.0), (1e-1, -0.5), (0.0, -0.2)];
        assert!(estimate_order(&pts).is_err());
        let pts = [(1e-3, -0.1), (1e-2, 0.0), (1e-1, -0.5), (0.5, -1.0)];
        let f = estimate_order(&pts).unwrap();
        assert_eq!((f.used, f.excluded), (3, 1));
    }

    #[test]
    fn zero_and_linear_gap() {
        let (spec, noise) = lq_setup(8, 4_000);
        let g = *noise.grid();
        let ue = ControlProcess::constant(g, &[-0.2], &spec.control_set).unwrap();
        let a = analyze_control(&spec, &ue, &noise, BasisSpec::default()).unwrap();
        assert_eq!(necessary_gap(&a, &ue).unwrap().mean, 0.0);
        let u = ControlProcess::constant(g, &[0.1], &spec.control_set).unwrap();
        let u2 = ControlProcess::constant(g, &[0.4], &spec.control_set).unwrap();
        let g1 = necessary_gap(&a, &u).unwrap().mean;
        let g2 = necessary_gap(&a, &u2).unwrap().mean;
        assert!((g2 - 2.0 * g1).abs() < 1e-12 * g1.abs().max(1.0));
    }

    #[test]
    fn min_gap_is_nonpositive_and_minimal() {
        let (spec, noise) = lq_setup(8, 4_000);
        let g = *noise.grid();
        for c in [-2.0, -0.5, 0.0, 1.3, 2.0] {
            let ue = ControlProcess::constant(g, &[c], &spec.control_set).unwrap();
            let a = analyze_control(&spec, &ue, &noise, BasisSpec::default()).unwrap();
            let mg = min_gap_over_a(&spec, &a).unwrap();
            assert!(mg.gap <= 0.0);
            for v in [-2.0, -1.0, 0.0, 1.0, 2.0] {
                let u = ControlProcess::constant(g, &[v], &spec.control_set).unwrap();
                assert!(necessary_gap(&a, &u).unwrap().mean >= mg.gap - 1e-12);
            }
        }
    }

    #[test]
    fn single_step_linear_minimization() {
        // One step, unit horizon: l = 2u gives mean gradient 2 everywhere.
        use crate::model::{Map3, Map6, ScalarCoefficients};
        let l = Map6::new(
            |_, _, _, _, _, u| 2.0 * u,
            |_, _, _, _, _, _| 0.0,
            |_, _, _, _, _, _| 0.0,
            |_, _, _, _, _, _| 0.0,
            |_, _, _, _, _, _| 0.0,
            |_, _, _, _, _, _| 2.0,
        );
        let coeffs = ScalarCoefficients::default()
            .with_sigma1(Map3::constant(1.0))
            .with_running_cost(l);
        let spec = ProblemSpec::scalar("lin", 1.0, 0.0, ControlSet::interval(-1.0, 1.0).unwrap(), coeffs).unwrap();
        let g = make_time_grid(1.0, 1).unwrap();
        let noise = sample_noise(&g, 100, 1).unwrap();
        let ue = ControlProcess::constant(g, &[0.0], &spec.control_set).unwrap();
        let a = analyze_control(&spec, &ue, &noise, BasisSpec::default()).unwrap();
        let mg = min_gap_over_a(&spec, &a).unwrap();
        assert_eq!(mg.minimizer.value(0)[0], -1.0);
        assert!((mg.gap + 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_controls_have_zero_difference() {
        let (spec, noise) = lq_setup(8, 2_000);
        let ue = ControlProcess::constant(*noise.grid(), &[-0.3], &spec.control_set).unwrap();
        let a = analyze_control(&spec, &ue, &noise, BasisSpec::default()).unwrap();
        let d = cost_difference_representation(&spec, &ue, &a, &noise, BasisSpec::default()).unwrap();
        assert_eq!(d.lhs, 0.0);
        assert_eq!(d.rhs, 0.0);
    }

    #[test]
    fn observation_dependent_instances_are_gated() {
        use crate::model::{make_scalar_nonlinear_instance, ScalarNonlinearParams};
        let spec = make_scalar_nonlinear_instance(&ScalarNonlinearParams::default()).unwrap();
        let g = make_time_grid(1.0, 4).unwrap();
        let noise = sample_noise(&g, 200, 1).unwrap();
        let ue = ControlProcess::constant(g, &[0.0], &spec.control_set).unwrap();
        let r = certify_sufficient(&spec, &ue, 0.1, 0.5, 1.0, &noise, BasisSpec::default(), 10, 1);
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn certificate_inputs_are_validated() {
        let (spec, noise) = lq_setup(4, 200);
        let ue = ControlProcess::constant(*noise.grid(), &[0.0], &spec.control_set).unwrap();
        assert!(certify_necessary(&spec, &ue, -1.0, 1.0, &noise, BasisSpec::default()).is_err());
        assert!(certify_necessary(&spec, &ue, 0.1, 0.0, &noise, BasisSpec::default()).is_err());
    }

    #[test]
    fn certificate_json_has_kebab_verdict() {
        let (spec, noise) = lq_setup(4, 500);
        let ue = ControlProcess::constant(*noise.grid(), &[-0.5], &spec.control_set).unwrap();
        let c = certify_necessary(&spec, &ue, 0.01, 5.0, &noise, BasisSpec::default()).unwrap();
        let v = serde_json::to_value(&c).unwrap();
        assert_eq!(v["verdict"], "necessary-holds");
        assert!(v["provenance"]["noise_fingerprint"].is_string());
    }
}
