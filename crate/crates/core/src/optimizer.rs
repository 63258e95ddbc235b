//! Stochastic-maximum-principle descent and perturbation families.
//!
//! The descent direction at `u^j` is the gap-minimizing control `v` of
//! [`min_gap_over_a`]; since `J(u^j + s (v - u^j)) = J(u^j) + s * min_gap + O(s^2)`,
//! the min gap doubles as the conditional-gradient duality gap and the stopping
//! quantity. All iterations share one noise bundle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{strong_cost, CostReport};
use crate::model::{control_distance, ControlProcess, ProblemSpec};
use crate::nearopt::{analyze_control, estimate_order, min_gap_over_a, ControlAnalysis, MinGap, OrderFit, OrderRow, SLACK_STDERRS};
use crate::paths::{sample_noise, NoiseBundle, TimeGrid};
use crate::regression::BasisSpec;

/// Consecutive significant cost increases tolerated before aborting.
pub const MAX_INCREASES: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StepRule {
    /// Frank-Wolfe with `s_j = 2 / (j + 2)`.
    Classic,
    /// Frank-Wolfe, trial step `2 / (j + 2)` refined by the quadratic through
    /// `J(0)`, the slope `min_gap` and `J(s)`, backtracking until `J` does not
    /// increase.
    #[default]
    LineSearch,
    /// `u <- proj_U(u - eta * g)` with the mean weighted gradient `g`.
    Projected { eta: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentParams {
    pub max_iter: usize,
    pub step_rule: StepRule,
    pub n_paths: usize,
    pub seed: u64,
    pub tol_gap: f64,
    pub basis: BasisSpec,
}

impl Default for DescentParams {
    fn default() -> Self {
        Self {
            max_iter: 100,
            step_rule: StepRule::default(),
            n_paths: 100_000,
            seed: 1,
            tol_gap: 1e-4,
            basis: BasisSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub control: ControlProcess,
    pub cost: f64,
    pub stderr: f64,
    pub min_gap: f64,
    pub gap_stderr: f64,
    /// Step that produced this iterate (0 for the start).
    pub step: f64,
    /// `d(u^j, u^(j-1))`.
    pub distance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GapBelowTolerance,
    MaxIterations,
    /// The line search found no non-increasing step.
    Stalled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DescentTrace {
    pub records: Vec<IterationRecord>,
    pub termination: Termination,
}

impl DescentTrace {
    pub fn last(&self) -> &IterationRecord {
        self.records.last().expect("trace always holds the starting iterate")
    }

    pub fn final_control(&self) -> &ControlProcess {
        &self.last().control
    }

    /// CSV with columns `iteration, cost, stderr, min_gap, gap_stderr, step, distance`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["iteration", "cost", "stderr", "min_gap", "gap_stderr", "step", "distance"])?;
        for r in &self.records {
            w.write_record([
                r.iteration.to_string(),
                format!("{:e}", r.cost),
                format!("{:e}", r.stderr),
                format!("{:e}", r.min_gap),
                format!("{:e}", r.gap_stderr),
                format!("{:e}", r.step),
                format!("{:e}", r.distance),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_params(spec: &ProblemSpec, u0: &ControlProcess, p: &DescentParams) -> Result<()> {
    if !u0.is_admissible(&spec.control_set) {
        return Err(Error::InvalidArgument("starting control is outside U".into()));
    }
    if !(p.tol_gap.is_finite() && p.tol_gap >= 0.0) {
        return Err(Error::InvalidArgument(format!("gap tolerance must be >= 0, got {}", p.tol_gap)));
    }
    if let StepRule::Projected { eta } = p.step_rule {
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::InvalidArgument(format!("projected step eta must be > 0, got {eta}")));
        }
    }
    Ok(())
}

/// Runs the descent on fresh Gaussian noise drawn from `params.seed`.
pub fn smp_descent(spec: &ProblemSpec, u0: &ControlProcess, params: &DescentParams) -> Result<DescentTrace> {
    check_params(spec, u0, params)?;
    let noise = sample_noise(u0.grid(), params.n_paths, params.seed)?;
    smp_descent_on(spec, u0, params, &noise)
}

/// Runs the descent on a given noise bundle.
pub fn smp_descent_on(spec: &ProblemSpec, u0: &ControlProcess, params: &DescentParams, noise: &NoiseBundle) -> Result<DescentTrace> {
    check_params(spec, u0, params)?;
    let basis = params.basis;
    let mut current = analyze_control(spec, u0, noise, basis)?;
    let mut gap = min_gap_over_a(spec, &current)?;
    let mut records = vec![record(0, &current, &gap, 0.0, 0.0)];
    let mut increases = 0;
    let mut termination = Termination::MaxIterations;

    for j in 0..params.max_iter {
        if gap.gap.abs() <= params.tol_gap + SLACK_STDERRS * gap.stderr {
            termination = Termination::GapBelowTolerance;
            break;
        }
        let (next, step) = match params.step_rule {
            StepRule::Classic => {
                let s = 2.0 / (j as f64 + 2.0);
                let u = current.control.blend(&gap.minimizer, s);
                (analyze_control(spec, &u, noise, basis)?, s)
            }
            StepRule::Projected { eta } => {
                let values = (0..current.control.steps())
                    .map(|i| {
                        current
                            .control
                            .value(i)
                            .iter()
                            .zip(&gap.mean_gradient[i])
                            .map(|(u, g)| u - eta * g)
                            .collect()
                    })
                    .collect();
                let u = ControlProcess::projected(*current.control.grid(), values, &spec.control_set)?;
                (analyze_control(spec, &u, noise, basis)?, 1.0)
            }
            StepRule::LineSearch => match line_search(spec, &current, &gap, j, noise, basis)? {
                Some(found) => found,
                None => {
                    termination = Termination::Stalled;
                    break;
                }
            },
        };
        let prev_cost = current.cost.j;
        let distance = control_distance(&next.control, &current.control)?;
        if next.cost.j > prev_cost + SLACK_STDERRS * next.cost.stderr {
            increases += 1;
            if increases >= MAX_INCREASES {
                return Err(Error::Aborted(format!(
                    "cost rose by more than {SLACK_STDERRS} standard errors on {MAX_INCREASES} consecutive \
                     iterations (last {prev_cost:.6} -> {:.6}); reduce the step or raise the path count",
                    next.cost.j
                )));
            }
        } else {
            increases = 0;
        }
        // Release the old pipeline before the next one is built.
        drop(std::mem::replace(&mut current, next));
        gap = min_gap_over_a(spec, &current)?;
        records.push(record(j + 1, &current, &gap, step, distance));
    }
    Ok(DescentTrace { records, termination })
}

fn record(iteration: usize, a: &ControlAnalysis, gap: &MinGap, step: f64, distance: f64) -> IterationRecord {
    IterationRecord {
        iteration,
        control: a.control.clone(),
        cost: a.cost.j,
        stderr: a.cost.stderr,
        min_gap: gap.gap,
        gap_stderr: gap.stderr,
        step,
        distance,
    }
}

const MAX_BACKTRACKS: usize = 8;

fn line_search(
    spec: &ProblemSpec,
    current: &ControlAnalysis,
    gap: &MinGap,
    j: usize,
    noise: &NoiseBundle,
    basis: BasisSpec,
) -> Result<Option<(ControlAnalysis, f64)>> {
    let j0 = current.cost.j;
    let slope = gap.gap;
    let trial = |s: f64| analyze_control(spec, &current.control.blend(&gap.minimizer, s), noise, basis);
    let mut s = 2.0 / (j as f64 + 2.0);
    for _ in 0..MAX_BACKTRACKS {
        let at_s = trial(s)?;
        let curvature = (at_s.cost.j - j0 - slope * s) / (s * s);
        let model_min = if curvature > 0.0 { (-slope / (2.0 * curvature)).min(1.0) } else { s };
        let accepted = at_s.cost.j <= j0;
        if (model_min - s).abs() > 1e-3 * s && (accepted || model_min < s) {
            let refined = trial(model_min)?;
            if refined.cost.j <= j0 && (!accepted || refined.cost.j < at_s.cost.j) {
                return Ok(Some((refined, model_min)));
            }
        }
        if accepted {
            return Ok(Some((at_s, s)));
        }
        s = if model_min < s { model_min.max(0.1 * s) } else { 0.5 * s };
    }
    Ok(None)
}

/// A member of a perturbation family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbedControl {
    pub delta: f64,
    pub control: ControlProcess,
    pub cost: CostReport,
    /// `max(J(u_delta) - J(u_star), 0)` on common noise.
    pub epsilon: f64,
    /// `J(u_delta) - V` against the oracle value.
    pub excess_over_oracle: f64,
}

fn perturbed(spec: &ProblemSpec, u_star: &ControlProcess, delta: f64, direction: &[Vec<f64>]) -> Result<ControlProcess> {
    if direction.len() != u_star.steps() || direction.iter().any(|d| d.len() != u_star.dim()) {
        return Err(Error::GridMismatch("perturbation direction does not match the control grid".into()));
    }
    if !delta.is_finite() {
        return Err(Error::InvalidArgument(format!("perturbation size must be finite, got {delta}")));
    }
    let values = (0..u_star.steps())
        .map(|i| u_star.value(i).iter().zip(&direction[i]).map(|(u, d)| u + delta * d).collect())
        .collect();
    ControlProcess::projected(*u_star.grid(), values, &spec.control_set)
}

/// `u_delta = proj_U(u_star + delta * direction)` for each `delta`, with its
/// excess cost. `epsilon` is measured against `J(u_star)` on the same noise so
/// that Monte Carlo error in the two costs largely cancels; the oracle value
/// is required and reported alongside.
pub fn perturbation_family(
    spec: &ProblemSpec,
    u_star: &ControlProcess,
    deltas: &[f64],
    direction: &[Vec<f64>],
    oracle_value: Option<f64>,
    noise: &NoiseBundle,
    basis: BasisSpec,
) -> Result<Vec<PerturbedControl>> {
    let v = oracle_value.ok_or_else(|| Error::MissingOracle(format!("instance {} has no oracle value", spec.name)))?;
    let reference = strong_cost(spec, u_star, noise, basis)?;
    deltas
        .iter()
        .map(|&delta| {
            let control = perturbed(spec, u_star, delta, direction)?;
            let cost = strong_cost(spec, &control, noise, basis)?;
            Ok(PerturbedControl {
                delta,
                epsilon: (cost.j - reference.j).max(0.0),
                excess_over_oracle: cost.j - v,
                control,
                cost,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderStudy {
    pub rows: Vec<OrderRow>,
    /// Deltas dropped because they are zero.
    pub dropped_deltas: Vec<f64>,
    pub fit: OrderFit,
}

/// Perturbation family plus the min gap at each member and a power-law fit of
/// `-min_gap` against `epsilon`.
#[allow(clippy::too_many_arguments)]
pub fn order_study(
    spec: &ProblemSpec,
    u_star: &ControlProcess,
    deltas: &[f64],
    direction: &[Vec<f64>],
    oracle_value: Option<f64>,
    noise: &NoiseBundle,
    basis: BasisSpec,
) -> Result<OrderStudy> {
    oracle_value.ok_or_else(|| Error::MissingOracle(format!("instance {} has no oracle value", spec.name)))?;
    let (kept, dropped_deltas): (Vec<f64>, Vec<f64>) = deltas.iter().partition(|d| **d != 0.0);
    if kept.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "order study needs at least 3 nonzero deltas, got {}",
            kept.len()
        )));
    }
    let reference = strong_cost(spec, u_star, noise, basis)?;
    let mut rows = Vec::with_capacity(kept.len());
    for &delta in &kept {
        let control = perturbed(spec, u_star, delta, direction)?;
        let a = analyze_control(spec, &control, noise, basis)?;
        let mg = min_gap_over_a(spec, &a)?;
        rows.push(OrderRow {
            delta,
            epsilon: (a.cost.j - reference.j).max(0.0),
            min_gap: mg.gap,
            stderr: mg.stderr,
        });
    }
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.epsilon, r.min_gap)).collect();
    let fit = estimate_order(&points)?;
    Ok(OrderStudy { rows, dropped_deltas, fit })
}

/// Constant direction `value` on every step.
pub fn constant_direction(grid: &TimeGrid, value: &[f64]) -> Vec<Vec<f64>> {
    vec![value.to_vec(); grid.steps()]
}
