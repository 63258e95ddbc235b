use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ControlProcess, ControlSet, LinearFeedback, LqParams};
use crate::paths::TimeGrid;

/// Smallest accepted number of integration steps.
pub const MIN_ODE_STEPS: usize = 1000;

const BLOWUP: f64 = 1e8;

/// Solution of the scalar Riccati equations of the diagonal LQ family, one
/// per coordinate, together with the optimal costs and the optimal
/// deterministic (open-loop) control.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RiccatiSolution {
    pub params: LqParams,
    pub ode_steps: usize,
    pub times: Vec<f64>,
    /// `P(t_j)` per node, one entry per coordinate.
    pub p: Vec<Vec<f64>>,
    /// Mean state under the optimal deterministic control, per node.
    pub mean_state: Vec<Vec<f64>>,
    /// Value over state-feedback controls: `1/2 x0 P(0) x0 + 1/2 int sigma^2 P dt`.
    pub feedback_cost: f64,
    /// Value over deterministic controls: `1/2 x0 P(0) x0 + 1/2 int sigma^2 Pi dt`
    /// with `Pi' = -(2 a Pi + q)`, `Pi(T) = g`.
    pub open_loop_cost: f64,
    /// Largest `|P'(t) - F(P(t))|` at interval midpoints of the cubic Hermite interpolant.
    pub max_midpoint_residual: f64,
}

#[inline]
fn riccati_rhs(a: f64, b: f64, q: f64, r: f64, p: f64) -> f64 {
    -(2.0 * a * p + q - b * b * p * p / r)
}

fn hermite(h: f64, s: f64, y0: f64, y1: f64, d0: f64, d1: f64) -> (f64, f64) {
    let (s2, s3) = (s * s, s * s * s);
    let v = (2.0 * s3 - 3.0 * s2 + 1.0) * y0 + (s3 - 2.0 * s2 + s) * h * d0 + (-2.0 * s3 + 3.0 * s2) * y1 + (s3 - s2) * h * d1;
    let d = ((6.0 * s2 - 6.0 * s) * y0 + (3.0 * s2 - 4.0 * s + 1.0) * h * d0 + (-6.0 * s2 + 6.0 * s) * y1 + (3.0 * s2 - 2.0 * s) * h * d1) / h;
    (v, d)
}

/// Integrates `P' = -(2 a P + q - b^2 P^2 / r)`, `P(T) = g` backward with
/// classical RK4 on `ode_steps` uniform steps.
pub fn riccati_lq(params: &LqParams, ode_steps: usize) -> Result<RiccatiSolution> {
    params.validate()?;
    if !params.is_degenerate() {
        return Err(Error::Precondition(
            "the Riccati oracle needs h = 0 and sigma2 = 0".into(),
        ));
    }
    if ode_steps < MIN_ODE_STEPS {
        return Err(Error::InvalidArgument(format!(
            "ode_steps must be at least {MIN_ODE_STEPS}, got {ode_steps}"
        )));
    }
    let d = params.dim();
    let t_end = params.horizon;
    let h = t_end / ode_steps as f64;
    let times: Vec<f64> = (0..=ode_steps).map(|j| t_end * j as f64 / ode_steps as f64).collect();
    let mut p = vec![vec![0.0; d]; ode_steps + 1];
    let mut int_p = vec![0.0; d];
    let mut int_pi = vec![0.0; d];
    let mut p0 = vec![0.0; d];

    for c in 0..d {
        let (a, b, q, r, g) = (params.a[c], params.b[c], params.q[c], params.r[c], params.g[c]);
        // Augmented state (P, Pi, int_t^T P, int_t^T Pi) integrated in s = T - t.
        let f = |v: [f64; 4]| -> [f64; 4] {
            [-riccati_rhs(a, b, q, r, v[0]), 2.0 * a * v[1] + q, v[0], v[1]]
        };
        let mut v = [g, g, 0.0, 0.0];
        p[ode_steps][c] = g;
        for j in (0..ode_steps).rev() {
            let k1 = f(v);
            let k2 = f(std::array::from_fn(|e| v[e] + 0.5 * h * k1[e]));
            let k3 = f(std::array::from_fn(|e| v[e] + 0.5 * h * k2[e]));
            let k4 = f(std::array::from_fn(|e| v[e] + h * k3[e]));
            for e in 0..4 {
                v[e] += h / 6.0 * (k1[e] + 2.0 * k2[e] + 2.0 * k3[e] + k4[e]);
            }
            if !(v[0].is_finite() && v[0].abs() <= BLOWUP) {
                return Err(Error::NonFiniteTerm(format!(
                    "Riccati solution (|P| > {BLOWUP:e} at t = {})",
                    times[j]
                )));
            }
            p[j][c] = v[0];
        }
        p0[c] = v[0];
        int_p[c] = v[2];
        int_pi[c] = v[3];
    }

    let mut max_res = 0.0f64;
    for j in 0..ode_steps {
        for c in 0..d {
            let (a, b, q, r) = (params.a[c], params.b[c], params.q[c], params.r[c]);
            let (y0, y1) = (p[j][c], p[j + 1][c]);
            let (pm, dm) = hermite(h, 0.5, y0, y1, riccati_rhs(a, b, q, r, y0), riccati_rhs(a, b, q, r, y1));
            max_res = max_res.max((dm - riccati_rhs(a, b, q, r, pm)).abs());
        }
    }

    let mut base = 0.0;
    let mut fb = 0.0;
    let mut ol = 0.0;
    for c in 0..d {
        base += 0.5 * params.x0[c] * params.x0[c] * p0[c];
        fb += 0.5 * params.sigma[c].powi(2) * int_p[c];
        ol += 0.5 * params.sigma[c].powi(2) * int_pi[c];
    }

    let mut sol = RiccatiSolution {
        params: params.clone(),
        ode_steps,
        times,
        p,
        mean_state: Vec::new(),
        feedback_cost: base + fb,
        open_loop_cost: base + ol,
        max_midpoint_residual: max_res,
    };
    sol.mean_state = sol.integrate_mean_state();
    Ok(sol)
}

impl RiccatiSolution {
    fn step(&self) -> f64 {
        self.params.horizon / self.ode_steps as f64
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let h = self.step();
        let s = (t / h).clamp(0.0, self.ode_steps as f64);
        let j = (s.floor() as usize).min(self.ode_steps - 1);
        (j, s - j as f64)
    }

    fn rhs(&self, c: usize, p: f64) -> f64 {
        let pr = &self.params;
        riccati_rhs(pr.a[c], pr.b[c], pr.q[c], pr.r[c], p)
    }

    /// `P(t)` by cubic Hermite interpolation.
    pub fn p_at(&self, t: f64) -> Vec<f64> {
        let (j, s) = self.locate(t);
        (0..self.params.dim())
            .map(|c| {
                let (y0, y1) = (self.p[j][c], self.p[j + 1][c]);
                hermite(self.step(), s, y0, y1, self.rhs(c, y0), self.rhs(c, y1)).0
            })
            .collect()
    }

    /// Feedback gain `-(b / r) P(t)` per coordinate.
    pub fn gain_at(&self, t: f64) -> Vec<f64> {
        let pr = &self.params;
        self.p_at(t)
            .iter()
            .enumerate()
            .map(|(c, p)| -pr.b[c] / pr.r[c] * p)
            .collect()
    }

    fn closed_loop_rate(&self, c: usize, p: f64) -> f64 {
        let pr = &self.params;
        pr.a[c] - pr.b[c] * pr.b[c] / pr.r[c] * p
    }

    fn integrate_mean_state(&self) -> Vec<Vec<f64>> {
        let d = self.params.dim();
        let h = self.step();
        let mut xs = vec![self.params.x0.clone()];
        let mut x = self.params.x0.clone();
        for j in 0..self.ode_steps {
            let t = self.times[j];
            let pm = self.p_at(t + 0.5 * h);
            for c in 0..d {
                let (r0, rm, r1) = (
                    self.closed_loop_rate(c, self.p[j][c]),
                    self.closed_loop_rate(c, pm[c]),
                    self.closed_loop_rate(c, self.p[j + 1][c]),
                );
                let k1 = r0 * x[c];
                let k2 = rm * (x[c] + 0.5 * h * k1);
                let k3 = rm * (x[c] + 0.5 * h * k2);
                let k4 = r1 * (x[c] + h * k3);
                x[c] += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            xs.push(x.clone());
        }
        xs
    }

    /// Optimal deterministic control `-(b / r) P(t) xbar(t)` at time `t`.
    pub fn open_loop_at(&self, t: f64) -> Vec<f64> {
        let (j, s) = self.locate(t);
        let h = self.step();
        let p = self.p_at(t);
        (0..self.params.dim())
            .map(|c| {
                let (x0, x1) = (self.mean_state[j][c], self.mean_state[j + 1][c]);
                let d0 = self.closed_loop_rate(c, self.p[j][c]) * x0;
                let d1 = self.closed_loop_rate(c, self.p[j + 1][c]) * x1;
                let xb = hermite(h, s, x0, x1, d0, d1).0;
                -self.params.b[c] / self.params.r[c] * p[c] * xb
            })
            .collect()
    }

    /// Cell averages of the optimal deterministic control on `grid`, projected
    /// into `U`.
    pub fn open_loop_control(&self, grid: &TimeGrid) -> Result<ControlProcess> {
        self.check_grid(grid)?;
        const SUB: usize = 32;
        let values = (0..grid.steps())
            .map(|i| {
                let (t0, t1) = (grid.time(i), grid.time(i + 1));
                let hs = (t1 - t0) / SUB as f64;
                let mut acc = vec![0.0; self.params.dim()];
                for s in 0..=SUB {
                    let w = if s == 0 || s == SUB {
                        1.0
                    } else if s % 2 == 1 {
                        4.0
                    } else {
                        2.0
                    };
                    for (a, v) in acc.iter_mut().zip(self.open_loop_at(t0 + s as f64 * hs)) {
                        *a += w * v;
                    }
                }
                acc.iter().map(|a| a * hs / 3.0 / (t1 - t0)).collect()
            })
            .collect();
        ControlProcess::projected(*grid, values, &self.params.control_set)
    }

    /// State feedback `u_i = proj_U(-(b / r) P(t_i) x)`.
    pub fn feedback_policy(&self, grid: &TimeGrid) -> Result<LinearFeedback> {
        self.check_grid(grid)?;
        let d = self.params.dim();
        let mut gains = Vec::with_capacity(grid.steps() * d * d);
        for i in 0..grid.steps() {
            let g = self.gain_at(grid.time(i));
            for r in 0..d {
                for c in 0..d {
                    gains.push(if r == c { g[c] } else { 0.0 });
                }
            }
        }
        LinearFeedback::new(
            *grid,
            d,
            gains,
            vec![0.0; grid.steps() * d],
            self.params.control_set.clone(),
        )
    }

    pub fn control_set(&self) -> &ControlSet {
        &self.params.control_set
    }

    fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if (grid.horizon() - self.params.horizon).abs() > 1e-12 * self.params.horizon {
            return Err(Error::GridMismatch(format!(
                "grid horizon {} differs from the LQ horizon {}",
                grid.horizon(),
                self.params.horizon
            )));
        }
        Ok(())
    }
}
