use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Coefficients, ControlSet, Dims, Point, ProblemSpec, Structure};
use crate::error::{invalid, Result};

/// Diagonal linear-quadratic family.
///
/// Per coordinate `c`: `b_c = a_c x_c + b_c u_c`, `sigma1_c = sigma_c`,
/// `sigma2_c = sigma2_c` (constant), `h = observation` (constant), `f = 0`,
/// `phi(x) = x`, `l = 1/2 sum(q x^2 + r u^2)`, `Phi = 1/2 sum(g x^2)`, `gamma = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqParams {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub sigma: Vec<f64>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub g: Vec<f64>,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub observation: f64,
    pub sigma2: Vec<f64>,
    pub control_set: ControlSet,
}

impl Default for LqParams {
    fn default() -> Self {
        Self {
            a: vec![0.0],
            b: vec![1.0],
            sigma: vec![1.0],
            q: vec![0.0],
            r: vec![1.0],
            g: vec![1.0],
            horizon: 1.0,
            x0: vec![1.0],
            observation: 0.0,
            sigma2: vec![0.0],
            control_set: ControlSet::interval(-2.0, 2.0).expect("static bounds"),
        }
    }
}

impl LqParams {
    pub fn dim(&self) -> usize {
        self.a.len()
    }

    /// `h = 0` and `sigma2 = 0`: the observation carries no information and the
    /// classical Riccati solution applies.
    pub fn is_degenerate(&self) -> bool {
        self.observation == 0.0 && self.sigma2.iter().all(|s| *s == 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 {
            return Err(invalid("LQ dimension must be positive"));
        }
        let vecs = [
            ("b", &self.b),
            ("sigma", &self.sigma),
            ("q", &self.q),
            ("r", &self.r),
            ("g", &self.g),
            ("x0", &self.x0),
            ("sigma2", &self.sigma2),
        ];
        for (name, v) in vecs {
            if v.len() != d {
                return Err(invalid(format!("LQ parameter {name} has length {}, expected {d}", v.len())));
            }
        }
        let scalars = [self.horizon, self.observation];
        let mut all = self
            .a
            .iter()
            .chain(vecs.iter().flat_map(|(_, v)| v.iter()))
            .chain(scalars.iter());
        if all.any(|v| !v.is_finite()) {
            return Err(invalid("LQ parameters must be finite"));
        }
        if self.r.iter().any(|r| *r <= 0.0) {
            return Err(invalid("LQ control cost r must be positive"));
        }
        if self.q.iter().chain(&self.g).any(|v| *v < 0.0) {
            return Err(invalid("LQ state costs q and g must be non-negative"));
        }
        if self.control_set.dim() != d {
            return Err(invalid("LQ control set dimension must match the state dimension"));
        }
        Ok(())
    }
}

struct LqCoefficients {
    p: LqParams,
}

impl Coefficients for LqCoefficients {
    fn drift(&self, _t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        for c in 0..out.len() {
            out[c] = self.p.a[c] * x[c] + self.p.b[c] * u[c];
        }
    }
    fn drift_partials(&self, _t: f64, _x: &[f64], _u: &[f64], bx: &mut [f64], bu: &mut [f64]) {
        let d = self.p.dim();
        bx.fill(0.0);
        bu.fill(0.0);
        for c in 0..d {
            bx[c * d + c] = self.p.a[c];
            bu[c * d + c] = self.p.b[c];
        }
    }
    fn sigma1(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.p.sigma);
    }
    fn sigma1_partials(&self, _t: f64, _x: &[f64], _u: &[f64], sx: &mut [f64], su: &mut [f64]) {
        sx.fill(0.0);
        su.fill(0.0);
    }
    fn sigma2(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.p.sigma2);
    }
    fn sigma2_partials(&self, _t: f64, _x: &[f64], _u: &[f64], sx: &mut [f64], su: &mut [f64]) {
        sx.fill(0.0);
        su.fill(0.0);
    }
    fn driver(&self, _p: &Point<'_>, out: &mut [f64]) {
        out.fill(0.0);
    }
    fn driver_partials(
        &self,
        _p: &Point<'_>,
        fx: &mut [f64],
        fy: &mut [f64],
        fz1: &mut [f64],
        fz2: &mut [f64],
        fu: &mut [f64],
    ) {
        for buf in [fx, fy, fz1, fz2, fu] {
            buf.fill(0.0);
        }
    }
    fn observation(&self, _t: f64, _x: &[f64], _u: &[f64]) -> f64 {
        self.p.observation
    }
    fn observation_partials(&self, _t: f64, _x: &[f64], _u: &[f64], hx: &mut [f64], hu: &mut [f64]) {
        hx.fill(0.0);
        hu.fill(0.0);
    }
    fn terminal_map(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }
    fn terminal_map_jacobian(&self, _x: &[f64], out: &mut [f64]) {
        let d = self.p.dim();
        out.fill(0.0);
        for c in 0..d {
            out[c * d + c] = 1.0;
        }
    }
    fn running_cost(&self, p: &Point<'_>) -> f64 {
        let mut s = 0.0;
        for c in 0..self.p.dim() {
            s += self.p.q[c] * p.x[c] * p.x[c] + self.p.r[c] * p.u[c] * p.u[c];
        }
        0.5 * s
    }
    fn running_cost_partials(
        &self,
        p: &Point<'_>,
        lx: &mut [f64],
        ly: &mut [f64],
        lz1: &mut [f64],
        lz2: &mut [f64],
        lu: &mut [f64],
    ) {
        for c in 0..self.p.dim() {
            lx[c] = self.p.q[c] * p.x[c];
            lu[c] = self.p.r[c] * p.u[c];
        }
        ly.fill(0.0);
        lz1.fill(0.0);
        lz2.fill(0.0);
    }
    fn terminal_cost(&self, x: &[f64]) -> f64 {
        0.5 * x.iter().zip(&self.p.g).map(|(xi, g)| g * xi * xi).sum::<f64>()
    }
    fn terminal_cost_gradient(&self, x: &[f64], out: &mut [f64]) {
        for c in 0..out.len() {
            out[c] = self.p.g[c] * x[c];
        }
    }
    fn initial_cost(&self, _y: &[f64]) -> f64 {
        0.0
    }
    fn initial_cost_gradient(&self, _y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

/// Builds the LQ instance; `r <= 0` is rejected.
pub fn make_lq_instance(params: &LqParams) -> Result<ProblemSpec> {
    params.validate()?;
    let d = params.dim();
    let bound = params
        .sigma2
        .iter()
        .fold(params.observation.abs(), |acc, s| acc.max(s.abs()));
    let name = if params.is_degenerate() { "lq" } else { "lq_observed" };
    Ok(ProblemSpec::new(
        name,
        Dims { n: d, m: d, k: d },
        params.horizon,
        params.x0.clone(),
        params.control_set.clone(),
        Arc::new(LqCoefficients { p: params.clone() }),
    )?
    .with_bound(bound)
    .with_structure(Structure {
        control_free_observation: true,
        linear_terminal_map: true,
    }))
}
