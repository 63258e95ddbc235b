use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::paths::TimeGrid;

/// Slack allowed when checking membership of stored control values.
pub const MEMBERSHIP_TOL: f64 = 1e-12;

/// Convex compact control set `U`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlSet {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

impl ControlSet {
    pub fn new_box(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(invalid("box bounds must be non-empty and of equal length"));
        }
        if lower
            .iter()
            .zip(&upper)
            .any(|(l, u)| !(l.is_finite() && u.is_finite() && l <= u))
        {
            return Err(invalid("box needs finite bounds with lower <= upper"));
        }
        Ok(ControlSet::Box { lower, upper })
    }

    pub fn interval(lower: f64, upper: f64) -> Result<Self> {
        Self::new_box(vec![lower], vec![upper])
    }

    pub fn new_ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        if center.is_empty() || center.iter().any(|c| !c.is_finite()) {
            return Err(invalid("ball center must be non-empty and finite"));
        }
        if !(radius.is_finite() && radius > 0.0) {
            return Err(invalid(format!("ball radius must be positive, got {radius}")));
        }
        Ok(ControlSet::Ball { center, radius })
    }

    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Box { lower, .. } => lower.len(),
            ControlSet::Ball { center, .. } => center.len(),
        }
    }

    /// Box midpoint or ball center.
    pub fn center(&self) -> Vec<f64> {
        match self {
            ControlSet::Box { lower, upper } => {
                lower.iter().zip(upper).map(|(l, u)| 0.5 * (l + u)).collect()
            }
            ControlSet::Ball { center, .. } => center.clone(),
        }
    }

    pub fn contains(&self, v: &[f64], tol: f64) -> bool {
        if v.len() != self.dim() || v.iter().any(|x| !x.is_finite()) {
            return false;
        }
        match self {
            ControlSet::Box { lower, upper } => v
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(x, (l, u))| *x >= l - tol && *x <= u + tol),
            ControlSet::Ball { center, radius } => {
                let d2: f64 = v.iter().zip(center).map(|(a, c)| (a - c).powi(2)).sum();
                d2.sqrt() <= radius + tol
            }
        }
    }

    /// Euclidean projection, in place.
    pub fn project_in_place(&self, v: &mut [f64]) {
        match self {
            ControlSet::Box { lower, upper } => {
                for ((x, l), u) in v.iter_mut().zip(lower).zip(upper) {
                    *x = x.clamp(*l, *u);
                }
            }
            ControlSet::Ball { center, radius } => {
                let d2: f64 = v.iter().zip(center).map(|(a, c)| (a - c).powi(2)).sum();
                let d = d2.sqrt();
                if d > *radius {
                    let s = radius / d;
                    for (x, c) in v.iter_mut().zip(center) {
                        *x = c + s * (*x - c);
                    }
                }
            }
        }
    }

    pub fn project(&self, point: &[f64]) -> Vec<f64> {
        let mut v = point.to_vec();
        self.project_in_place(&mut v);
        v
    }

    /// `argmin_{v in U} <g, v>`, ties resolved towards the center.
    pub fn linear_minimize(&self, g: &[f64]) -> Vec<f64> {
        match self {
            ControlSet::Box { lower, upper } => g
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(gi, (l, u))| {
                    if *gi > 0.0 {
                        *l
                    } else if *gi < 0.0 {
                        *u
                    } else {
                        0.5 * (l + u)
                    }
                })
                .collect(),
            ControlSet::Ball { center, radius } => {
                let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return center.clone();
                }
                center
                    .iter()
                    .zip(g)
                    .map(|(c, gi)| c - radius * gi / norm)
                    .collect()
            }
        }
    }

    /// Uniform draw from `U`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            ControlSet::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(l, u)| if l == u { *l } else { rng.random_range(*l..=*u) })
                .collect(),
            ControlSet::Ball { center, radius } => {
                let k = center.len();
                let dir: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
                let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                let r = radius * rng.random::<f64>().powf(1.0 / k as f64);
                center
                    .iter()
                    .zip(&dir)
                    .map(|(c, d)| c + r * d / norm)
                    .collect()
            }
        }
    }
}

pub fn project_onto_u(point: &[f64], set: &ControlSet) -> Vec<f64> {
    set.project(point)
}

pub fn linear_minimize_over_u(g: &[f64], set: &ControlSet) -> Vec<f64> {
    set.linear_minimize(g)
}

/// Deterministic piecewise-constant control: one value in `U` per time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlProcess {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl ControlProcess {
    pub fn new(grid: TimeGrid, values: Vec<Vec<f64>>, set: &ControlSet) -> Result<Self> {
        if values.len() != grid.steps() {
            return Err(invalid(format!(
                "control has {} values for {} steps",
                values.len(),
                grid.steps()
            )));
        }
        let dim = set.dim();
        let mut flat = Vec::with_capacity(dim * values.len());
        for (i, v) in values.iter().enumerate() {
            if !set.contains(v, MEMBERSHIP_TOL) {
                return Err(invalid(format!("control value {v:?} at step {i} is outside U")));
            }
            flat.extend_from_slice(v);
        }
        Ok(Self { grid, dim, values: flat })
    }

    pub fn constant(grid: TimeGrid, value: &[f64], set: &ControlSet) -> Result<Self> {
        Self::new(grid, vec![value.to_vec(); grid.steps()], set)
    }

    /// Projects arbitrary values into `U` step by step.
    pub fn projected(grid: TimeGrid, values: Vec<Vec<f64>>, set: &ControlSet) -> Result<Self> {
        let values = values
            .into_iter()
            .map(|v| {
                if v.len() != set.dim() || v.iter().any(|x| !x.is_finite()) {
                    Err(invalid("control values must be finite and match dim(U)"))
                } else {
                    Ok(set.project(&v))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(grid, values, set)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    #[inline]
    pub fn value(&self, step: usize) -> &[f64] {
        &self.values[step * self.dim..(step + 1) * self.dim]
    }

    pub fn values(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }

    /// `self + s * (other - self)`, which stays in `U` by convexity.
    pub fn blend(&self, other: &ControlProcess, s: f64) -> ControlProcess {
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + s * (b - a))
            .collect();
        ControlProcess {
            grid: self.grid,
            dim: self.dim,
            values,
        }
    }

    pub fn is_admissible(&self, set: &ControlSet) -> bool {
        set.dim() == self.dim
            && self
                .values
                .chunks(self.dim)
                .all(|v| set.contains(v, MEMBERSHIP_TOL))
    }
}

/// Anything that produces a control value at each step. Open-loop controls
/// ignore the state; feedback laws are available for oracle comparisons.
pub trait ControlPolicy: Sync {
    fn control_dim(&self) -> usize;
    fn grid(&self) -> &TimeGrid;
    fn evaluate(&self, step: usize, x: &[f64], out: &mut [f64]);

    fn as_open_loop(&self) -> Option<&ControlProcess> {
        None
    }
}

impl ControlPolicy for ControlProcess {
    fn control_dim(&self) -> usize {
        self.dim
    }

    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn evaluate(&self, step: usize, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.value(step));
    }

    fn as_open_loop(&self) -> Option<&ControlProcess> {
        Some(self)
    }
}

/// `u_i = proj_U(K_i x + c_i)` with per-step gain `K_i` (k x n, row-major).
///
/// Not adapted to the observation filtration; used to check the adjoint solver
/// against closed-form feedback solutions.
#[derive(Clone, Debug)]
pub struct LinearFeedback {
    grid: TimeGrid,
    control_dim: usize,
    state_dim: usize,
    gains: Vec<f64>,
    offsets: Vec<f64>,
    set: ControlSet,
}

impl LinearFeedback {
    pub fn new(
        grid: TimeGrid,
        state_dim: usize,
        gains: Vec<f64>,
        offsets: Vec<f64>,
        set: ControlSet,
    ) -> Result<Self> {
        let k = set.dim();
        if gains.len() != grid.steps() * k * state_dim || offsets.len() != grid.steps() * k {
            return Err(invalid("feedback gain/offset sizes do not match the grid"));
        }
        Ok(Self {
            grid,
            control_dim: k,
            state_dim,
            gains,
            offsets,
            set,
        })
    }
}

impl ControlPolicy for LinearFeedback {
    fn control_dim(&self) -> usize {
        self.control_dim
    }

    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn evaluate(&self, step: usize, x: &[f64], out: &mut [f64]) {
        let (k, n) = (self.control_dim, self.state_dim);
        let gain = &self.gains[step * k * n..(step + 1) * k * n];
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.offsets[step * k + r]
                + gain[r * n..(r + 1) * n]
                    .iter()
                    .zip(x)
                    .map(|(g, xi)| g * xi)
                    .sum::<f64>();
        }
        self.set.project_in_place(out);
    }
}

/// `d(u, v) = (sum_i |u_i - v_i|^2 dt)^(1/2)`.
pub fn control_distance(u: &ControlProcess, v: &ControlProcess) -> Result<f64> {
    if u.grid != v.grid || u.dim != v.dim {
        return Err(crate::error::Error::GridMismatch(
            "controls live on different grids".into(),
        ));
    }
    let dt = u.grid.dt();
    let sq: f64 = u
        .values
        .iter()
        .zip(&v.values)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok((sq * dt).sqrt())
}
