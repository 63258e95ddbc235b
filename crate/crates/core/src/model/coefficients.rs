use std::sync::Arc;

/// Problem dimensions: state `n`, backward state `m`, control `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub k: usize,
}

impl Dims {
    pub fn scalar() -> Self {
        Dims { n: 1, m: 1, k: 1 }
    }
}

/// Arguments of the coefficients that see the full state `(t, x, y, z1, z2, u)`.
#[derive(Clone, Copy, Debug)]
pub struct Point<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub z1: &'a [f64],
    pub z2: &'a [f64],
    pub u: &'a [f64],
}

/// Coefficient maps of the controlled forward-backward system and its cost,
/// together with their first partial derivatives.
///
/// Values are written into caller-provided buffers. Jacobians are row-major
/// with one row per output component, e.g. `b_x[i * n + j] = d b_i / d x_j`.
/// Implementations must be pure.
pub trait Coefficients: Send + Sync {
    /// `b(t, x, u)`, length `n`.
    fn drift(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    /// `b_x` (n x n) and `b_u` (n x k).
    fn drift_partials(&self, t: f64, x: &[f64], u: &[f64], bx: &mut [f64], bu: &mut [f64]);

    /// Coefficient of `dW`, length `n`.
    fn sigma1(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    fn sigma1_partials(&self, t: f64, x: &[f64], u: &[f64], sx: &mut [f64], su: &mut [f64]);

    /// Coefficient of the observation noise, length `n`.
    fn sigma2(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);
    fn sigma2_partials(&self, t: f64, x: &[f64], u: &[f64], sx: &mut [f64], su: &mut [f64]);

    /// Generator `f(t, x, y, z1, z2, u)` of the backward equation, length `m`.
    fn driver(&self, p: &Point<'_>, out: &mut [f64]);
    /// `f_x` (m x n), `f_y`, `f_z1`, `f_z2` (m x m), `f_u` (m x k).
    fn driver_partials(
        &self,
        p: &Point<'_>,
        fx: &mut [f64],
        fy: &mut [f64],
        fz1: &mut [f64],
        fz2: &mut [f64],
        fu: &mut [f64],
    );

    /// Observation drift `h(t, x, u)`.
    fn observation(&self, t: f64, x: &[f64], u: &[f64]) -> f64;
    /// `h_x` (n) and `h_u` (k).
    fn observation_partials(&self, t: f64, x: &[f64], u: &[f64], hx: &mut [f64], hu: &mut [f64]);

    /// Terminal condition `phi(x)` of the backward equation, length `m`.
    fn terminal_map(&self, x: &[f64], out: &mut [f64]);
    /// `phi_x` (m x n).
    fn terminal_map_jacobian(&self, x: &[f64], out: &mut [f64]);

    /// Running cost `l`.
    fn running_cost(&self, p: &Point<'_>) -> f64;
    fn running_cost_partials(
        &self,
        p: &Point<'_>,
        lx: &mut [f64],
        ly: &mut [f64],
        lz1: &mut [f64],
        lz2: &mut [f64],
        lu: &mut [f64],
    );

    /// Terminal cost `Phi(x)`.
    fn terminal_cost(&self, x: &[f64]) -> f64;
    fn terminal_cost_gradient(&self, x: &[f64], out: &mut [f64]);

    /// Initial cost `gamma(y)`.
    fn initial_cost(&self, y: &[f64]) -> f64;
    fn initial_cost_gradient(&self, y: &[f64], out: &mut [f64]);
}

pub type Fn1 = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type Fn3 = Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>;
pub type Fn6 = Arc<dyn Fn(f64, f64, f64, f64, f64, f64) -> f64 + Send + Sync>;

/// Scalar map of `(t, x, u)` with its two partials.
#[derive(Clone)]
pub struct Map3 {
    pub value: Fn3,
    pub dx: Fn3,
    pub du: Fn3,
}

impl Map3 {
    pub fn new(
        value: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        dx: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        du: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            value: Arc::new(value),
            dx: Arc::new(dx),
            du: Arc::new(du),
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(move |_, _, _| c, |_, _, _| 0.0, |_, _, _| 0.0)
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }
}

/// Scalar map of `(t, x, y, z1, z2, u)` with its five partials.
#[derive(Clone)]
pub struct Map6 {
    pub value: Fn6,
    pub dx: Fn6,
    pub dy: Fn6,
    pub dz1: Fn6,
    pub dz2: Fn6,
    pub du: Fn6,
}

impl Map6 {
    pub fn new(
        value: impl Fn(f64, f64, f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
        dx: impl Fn(f64, f64, f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
        dy: impl Fn(f64, f64, f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
        dz1: impl Fn(f64, f64, f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
        dz2: impl Fn(f64, f64, f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
        du: impl Fn(f64, f64, f64, f64, f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            value: Arc::new(value),
            dx: Arc::new(dx),
            dy: Arc::new(dy),
            dz1: Arc::new(dz1),
            dz2: Arc::new(dz2),
            du: Arc::new(du),
        }
    }

    pub fn zero() -> Self {
        let z: Fn6 = Arc::new(|_, _, _, _, _, _| 0.0);
        Self {
            value: z.clone(),
            dx: z.clone(),
            dy: z.clone(),
            dz1: z.clone(),
            dz2: z.clone(),
            du: z,
        }
    }
}

/// Scalar map of one variable with its derivative.
#[derive(Clone)]
pub struct Map1 {
    pub value: Fn1,
    pub d: Fn1,
}

impl Map1 {
    pub fn new(
        value: impl Fn(f64) -> f64 + Send + Sync + 'static,
        d: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            value: Arc::new(value),
            d: Arc::new(d),
        }
    }

    pub fn zero() -> Self {
        Self::new(|_| 0.0, |_| 0.0)
    }

    pub fn identity() -> Self {
        Self::new(|x| x, |_| 1.0)
    }
}

/// Closure-backed coefficients for `n = m = k = 1`. Every map defaults to zero
/// except `phi`, which defaults to the identity.
#[derive(Clone)]
pub struct ScalarCoefficients {
    pub b: Map3,
    pub sigma1: Map3,
    pub sigma2: Map3,
    pub h: Map3,
    pub f: Map6,
    pub l: Map6,
    pub phi: Map1,
    pub terminal: Map1,
    pub gamma: Map1,
}

impl Default for ScalarCoefficients {
    fn default() -> Self {
        Self {
            b: Map3::zero(),
            sigma1: Map3::zero(),
            sigma2: Map3::zero(),
            h: Map3::zero(),
            f: Map6::zero(),
            l: Map6::zero(),
            phi: Map1::identity(),
            terminal: Map1::zero(),
            gamma: Map1::zero(),
        }
    }
}

impl ScalarCoefficients {
    pub fn with_drift(mut self, m: Map3) -> Self {
        self.b = m;
        self
    }
    pub fn with_sigma1(mut self, m: Map3) -> Self {
        self.sigma1 = m;
        self
    }
    pub fn with_sigma2(mut self, m: Map3) -> Self {
        self.sigma2 = m;
        self
    }
    pub fn with_observation(mut self, m: Map3) -> Self {
        self.h = m;
        self
    }
    pub fn with_driver(mut self, m: Map6) -> Self {
        self.f = m;
        self
    }
    pub fn with_running_cost(mut self, m: Map6) -> Self {
        self.l = m;
        self
    }
    pub fn with_terminal_map(mut self, m: Map1) -> Self {
        self.phi = m;
        self
    }
    pub fn with_terminal_cost(mut self, m: Map1) -> Self {
        self.terminal = m;
        self
    }
    pub fn with_initial_cost(mut self, m: Map1) -> Self {
        self.gamma = m;
        self
    }
}

#[inline]
fn eval6(f: &Fn6, p: &Point<'_>) -> f64 {
    f(p.t, p.x[0], p.y[0], p.z1[0], p.z2[0], p.u[0])
}

impl Coefficients for ScalarCoefficients {
    fn drift(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = (self.b.value)(t, x[0], u[0]);
    }
    fn drift_partials(&self, t: f64, x: &[f64], u: &[f64], bx: &mut [f64], bu: &mut [f64]) {
        bx[0] = (self.b.dx)(t, x[0], u[0]);
        bu[0] = (self.b.du)(t, x[0], u[0]);
    }
    fn sigma1(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = (self.sigma1.value)(t, x[0], u[0]);
    }
    fn sigma1_partials(&self, t: f64, x: &[f64], u: &[f64], sx: &mut [f64], su: &mut [f64]) {
        sx[0] = (self.sigma1.dx)(t, x[0], u[0]);
        su[0] = (self.sigma1.du)(t, x[0], u[0]);
    }
    fn sigma2(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = (self.sigma2.value)(t, x[0], u[0]);
    }
    fn sigma2_partials(&self, t: f64, x: &[f64], u: &[f64], sx: &mut [f64], su: &mut [f64]) {
        sx[0] = (self.sigma2.dx)(t, x[0], u[0]);
        su[0] = (self.sigma2.du)(t, x[0], u[0]);
    }
    fn driver(&self, p: &Point<'_>, out: &mut [f64]) {
        out[0] = eval6(&self.f.value, p);
    }
    fn driver_partials(
        &self,
        p: &Point<'_>,
        fx: &mut [f64],
        fy: &mut [f64],
        fz1: &mut [f64],
        fz2: &mut [f64],
        fu: &mut [f64],
    ) {
        fx[0] = eval6(&self.f.dx, p);
        fy[0] = eval6(&self.f.dy, p);
        fz1[0] = eval6(&self.f.dz1, p);
        fz2[0] = eval6(&self.f.dz2, p);
        fu[0] = eval6(&self.f.du, p);
    }
    fn observation(&self, t: f64, x: &[f64], u: &[f64]) -> f64 {
        (self.h.value)(t, x[0], u[0])
    }
    fn observation_partials(&self, t: f64, x: &[f64], u: &[f64], hx: &mut [f64], hu: &mut [f64]) {
        hx[0] = (self.h.dx)(t, x[0], u[0]);
        hu[0] = (self.h.du)(t, x[0], u[0]);
    }
    fn terminal_map(&self, x: &[f64], out: &mut [f64]) {
        out[0] = (self.phi.value)(x[0]);
    }
    fn terminal_map_jacobian(&self, x: &[f64], out: &mut [f64]) {
        out[0] = (self.phi.d)(x[0]);
    }
    fn running_cost(&self, p: &Point<'_>) -> f64 {
        eval6(&self.l.value, p)
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
        lx[0] = eval6(&self.l.dx, p);
        ly[0] = eval6(&self.l.dy, p);
        lz1[0] = eval6(&self.l.dz1, p);
        lz2[0] = eval6(&self.l.dz2, p);
        lu[0] = eval6(&self.l.du, p);
    }
    fn terminal_cost(&self, x: &[f64]) -> f64 {
        (self.terminal.value)(x[0])
    }
    fn terminal_cost_gradient(&self, x: &[f64], out: &mut [f64]) {
        out[0] = (self.terminal.d)(x[0]);
    }
    fn initial_cost(&self, y: &[f64]) -> f64 {
        (self.gamma.value)(y[0])
    }
    fn initial_cost_gradient(&self, y: &[f64], out: &mut [f64]) {
        out[0] = (self.gamma.d)(y[0]);
    }
}
