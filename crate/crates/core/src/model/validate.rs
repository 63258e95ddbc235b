//! Finite-difference audit of the declared partial derivatives.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Coefficients, Dims, Point, ProblemSpec};
use crate::error::{invalid, Result};

const FD_STEP: f64 = 1e-5;

/// Names of the coefficient maps, as they appear in reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientName {
    DriftB,
    DiffusionSigma1,
    DiffusionSigma2,
    BackwardF,
    ObservationH,
    TerminalPhi,
    RunningL,
    #[serde(rename = "terminal_Phi")]
    TerminalCost,
    InitialGamma,
}

impl CoefficientName {
    pub const ALL: [CoefficientName; 9] = [
        CoefficientName::DriftB,
        CoefficientName::DiffusionSigma1,
        CoefficientName::DiffusionSigma2,
        CoefficientName::BackwardF,
        CoefficientName::ObservationH,
        CoefficientName::TerminalPhi,
        CoefficientName::RunningL,
        CoefficientName::TerminalCost,
        CoefficientName::InitialGamma,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CoefficientName::DriftB => "drift_b",
            CoefficientName::DiffusionSigma1 => "diffusion_sigma1",
            CoefficientName::DiffusionSigma2 => "diffusion_sigma2",
            CoefficientName::BackwardF => "backward_f",
            CoefficientName::ObservationH => "observation_h",
            CoefficientName::TerminalPhi => "terminal_phi",
            CoefficientName::RunningL => "running_l",
            CoefficientName::TerminalCost => "terminal_Phi",
            CoefficientName::InitialGamma => "initial_gamma",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for CoefficientName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Var {
    X,
    Y,
    Z1,
    Z2,
    U,
}

impl Var {
    fn name(self) -> &'static str {
        match self {
            Var::X => "x",
            Var::Y => "y",
            Var::Z1 => "z1",
            Var::Z2 => "z2",
            Var::U => "u",
        }
    }
}

/// A sampled argument `(t, x, y, z1, z2, u)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub u: Vec<f64>,
}

impl SamplePoint {
    fn point(&self) -> Point<'_> {
        Point {
            t: self.t,
            x: &self.x,
            y: &self.y,
            z1: &self.z1,
            z2: &self.z2,
            u: &self.u,
        }
    }

    fn var_mut(&mut self, v: Var) -> &mut Vec<f64> {
        match v {
            Var::X => &mut self.x,
            Var::Y => &mut self.y,
            Var::Z1 => &mut self.z1,
            Var::Z2 => &mut self.z2,
            Var::U => &mut self.u,
        }
    }
}

/// Worst scaled discrepancy `|D - FD| / (1 + |D|)` of one partial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartialCheck {
    pub coefficient: CoefficientName,
    pub partial: String,
    pub max_discrepancy: f64,
    pub worst_point: Option<SamplePoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    NonFinite,
    Discrepancy,
    Bound,
    Structure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationFailure {
    pub coefficient: CoefficientName,
    pub kind: FailureKind,
    pub message: String,
    pub point: SamplePoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub instance: String,
    pub passed: bool,
    pub samples: usize,
    pub tol: f64,
    pub max_discrepancy: f64,
    pub checks: Vec<PartialCheck>,
    pub failures: Vec<ValidationFailure>,
}

impl ValidationReport {
    /// Coefficients named by at least one failure, in first-seen order.
    pub fn failing_coefficients(&self) -> Vec<CoefficientName> {
        let mut out = Vec::new();
        for f in &self.failures {
            if !out.contains(&f.coefficient) {
                out.push(f.coefficient);
            }
        }
        out
    }
}

/// Value and declared partials of one coefficient, flattened.
struct Eval {
    value: Vec<f64>,
    partials: Vec<(Var, Vec<f64>)>,
}

fn evaluate(c: &dyn Coefficients, d: Dims, name: CoefficientName, s: &SamplePoint) -> Eval {
    let (n, m, k) = (d.n, d.m, d.k);
    let (t, x, u) = (s.t, s.x.as_slice(), s.u.as_slice());
    let mut value;
    let partials;
    match name {
        CoefficientName::DriftB | CoefficientName::DiffusionSigma1 | CoefficientName::DiffusionSigma2 => {
            value = vec![0.0; n];
            let mut jx = vec![0.0; n * n];
            let mut ju = vec![0.0; n * k];
            match name {
                CoefficientName::DriftB => {
                    c.drift(t, x, u, &mut value);
                    c.drift_partials(t, x, u, &mut jx, &mut ju);
                }
                CoefficientName::DiffusionSigma1 => {
                    c.sigma1(t, x, u, &mut value);
                    c.sigma1_partials(t, x, u, &mut jx, &mut ju);
                }
                _ => {
                    c.sigma2(t, x, u, &mut value);
                    c.sigma2_partials(t, x, u, &mut jx, &mut ju);
                }
            }
            partials = vec![(Var::X, jx), (Var::U, ju)];
        }
        CoefficientName::ObservationH => {
            value = vec![c.observation(t, x, u)];
            let mut hx = vec![0.0; n];
            let mut hu = vec![0.0; k];
            c.observation_partials(t, x, u, &mut hx, &mut hu);
            partials = vec![(Var::X, hx), (Var::U, hu)];
        }
        CoefficientName::BackwardF => {
            value = vec![0.0; m];
            let p = s.point();
            c.driver(&p, &mut value);
            let mut fx = vec![0.0; m * n];
            let mut fy = vec![0.0; m * m];
            let mut fz1 = vec![0.0; m * m];
            let mut fz2 = vec![0.0; m * m];
            let mut fu = vec![0.0; m * k];
            c.driver_partials(&p, &mut fx, &mut fy, &mut fz1, &mut fz2, &mut fu);
            partials = vec![(Var::X, fx), (Var::Y, fy), (Var::Z1, fz1), (Var::Z2, fz2), (Var::U, fu)];
        }
        CoefficientName::RunningL => {
            let p = s.point();
            value = vec![c.running_cost(&p)];
            let mut lx = vec![0.0; n];
            let mut ly = vec![0.0; m];
            let mut lz1 = vec![0.0; m];
            let mut lz2 = vec![0.0; m];
            let mut lu = vec![0.0; k];
            c.running_cost_partials(&p, &mut lx, &mut ly, &mut lz1, &mut lz2, &mut lu);
            partials = vec![(Var::X, lx), (Var::Y, ly), (Var::Z1, lz1), (Var::Z2, lz2), (Var::U, lu)];
        }
        CoefficientName::TerminalPhi => {
            value = vec![0.0; m];
            c.terminal_map(x, &mut value);
            let mut j = vec![0.0; m * n];
            c.terminal_map_jacobian(x, &mut j);
            partials = vec![(Var::X, j)];
        }
        CoefficientName::TerminalCost => {
            value = vec![c.terminal_cost(x)];
            let mut gx = vec![0.0; n];
            c.terminal_cost_gradient(x, &mut gx);
            partials = vec![(Var::X, gx)];
        }
        CoefficientName::InitialGamma => {
            value = vec![c.initial_cost(&s.y)];
            let mut gy = vec![0.0; m];
            c.initial_cost_gradient(&s.y, &mut gy);
            partials = vec![(Var::Y, gy)];
        }
    }
    Eval { value, partials }
}

fn sample_points(spec: &ProblemSpec, samples: usize, seed: u64) -> Vec<SamplePoint> {
    let d = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::with_capacity(samples + 2);
    // Anchors: the origin and the initial state, both at t = 0 and the set center.
    pts.push(SamplePoint {
        t: 0.0,
        x: vec![0.0; d.n],
        y: vec![0.0; d.m],
        z1: vec![0.0; d.m],
        z2: vec![0.0; d.m],
        u: spec.control_set.center(),
    });
    pts.push(SamplePoint {
        x: spec.initial_x.clone(),
        ..pts[0].clone()
    });
    let draw = |len: usize, centre: Option<&[f64]>, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..len)
            .map(|i| centre.map_or(0.0, |c| c[i]) + rng.random_range(-2.0..2.0))
            .collect()
    };
    for _ in 0..samples {
        let t = rng.random_range(0.0..=spec.horizon);
        let x = draw(d.n, Some(&spec.initial_x), &mut rng);
        let y = draw(d.m, None, &mut rng);
        let z1 = draw(d.m, None, &mut rng);
        let z2 = draw(d.m, None, &mut rng);
        let u = spec.control_set.sample(&mut rng);
        pts.push(SamplePoint { t, x, y, z1, z2, u });
    }
    pts
}

fn dims_of(d: Dims, v: Var) -> usize {
    match v {
        Var::X => d.n,
        Var::U => d.k,
        _ => d.m,
    }
}

/// Checks every declared partial against central differences (step 1e-5) on
/// two anchor points and `samples` random points, plus the declared bound on
/// `sigma2` and `h` and the declared structure. Non-finite outputs are
/// reported as failures naming the coefficient.
pub fn validate_problem(spec: &ProblemSpec, samples: usize, seed: u64, tol: f64) -> Result<ValidationReport> {
    if samples == 0 {
        return Err(invalid("validation needs at least one sample"));
    }
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(invalid(format!("validation tolerance must be positive, got {tol}")));
    }
    let c = spec.coefficients();
    let d = spec.dims;
    let points = sample_points(spec, samples, seed);

    let mut checks: Vec<PartialCheck> = Vec::new();
    let mut failures: Vec<ValidationFailure> = Vec::new();
    let mut reported_nonfinite = Vec::new();

    for name in CoefficientName::ALL {
        let mut worst: Vec<(Var, f64, Option<SamplePoint>)> = Vec::new();
        let mut discrepancy_reported = false;
        'points: for s in &points {
            let base = evaluate(c, d, name, s);
            let finite = base.value.iter().chain(base.partials.iter().flat_map(|(_, v)| v.iter())).all(|v| v.is_finite());
            if !finite {
                if !reported_nonfinite.contains(&name) {
                    reported_nonfinite.push(name);
                    failures.push(ValidationFailure {
                        coefficient: name,
                        kind: FailureKind::NonFinite,
                        message: format!("{name} (or a declared partial) is not finite at t = {}, x = {:?}", s.t, s.x),
                        point: s.clone(),
                    });
                }
                continue;
            }
            if matches!(name, CoefficientName::DiffusionSigma2 | CoefficientName::ObservationH) {
                let mag = base.value.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                if mag > spec.bound * (1.0 + 1e-12) {
                    failures.push(ValidationFailure {
                        coefficient: name,
                        kind: FailureKind::Bound,
                        message: format!("|{name}| = {mag} exceeds the declared bound {}", spec.bound),
                        point: s.clone(),
                    });
                }
            }
            let out_dim = base.value.len();
            for (var, analytic) in &base.partials {
                let vd = dims_of(d, *var);
                let entry = match worst.iter_mut().position(|w| w.0 == *var) {
                    Some(i) => i,
                    None => {
                        worst.push((*var, 0.0, None));
                        worst.len() - 1
                    }
                };
                for j in 0..vd {
                    let mut plus = s.clone();
                    plus.var_mut(*var)[j] += FD_STEP;
                    let mut minus = s.clone();
                    minus.var_mut(*var)[j] -= FD_STEP;
                    let vp = evaluate(c, d, name, &plus).value;
                    let vm = evaluate(c, d, name, &minus).value;
                    for i in 0..out_dim {
                        let fd = (vp[i] - vm[i]) / (2.0 * FD_STEP);
                        let an = analytic[i * vd + j];
                        if !fd.is_finite() {
                            if !reported_nonfinite.contains(&name) {
                                reported_nonfinite.push(name);
                                failures.push(ValidationFailure {
                                    coefficient: name,
                                    kind: FailureKind::NonFinite,
                                    message: format!("{name} is not finite near t = {}, x = {:?}", s.t, s.x),
                                    point: s.clone(),
                                });
                            }
                            continue 'points;
                        }
                        let disc = (an - fd).abs() / (1.0 + an.abs());
                        if disc > worst[entry].1 {
                            worst[entry].1 = disc;
                            worst[entry].2 = Some(s.clone());
                        }
                        if disc > tol && !discrepancy_reported {
                            discrepancy_reported = true;
                            failures.push(ValidationFailure {
                                coefficient: name,
                                kind: FailureKind::Discrepancy,
                                message: format!(
                                    "d{name}/d{}[{i},{j}]: declared {an}, central difference {fd}",
                                    var.name()
                                ),
                                point: s.clone(),
                            });
                        }
                    }
                }
            }
        }
        for (var, max, pt) in worst {
            checks.push(PartialCheck {
                coefficient: name,
                partial: var.name().to_string(),
                max_discrepancy: max,
                worst_point: pt,
            });
        }
    }

    check_structure(spec, &points, tol, &mut failures);

    let max_discrepancy = checks.iter().fold(0.0f64, |a, ch| a.max(ch.max_discrepancy));
    Ok(ValidationReport {
        instance: spec.name.clone(),
        passed: failures.is_empty(),
        samples,
        tol,
        max_discrepancy,
        checks,
        failures,
    })
}

fn check_structure(spec: &ProblemSpec, points: &[SamplePoint], tol: f64, failures: &mut Vec<ValidationFailure>) {
    let c = spec.coefficients();
    let d = spec.dims;
    if spec.structure.control_free_observation {
        for s in points {
            let e = evaluate(c, d, CoefficientName::ObservationH, s);
            let dep = e.partials.iter().flat_map(|(_, v)| v.iter()).fold(0.0f64, |a, v| a.max(v.abs()));
            if dep > tol {
                failures.push(ValidationFailure {
                    coefficient: CoefficientName::ObservationH,
                    kind: FailureKind::Structure,
                    message: format!("declared control-free observation, but |h_x|, |h_u| reach {dep}"),
                    point: s.clone(),
                });
                break;
            }
        }
    }
    if spec.structure.linear_terminal_map {
        let origin = &points[0];
        let e0 = evaluate(c, d, CoefficientName::TerminalPhi, origin);
        let off = e0.value.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if off > tol {
            failures.push(ValidationFailure {
                coefficient: CoefficientName::TerminalPhi,
                kind: FailureKind::Structure,
                message: format!("declared linear terminal map, but |phi(0)| = {off}"),
                point: origin.clone(),
            });
        }
        for s in &points[1..] {
            let e = evaluate(c, d, CoefficientName::TerminalPhi, s);
            let diff = e.partials[0]
                .1
                .iter()
                .zip(&e0.partials[0].1)
                .fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
            if diff > tol {
                failures.push(ValidationFailure {
                    coefficient: CoefficientName::TerminalPhi,
                    kind: FailureKind::Structure,
                    message: format!("declared linear terminal map, but its Jacobian varies by {diff}"),
                    point: s.clone(),
                });
                break;
            }
        }
    }
}

/// Wraps the coefficients of `spec` so that every declared partial of
/// `target` is multiplied by `factor`. Values are untouched. Used to exercise
/// the validator with a known defect.
pub fn inject_partial_defect(spec: &ProblemSpec, target: CoefficientName, factor: f64) -> ProblemSpec {
    let inner = spec.coefficients.clone();
    spec.with_coefficients(Arc::new(Defect { inner, target, factor }))
}

struct Defect {
    inner: Arc<dyn Coefficients>,
    target: CoefficientName,
    factor: f64,
}

impl Defect {
    fn scale(&self, name: CoefficientName, bufs: &mut [&mut [f64]]) {
        if name == self.target {
            for b in bufs.iter_mut() {
                b.iter_mut().for_each(|v| *v *= self.factor);
            }
        }
    }
}

impl Coefficients for Defect {
    fn drift(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.inner.drift(t, x, u, out)
    }
    fn drift_partials(&self, t: f64, x: &[f64], u: &[f64], bx: &mut [f64], bu: &mut [f64]) {
        self.inner.drift_partials(t, x, u, bx, bu);
        self.scale(CoefficientName::DriftB, &mut [bx, bu]);
    }
    fn sigma1(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.inner.sigma1(t, x, u, out)
    }
    fn sigma1_partials(&self, t: f64, x: &[f64], u: &[f64], sx: &mut [f64], su: &mut [f64]) {
        self.inner.sigma1_partials(t, x, u, sx, su);
        self.scale(CoefficientName::DiffusionSigma1, &mut [sx, su]);
    }
    fn sigma2(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.inner.sigma2(t, x, u, out)
    }
    fn sigma2_partials(&self, t: f64, x: &[f64], u: &[f64], sx: &mut [f64], su: &mut [f64]) {
        self.inner.sigma2_partials(t, x, u, sx, su);
        self.scale(CoefficientName::DiffusionSigma2, &mut [sx, su]);
    }
    fn driver(&self, p: &Point<'_>, out: &mut [f64]) {
        self.inner.driver(p, out)
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
        self.inner.driver_partials(p, fx, fy, fz1, fz2, fu);
        self.scale(CoefficientName::BackwardF, &mut [fx, fy, fz1, fz2, fu]);
    }
    fn observation(&self, t: f64, x: &[f64], u: &[f64]) -> f64 {
        self.inner.observation(t, x, u)
    }
    fn observation_partials(&self, t: f64, x: &[f64], u: &[f64], hx: &mut [f64], hu: &mut [f64]) {
        self.inner.observation_partials(t, x, u, hx, hu);
        self.scale(CoefficientName::ObservationH, &mut [hx, hu]);
    }
    fn terminal_map(&self, x: &[f64], out: &mut [f64]) {
        self.inner.terminal_map(x, out)
    }
    fn terminal_map_jacobian(&self, x: &[f64], out: &mut [f64]) {
        self.inner.terminal_map_jacobian(x, out);
        self.scale(CoefficientName::TerminalPhi, &mut [out]);
    }
    fn running_cost(&self, p: &Point<'_>) -> f64 {
        self.inner.running_cost(p)
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
        self.inner.running_cost_partials(p, lx, ly, lz1, lz2, lu);
        self.scale(CoefficientName::RunningL, &mut [lx, ly, lz1, lz2, lu]);
    }
    fn terminal_cost(&self, x: &[f64]) -> f64 {
        self.inner.terminal_cost(x)
    }
    fn terminal_cost_gradient(&self, x: &[f64], out: &mut [f64]) {
        self.inner.terminal_cost_gradient(x, out);
        self.scale(CoefficientName::TerminalCost, &mut [out]);
    }
    fn initial_cost(&self, y: &[f64]) -> f64 {
        self.inner.initial_cost(y)
    }
    fn initial_cost_gradient(&self, y: &[f64], out: &mut [f64]) {
        self.inner.initial_cost_gradient(y, out);
        self.scale(CoefficientName::InitialGamma, &mut [out]);
    }
}
