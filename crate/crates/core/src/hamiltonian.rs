//! The Hamiltonian
//!
//! ```text
//! H(t, x, y, z1, z2, u; k, p, q1, q2, R2) = l + <b, p> + <sigma1, q1> + <sigma2, q2> + <f, k> + R2 h
//! ```
//!
//! its first partials, and a sampled convexity diagnosis.
//!
//! Partials are always taken with the `R2` slot shifted to
//! `R2 - <sigma2, p> - <z2, k>`, evaluated at the same point.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Coefficients, Dims, Point, ProblemSpec};

/// Multiplier arguments of the Hamiltonian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiplierPoint {
    pub k: Vec<f64>,
    pub p: Vec<f64>,
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
    pub r2: f64,
}

impl MultiplierPoint {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            k: vec![0.0; dims.m],
            p: vec![0.0; dims.n],
            q1: vec![0.0; dims.n],
            q2: vec![0.0; dims.n],
            r2: 0.0,
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        let sc = |v: &[f64]| v.iter().map(|a| a * s).collect::<Vec<_>>();
        Self {
            k: sc(&self.k),
            p: sc(&self.p),
            q1: sc(&self.q1),
            q2: sc(&self.q2),
            r2: self.r2 * s,
        }
    }

    fn check(&self, dims: Dims) -> Result<()> {
        if self.k.len() != dims.m || self.p.len() != dims.n || self.q1.len() != dims.n || self.q2.len() != dims.n {
            return Err(Error::InvalidArgument("multiplier dimensions do not match the problem".into()));
        }
        Ok(())
    }
}

/// Owned version of [`Point`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatePoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub u: Vec<f64>,
}

impl StatePoint {
    pub fn as_point(&self) -> Point<'_> {
        Point {
            t: self.t,
            x: &self.x,
            y: &self.y,
            z1: &self.z1,
            z2: &self.z2,
            u: &self.u,
        }
    }

    fn check(&self, dims: Dims) -> Result<()> {
        if self.x.len() != dims.n
            || self.y.len() != dims.m
            || self.z1.len() != dims.m
            || self.z2.len() != dims.m
            || self.u.len() != dims.k
        {
            return Err(Error::InvalidArgument("state dimensions do not match the problem".into()));
        }
        Ok(())
    }

    /// Joint variable `(x, y, z1, z2, u)`.
    fn flatten(&self) -> Vec<f64> {
        [&self.x[..], &self.y, &self.z1, &self.z2, &self.u].concat()
    }

    fn from_flat(t: f64, v: &[f64], dims: Dims) -> Self {
        let (n, m) = (dims.n, dims.m);
        Self {
            t,
            x: v[..n].to_vec(),
            y: v[n..n + m].to_vec(),
            z1: v[n + m..n + 2 * m].to_vec(),
            z2: v[n + 2 * m..n + 3 * m].to_vec(),
            u: v[n + 3 * m..].to_vec(),
        }
    }
}

/// Partials of the Hamiltonian in each argument group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HPartials {
    pub hx: Vec<f64>,
    pub hy: Vec<f64>,
    pub hz1: Vec<f64>,
    pub hz2: Vec<f64>,
    pub hu: Vec<f64>,
}

/// Scratch buffers for repeated Hamiltonian evaluation along paths.
#[derive(Clone, Debug)]
pub struct HamiltonianWorkspace {
    dims: Dims,
    b: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    f: Vec<f64>,
    bx: Vec<f64>,
    bu: Vec<f64>,
    s1x: Vec<f64>,
    s1u: Vec<f64>,
    s2x: Vec<f64>,
    s2u: Vec<f64>,
    fx: Vec<f64>,
    fy: Vec<f64>,
    fz1: Vec<f64>,
    fz2: Vec<f64>,
    fu: Vec<f64>,
    hxo: Vec<f64>,
    huo: Vec<f64>,
    pub hx: Vec<f64>,
    pub hy: Vec<f64>,
    pub hz1: Vec<f64>,
    pub hz2: Vec<f64>,
    pub hu: Vec<f64>,
}

impl HamiltonianWorkspace {
    pub fn new(dims: Dims) -> Self {
        let (n, m, k) = (dims.n, dims.m, dims.k);
        Self {
            dims,
            b: vec![0.0; n],
            s1: vec![0.0; n],
            s2: vec![0.0; n],
            f: vec![0.0; m],
            bx: vec![0.0; n * n],
            bu: vec![0.0; n * k],
            s1x: vec![0.0; n * n],
            s1u: vec![0.0; n * k],
            s2x: vec![0.0; n * n],
            s2u: vec![0.0; n * k],
            fx: vec![0.0; m * n],
            fy: vec![0.0; m * m],
            fz1: vec![0.0; m * m],
            fz2: vec![0.0; m * m],
            fu: vec![0.0; m * k],
            hxo: vec![0.0; n],
            huo: vec![0.0; k],
            hx: vec![0.0; n],
            hy: vec![0.0; m],
            hz1: vec![0.0; m],
            hz2: vec![0.0; m],
            hu: vec![0.0; k],
        }
    }

    /// The six terms of the Hamiltonian, in the order of the definition.
    #[allow(clippy::too_many_arguments)]
    pub fn terms(
        &mut self,
        c: &dyn Coefficients,
        pt: &Point<'_>,
        k: &[f64],
        p: &[f64],
        q1: &[f64],
        q2: &[f64],
        r2: f64,
    ) -> [f64; 6] {
        c.drift(pt.t, pt.x, pt.u, &mut self.b);
        c.sigma1(pt.t, pt.x, pt.u, &mut self.s1);
        c.sigma2(pt.t, pt.x, pt.u, &mut self.s2);
        c.driver(pt, &mut self.f);
        [
            c.running_cost(pt),
            dot(&self.b, p),
            dot(&self.s1, q1),
            dot(&self.s2, q2),
            dot(&self.f, k),
            r2 * c.observation(pt.t, pt.x, pt.u),
        ]
    }

    #[allow(clippy::too_many_arguments)]
    pub fn value(
        &mut self,
        c: &dyn Coefficients,
        pt: &Point<'_>,
        k: &[f64],
        p: &[f64],
        q1: &[f64],
        q2: &[f64],
        r2: f64,
    ) -> f64 {
        self.terms(c, pt, k, p, q1, q2, r2).iter().sum()
    }

    /// `R2 - <sigma2(t, x, u), p> - <z2, k>`.
    pub fn shifted_r2(&mut self, c: &dyn Coefficients, pt: &Point<'_>, k: &[f64], p: &[f64], r2: f64) -> f64 {
        c.sigma2(pt.t, pt.x, pt.u, &mut self.s2);
        r2 - dot(&self.s2, p) - dot(pt.z2, k)
    }

    /// Fills `hx, hy, hz1, hz2, hu` using `r2_slot` as the multiplier of `h`
    /// as given; callers wanting the shifted convention pass [`Self::shifted_r2`].
    #[allow(clippy::too_many_arguments)]
    pub fn partials(
        &mut self,
        c: &dyn Coefficients,
        pt: &Point<'_>,
        k: &[f64],
        p: &[f64],
        q1: &[f64],
        q2: &[f64],
        r2_slot: f64,
    ) {
        let Dims { n, m, k: kd } = self.dims;
        c.running_cost_partials(pt, &mut self.hx, &mut self.hy, &mut self.hz1, &mut self.hz2, &mut self.hu);
        c.drift_partials(pt.t, pt.x, pt.u, &mut self.bx, &mut self.bu);
        c.sigma1_partials(pt.t, pt.x, pt.u, &mut self.s1x, &mut self.s1u);
        c.sigma2_partials(pt.t, pt.x, pt.u, &mut self.s2x, &mut self.s2u);
        c.driver_partials(pt, &mut self.fx, &mut self.fy, &mut self.fz1, &mut self.fz2, &mut self.fu);
        c.observation_partials(pt.t, pt.x, pt.u, &mut self.hxo, &mut self.huo);
        for a in 0..n {
            let mut s = r2_slot * self.hxo[a];
            for r in 0..n {
                s += self.bx[r * n + a] * p[r] + self.s1x[r * n + a] * q1[r] + self.s2x[r * n + a] * q2[r];
            }
            for r in 0..m {
                s += self.fx[r * n + a] * k[r];
            }
            self.hx[a] += s;
        }
        for a in 0..m {
            for r in 0..m {
                self.hy[a] += self.fy[r * m + a] * k[r];
                self.hz1[a] += self.fz1[r * m + a] * k[r];
                self.hz2[a] += self.fz2[r * m + a] * k[r];
            }
        }
        for a in 0..kd {
            let mut s = r2_slot * self.huo[a];
            for r in 0..n {
                s += self.bu[r * kd + a] * p[r] + self.s1u[r * kd + a] * q1[r] + self.s2u[r * kd + a] * q2[r];
            }
            for r in 0..m {
                s += self.fu[r * kd + a] * k[r];
            }
            self.hu[a] += s;
        }
    }

    /// Name of the first non-finite partial group after [`Self::partials`].
    pub fn non_finite_partial(&self) -> Option<&'static str> {
        let groups: [(&'static str, &Vec<f64>); 5] = [
            ("H_x", &self.hx),
            ("H_y", &self.hy),
            ("H_z1", &self.hz1),
            ("H_z2", &self.hz2),
            ("H_u", &self.hu),
        ];
        groups
            .iter()
            .find(|(_, v)| v.iter().any(|a| !a.is_finite()))
            .map(|(name, _)| *name)
    }

    fn gradient_flat(&self) -> Vec<f64> {
        [&self.hx[..], &self.hy, &self.hz1, &self.hz2, &self.hu].concat()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const TERM_NAMES: [&str; 6] = ["l", "<b, p>", "<sigma1, q1>", "<sigma2, q2>", "<f, k>", "R2 h"];

/// Hamiltonian value, with the `R2` slot taken as given.
pub fn eval_h(spec: &ProblemSpec, state: &StatePoint, mult: &MultiplierPoint) -> Result<f64> {
    state.check(spec.dims)?;
    mult.check(spec.dims)?;
    let mut ws = HamiltonianWorkspace::new(spec.dims);
    let terms = ws.terms(
        spec.coefficients(),
        &state.as_point(),
        &mult.k,
        &mult.p,
        &mult.q1,
        &mult.q2,
        mult.r2,
    );
    if let Some(i) = terms.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteTerm(format!("Hamiltonian term {}", TERM_NAMES[i])));
    }
    Ok(terms.iter().sum())
}

/// Partials of the Hamiltonian with the shifted `R2` slot.
pub fn eval_h_partials(spec: &ProblemSpec, state: &StatePoint, mult: &MultiplierPoint) -> Result<HPartials> {
    state.check(spec.dims)?;
    mult.check(spec.dims)?;
    let c = spec.coefficients();
    let pt = state.as_point();
    let mut ws = HamiltonianWorkspace::new(spec.dims);
    let shifted = ws.shifted_r2(c, &pt, &mult.k, &mult.p, mult.r2);
    ws.partials(c, &pt, &mult.k, &mult.p, &mult.q1, &mult.q2, shifted);
    if let Some(name) = ws.non_finite_partial() {
        return Err(Error::NonFiniteTerm(format!("Hamiltonian partial {name}")));
    }
    Ok(HPartials {
        hx: ws.hx,
        hy: ws.hy,
        hz1: ws.hz1,
        hz2: ws.hz2,
        hu: ws.hu,
    })
}

/// Smallest eigenvalue tolerated for a sampled Hessian.
pub const PSD_TOLERANCE: f64 = -1e-6;

/// Where a convexity probe failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexityWitness {
    pub state: StatePoint,
    pub multipliers: MultiplierPoint,
    pub eigenvalue: f64,
}

/// Worst midpoint violation `f((a+b)/2) - (f(a)+f(b))/2` over the probed pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MidpointReport {
    pub worst_violation: f64,
    pub witness: Option<(Vec<f64>, Vec<f64>)>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub passed: bool,
    pub n_probes: usize,
    pub worst_eigenvalue: f64,
    /// Probe attaining the worst eigenvalue when it is below tolerance.
    pub witness: Option<ConvexityWitness>,
    pub terminal_cost: MidpointReport,
    pub initial_cost: MidpointReport,
}

fn hessian(ws: &mut HamiltonianWorkspace, c: &dyn Coefficients, state: &StatePoint, mult: &MultiplierPoint) -> DMatrix<f64> {
    let dims = state_dims(state);
    let pt = state.as_point();
    let slot = ws.shifted_r2(c, &pt, &mult.k, &mult.p, mult.r2);
    let base = state.flatten();
    let d = base.len();
    let mut hm = DMatrix::<f64>::zeros(d, d);
    let mut v = base.clone();
    for a in 0..d {
        let s = 1e-4 * base[a].abs().max(1.0);
        v[a] = base[a] + s;
        let sp = StatePoint::from_flat(state.t, &v, dims);
        ws.partials(c, &sp.as_point(), &mult.k, &mult.p, &mult.q1, &mult.q2, slot);
        let gp = ws.gradient_flat();
        v[a] = base[a] - s;
        let sm = StatePoint::from_flat(state.t, &v, dims);
        ws.partials(c, &sm.as_point(), &mult.k, &mult.p, &mult.q1, &mult.q2, slot);
        let gm = ws.gradient_flat();
        v[a] = base[a];
        for r in 0..d {
            hm[(r, a)] = (gp[r] - gm[r]) / (2.0 * s);
        }
    }
    (&hm + hm.transpose()) * 0.5
}

fn state_dims(s: &StatePoint) -> Dims {
    Dims {
        n: s.x.len(),
        m: s.y.len(),
        k: s.u.len(),
    }
}

fn midpoint_report(f: &dyn Fn(&[f64]) -> f64, pairs: &[(Vec<f64>, Vec<f64>)]) -> MidpointReport {
    let mut worst = f64::NEG_INFINITY;
    let mut witness = None;
    let mut passed = true;
    for (a, b) in pairs {
        let mid: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
        let (fa, fb, fm) = (f(a), f(b), f(&mid));
        let viol = fm - 0.5 * (fa + fb);
        let tol = 1e-10 * (1.0 + fa.abs() + fb.abs());
        if viol.is_nan() || viol > tol {
            passed = false;
        }
        if viol > worst || viol.is_nan() {
            worst = viol;
            witness = Some((a.clone(), b.clone()));
        }
    }
    MidpointReport {
        worst_violation: if pairs.is_empty() { 0.0 } else { worst },
        witness: if passed { None } else { witness },
        passed,
    }
}

/// Sampled convexity check of the Hamiltonian in `(x, y, z1, z2, u)` and
/// midpoint checks of `Phi` and `gamma`.
///
/// `probes` pairs states with multipliers. `n_probes` points are taken
/// cyclically from them; every other probe replaces the control by a uniform
/// draw from the control set so that non-convexity away from the visited
/// controls is found. Midpoint pairs are formed from the probed `x` and `y`
/// values, jittered by `seed`.
pub fn check_h_convexity(
    spec: &ProblemSpec,
    probes: &[(StatePoint, MultiplierPoint)],
    n_probes: usize,
    seed: u64,
) -> Result<ConvexityReport> {
    if n_probes == 0 {
        return Err(Error::InvalidArgument("convexity check needs at least one probe".into()));
    }
    if probes.is_empty() {
        return Err(Error::InvalidArgument("convexity check needs sample points".into()));
    }
    for (s, mlt) in probes {
        s.check(spec.dims)?;
        mlt.check(spec.dims)?;
    }
    let c = spec.coefficients();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ws = HamiltonianWorkspace::new(spec.dims);
    let mut worst = f64::INFINITY;
    let mut witness = None;
    let mut x_pairs = Vec::new();
    let mut y_pairs = Vec::new();
    for q in 0..n_probes {
        let (state, mult) = &probes[q % probes.len()];
        let mut state = state.clone();
        if q % 2 == 1 {
            state.u = spec.control_set.sample(&mut rng);
        }
        let hm = hessian(&mut ws, c, &state, mult);
        let eig = SymmetricEigen::new(hm).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        let eig = if eig.is_nan() { f64::NEG_INFINITY } else { eig };
        if eig < worst {
            worst = eig;
            witness = Some(ConvexityWitness {
                state: state.clone(),
                multipliers: mult.clone(),
                eigenvalue: eig,
            });
        }
        let (other, _) = &probes[rng.random_range(0..probes.len())];
        let jitter = |v: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
            v.iter().map(|a| a + rng.random_range(-1.0..1.0) * (1.0 + a.abs())).collect()
        };
        x_pairs.push((state.x.clone(), jitter(&other.x, &mut rng)));
        y_pairs.push((state.y.clone(), jitter(&other.y, &mut rng)));
    }
    let terminal_cost = midpoint_report(&|x| c.terminal_cost(x), &x_pairs);
    let initial_cost = midpoint_report(&|y| c.initial_cost(y), &y_pairs);
    let hess_ok = worst >= PSD_TOLERANCE;
    Ok(ConvexityReport {
        passed: hess_ok && terminal_cost.passed && initial_cost.passed,
        n_probes,
        worst_eigenvalue: worst,
        witness: if hess_ok { None } else { witness },
        terminal_cost,
        initial_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        make_double_well_instance, make_lq_instance, make_scalar_nonlinear_instance, ControlSet, DoubleWellParams, LqParams,
        Map1, Map3, Map6, ScalarCoefficients, ScalarNonlinearParams,
    };

    fn random_state(rng: &mut ChaCha8Rng, dims: Dims) -> StatePoint {
        let mut v = |len: usize| (0..len).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<f64>>();
        StatePoint {
            t: 0.3,
            x: v(dims.n),
            y: v(dims.m),
            z1: v(dims.m),
            z2: v(dims.m),
            u: v(dims.k),
        }
    }

    fn random_mult(rng: &mut ChaCha8Rng, dims: Dims) -> MultiplierPoint {
        let mut v = |len: usize| (0..len).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
        MultiplierPoint {
            k: v(dims.m),
            p: v(dims.n),
            q1: v(dims.n),
            q2: v(dims.n),
            r2: rng.random_range(-2.0..2.0),
        }
    }

    fn builtins() -> Vec<ProblemSpec> {
        let observed = LqParams {
            observation: 0.5,
            sigma2: vec![0.3],
            ..LqParams::default()
        };
        vec![
            make_lq_instance(&LqParams::default()).unwrap(),
            make_lq_instance(&observed).unwrap(),
            make_scalar_nonlinear_instance(&ScalarNonlinearParams::default()).unwrap(),
            make_double_well_instance(&DoubleWellParams::default()).unwrap(),
        ]
    }

    #[test]
    fn zero_multipliers_give_running_cost() {
        let spec = make_scalar_nonlinear_instance(&ScalarNonlinearParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_state(&mut rng, spec.dims);
        let h = eval_h(&spec, &s, &MultiplierPoint::zeros(spec.dims)).unwrap();
        assert_eq!(h, spec.coefficients().running_cost(&s.as_point()));
    }

    #[test]
    fn single_pairing() {
        let coeffs = ScalarCoefficients::default()
            .with_drift(Map3::constant(1.0))
            .with_terminal_map(Map1::zero());
        let spec = ProblemSpec::scalar("pair", 1.0, 0.0, ControlSet::interval(-1.0, 1.0).unwrap(), coeffs).unwrap();
        let s = StatePoint {
            t: 0.0,
            x: vec![0.4],
            y: vec![0.0],
            z1: vec![0.0],
            z2: vec![0.0],
            u: vec![0.0],
        };
        let mut m = MultiplierPoint::zeros(spec.dims);
        m.p = vec![2.0];
        assert_eq!(eval_h(&spec, &s, &m).unwrap(), 2.0);
    }

    #[test]
    fn affine_in_multipliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for spec in builtins() {
            for _ in 0..20 {
                let s = random_state(&mut rng, spec.dims);
                let m = random_mult(&mut rng, spec.dims);
                let h0 = eval_h(&spec, &s, &MultiplierPoint::zeros(spec.dims)).unwrap();
                let h1 = eval_h(&spec, &s, &m).unwrap();
                for lam in [-1.0, 0.5, 2.0] {
                    let hl = eval_h(&spec, &s, &m.scaled(lam)).unwrap();
                    assert!(((hl - h0) - lam * (h1 - h0)).abs() < 1e-12 * (1.0 + h1.abs() + hl.abs()));
                }
            }
        }
    }

    #[test]
    fn lq_control_gradient() {
        let spec = make_lq_instance(&LqParams::default()).unwrap();
        let s = StatePoint {
            t: 0.1,
            x: vec![0.7],
            y: vec![0.0],
            z1: vec![0.0],
            z2: vec![0.0],
            u: vec![-0.3],
        };
        let mut m = MultiplierPoint::zeros(spec.dims);
        m.p = vec![1.3];
        let d = eval_h_partials(&spec, &s, &m).unwrap();
        assert!((d.hu[0] - (-0.3 + 1.3)).abs() < 1e-15);
    }

    #[test]
    fn partials_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for spec in builtins() {
            let dims = spec.dims;
            for _ in 0..100 {
                let s = random_state(&mut rng, dims);
                let m = random_mult(&mut rng, dims);
                let d = eval_h_partials(&spec, &s, &m).unwrap();
                let mut ws = HamiltonianWorkspace::new(dims);
                let slot = ws.shifted_r2(spec.coefficients(), &s.as_point(), &m.k, &m.p, m.r2);
                let shifted = MultiplierPoint { r2: slot, ..m.clone() };
                let analytic = [&d.hx[..], &d.hy, &d.hz1, &d.hz2, &d.hu].concat();
                let base = s.flatten();
                for (a, g) in analytic.iter().enumerate() {
                    let e = 1e-6 * base[a].abs().max(1.0);
                    let mut v = base.clone();
                    v[a] += e;
                    let hp = eval_h(&spec, &StatePoint::from_flat(s.t, &v, dims), &shifted).unwrap();
                    v[a] -= 2.0 * e;
                    let hm = eval_h(&spec, &StatePoint::from_flat(s.t, &v, dims), &shifted).unwrap();
                    let fd = (hp - hm) / (2.0 * e);
                    assert!(
                        (fd - g).abs() <= 1e-5 * g.abs().max(1.0),
                        "{}: component {a}: fd {fd} vs analytic {g}",
                        spec.name
                    );
                }
            }
        }
    }

    #[test]
    fn zero_shift_without_observation_noise() {
        let spec = make_lq_instance(&LqParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = StatePoint {
            z2: vec![0.0],
            ..random_state(&mut rng, spec.dims)
        };
        let m = random_mult(&mut rng, spec.dims);
        let mut ws = HamiltonianWorkspace::new(spec.dims);
        assert_eq!(ws.shifted_r2(spec.coefficients(), &s.as_point(), &m.k, &m.p, m.r2), m.r2);
    }

    fn probes_for(spec: &ProblemSpec, count: usize, seed: u64) -> Vec<(StatePoint, MultiplierPoint)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| (random_state(&mut rng, spec.dims), random_mult(&mut rng, spec.dims)))
            .collect()
    }

    #[test]
    fn lq_is_convex() {
        let spec = make_lq_instance(&LqParams::default()).unwrap();
        let r = check_h_convexity(&spec, &probes_for(&spec, 30, 5), 60, 9).unwrap();
        assert!(r.passed);
        assert!(r.worst_eigenvalue >= -1e-8, "{}", r.worst_eigenvalue);
        assert!(r.witness.is_none());
    }

    #[test]
    fn concave_control_cost_is_caught() {
        let l = Map6::new(
            |_, x, _, _, _, u| 0.5 * x * x - u * u,
            |_, x, _, _, _, _| x,
            |_, _, _, _, _, _| 0.0,
            |_, _, _, _, _, _| 0.0,
            |_, _, _, _, _, _| 0.0,
            |_, _, _, _, _, u| -2.0 * u,
        );
        let coeffs = ScalarCoefficients::default()
            .with_drift(Map3::new(|_, _, u| u, |_, _, _| 0.0, |_, _, _| 1.0))
            .with_sigma1(Map3::constant(0.5))
            .with_running_cost(l);
        let spec = ProblemSpec::scalar("concave", 1.0, 0.0, ControlSet::interval(-1.0, 1.0).unwrap(), coeffs).unwrap();
        let r = check_h_convexity(&spec, &probes_for(&spec, 10, 6), 10, 1).unwrap();
        assert!(!r.passed);
        assert!((r.worst_eigenvalue + 2.0).abs() < 1e-6, "{}", r.worst_eigenvalue);
        assert!(r.witness.is_some());
    }

    #[test]
    fn double_well_is_caught() {
        let spec = make_double_well_instance(&DoubleWellParams::default()).unwrap();
        let r = check_h_convexity(&spec, &probes_for(&spec, 20, 7), 40, 2).unwrap();
        assert!(!r.passed);
        assert!(r.worst_eigenvalue < -0.1);
    }

    #[test]
    fn quadratic_terminal_cost_is_midpoint_convex() {
        let coeffs = ScalarCoefficients::default().with_terminal_cost(Map1::new(|x| x * x, |x| 2.0 * x));
        let spec = ProblemSpec::scalar("quad", 1.0, 0.0, ControlSet::interval(-1.0, 1.0).unwrap(), coeffs).unwrap();
        let r = check_h_convexity(&spec, &probes_for(&spec, 10, 8), 25, 3).unwrap();
        assert!(r.terminal_cost.passed);
        assert!(r.terminal_cost.worst_violation <= 0.0);
    }

    #[test]
    fn concave_terminal_cost_fails_midpoint() {
        let coeffs = ScalarCoefficients::default().with_terminal_cost(Map1::new(|x| -x * x, |x| -2.0 * x));
        let spec = ProblemSpec::scalar("concave_phi", 1.0, 0.0, ControlSet::interval(-1.0, 1.0).unwrap(), coeffs).unwrap();
        let r = check_h_convexity(&spec, &probes_for(&spec, 10, 8), 25, 3).unwrap();
        assert!(!r.terminal_cost.passed && !r.passed);
        assert!(r.terminal_cost.witness.is_some());
    }
}
