//! Scalar built-in instances besides LQ.

use serde::{Deserialize, Serialize};

use super::{ControlSet, Map1, Map3, Map6, ProblemSpec, ScalarCoefficients, Structure};
use crate::error::{invalid, Result};

/// Scalar instance with nonlinear coefficients and a state-dependent observation.
///
/// ```text
/// b      = -drift_sin * sin x + u
/// sigma1 = sigma * (1 + sigma_wave * cos x)
/// sigma2 = 0
/// h      = obs * tanh x
/// f      = beta * y + kappa * z1 + source * sin x
/// phi    = x + phi_wave * sin x
/// l      = q/2 x^2 + r/2 u^2
/// Phi    = g * log cosh x
/// gamma  = gamma_weight/2 * y^2
/// ```
///
/// With `kappa = 0` the generator is affine in `y` with an `x`-only remainder,
/// which keeps the regression pipeline exact on binomial bundles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalarNonlinearParams {
    pub drift_sin: f64,
    pub sigma: f64,
    pub sigma_wave: f64,
    pub obs: f64,
    pub beta: f64,
    pub kappa: f64,
    pub source: f64,
    pub phi_wave: f64,
    pub q: f64,
    pub r: f64,
    pub g: f64,
    pub gamma_weight: f64,
    pub x0: f64,
    pub horizon: f64,
    pub u_bound: f64,
}

impl Default for ScalarNonlinearParams {
    fn default() -> Self {
        Self {
            drift_sin: 0.5,
            sigma: 0.4,
            sigma_wave: 0.3,
            obs: 0.8,
            beta: -0.3,
            kappa: 0.0,
            source: 0.2,
            phi_wave: 0.25,
            q: 1.0,
            r: 0.5,
            g: 1.0,
            gamma_weight: 0.5,
            x0: 0.5,
            horizon: 1.0,
            u_bound: 1.0,
        }
    }
}

pub fn make_scalar_nonlinear_instance(p: &ScalarNonlinearParams) -> Result<ProblemSpec> {
    let all = [
        p.drift_sin,
        p.sigma,
        p.sigma_wave,
        p.obs,
        p.beta,
        p.kappa,
        p.source,
        p.phi_wave,
        p.q,
        p.r,
        p.g,
        p.gamma_weight,
        p.x0,
        p.horizon,
        p.u_bound,
    ];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(invalid("scalar_nonlinear parameters must be finite"));
    }
    if p.u_bound <= 0.0 {
        return Err(invalid("scalar_nonlinear u_bound must be positive"));
    }
    let (ds, s, sw, c) = (p.drift_sin, p.sigma, p.sigma_wave, p.obs);
    let (beta, kappa, src, pw) = (p.beta, p.kappa, p.source, p.phi_wave);
    let (q, r, g, gw) = (p.q, p.r, p.g, p.gamma_weight);

    let coeffs = ScalarCoefficients::default()
        .with_drift(Map3::new(
            move |_, x, u| -ds * x.sin() + u,
            move |_, x, _| -ds * x.cos(),
            |_, _, _| 1.0,
        ))
        .with_sigma1(Map3::new(
            move |_, x, _| s * (1.0 + sw * x.cos()),
            move |_, x, _| -s * sw * x.sin(),
            |_, _, _| 0.0,
        ))
        .with_observation(Map3::new(
            move |_, x, _| c * x.tanh(),
            move |_, x, _| c / x.cosh().powi(2),
            |_, _, _| 0.0,
        ))
        .with_driver(Map6::new(
            move |_, x, y, z1, _, _| beta * y + kappa * z1 + src * x.sin(),
            move |_, x, _, _, _, _| src * x.cos(),
            move |_, _, _, _, _, _| beta,
            move |_, _, _, _, _, _| kappa,
            |_, _, _, _, _, _| 0.0,
            |_, _, _, _, _, _| 0.0,
        ))
        .with_terminal_map(Map1::new(move |x| x + pw * x.sin(), move |x| 1.0 + pw * x.cos()))
        .with_running_cost(Map6::new(
            move |_, x, _, _, _, u| 0.5 * (q * x * x + r * u * u),
            move |_, x, _, _, _, _| q * x,
            |_, _, _, _, _, _| 0.0,
            |_, _, _, _, _, _| 0.0,
            |_, _, _, _, _, _| 0.0,
            move |_, _, _, _, _, u| r * u,
        ))
        .with_terminal_cost(Map1::new(move |x| g * log_cosh(x), move |x| g * x.tanh()))
        .with_initial_cost(Map1::new(move |y| 0.5 * gw * y * y, move |y| gw * y));

    Ok(ProblemSpec::scalar(
        "scalar_nonlinear",
        p.horizon,
        p.x0,
        ControlSet::interval(-p.u_bound, p.u_bound)?,
        coeffs,
    )?
    .with_bound(c.abs())
    .with_structure(Structure {
        control_free_observation: c == 0.0,
        linear_terminal_map: pw == 0.0,
    }))
}

/// Overflow-safe `log cosh x`.
fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Scalar instance whose running cost is a double well in `u`, so the
/// Hamiltonian is not convex in the control.
///
/// `b = u`, `sigma1 = sigma`, `h = sigma2 = f = gamma = 0`, `phi = x`,
/// `l = q/2 x^2 + well (u^2 - 1)^2`, `Phi = g/2 x^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoubleWellParams {
    pub sigma: f64,
    pub q: f64,
    pub well: f64,
    pub g: f64,
    pub x0: f64,
    pub horizon: f64,
    pub u_bound: f64,
}

impl Default for DoubleWellParams {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            q: 1.0,
            well: 1.0,
            g: 1.0,
            x0: 0.5,
            horizon: 1.0,
            u_bound: 2.0,
        }
    }
}

pub fn make_double_well_instance(p: &DoubleWellParams) -> Result<ProblemSpec> {
    let all = [p.sigma, p.q, p.well, p.g, p.x0, p.horizon, p.u_bound];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(invalid("double_well parameters must be finite"));
    }
    if p.u_bound <= 0.0 {
        return Err(invalid("double_well u_bound must be positive"));
    }
    let (s, q, w, g) = (p.sigma, p.q, p.well, p.g);
    let coeffs = ScalarCoefficients::default()
        .with_drift(Map3::new(|_, _, u| u, |_, _, _| 0.0, |_, _, _| 1.0))
        .with_sigma1(Map3::constant(s))
        .with_running_cost(Map6::new(
            move |_, x, _, _, _, u| 0.5 * q * x * x + w * (u * u - 1.0).powi(2),
            move |_, x, _, _, _, _| q * x,
            |_, _, _, _, _, _| 0.0,
            |_, _, _, _, _, _| 0.0,
            |_, _, _, _, _, _| 0.0,
            move |_, _, _, _, _, u| 4.0 * w * u * (u * u - 1.0),
        ))
        .with_terminal_cost(Map1::new(move |x| 0.5 * g * x * x, move |x| g * x));
    Ok(ProblemSpec::scalar(
        "double_well",
        p.horizon,
        p.x0,
        ControlSet::interval(-p.u_bound, p.u_bound)?,
        coeffs,
    )?
    .with_bound(0.0)
    .with_structure(Structure {
        control_free_observation: true,
        linear_terminal_map: true,
    }))
}
