//! Least-squares Monte Carlo solvers for the backward state `(y, z1, z2)` and
//! the adjoint system `(k, p, q1, q2, r, R1, R2)`.
//!
//! Backward equations are stepped as
//!
//! ```text
//! y_i = E_i[y_{i+1}] - (f - z2 h) dt,   z1_i = E_i[y_{i+1} dW_i] / dt,   z2_i = E_i[y_{i+1} dY_i] / dt
//! ```
//!
//! with `E_i` a polynomial regression on the node-`i` state. The increment
//! targets are centred by the fitted `E_i[y_{i+1}]`, which leaves their
//! conditional mean unchanged and removes most of their variance.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ForwardTrajectories, Formulation};
use crate::hamiltonian::HamiltonianWorkspace;
use crate::model::{Point, ProblemSpec};
use crate::paths::{NoiseBundle, TimeGrid};
use crate::regression::{BasisSpec, Design};

/// Regression diagnostics of one backward step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub basis_size: usize,
    pub condition: f64,
    /// Largest residual RMS among the conditional-mean fits of the step.
    pub residual_rms: f64,
}

/// Regressions shared by one step: conditional mean of each target component
/// and its `dW` and `dY` martingale coefficients.
struct StepFits {
    mean: Vec<f64>,
    zw: Vec<f64>,
    zy: Vec<f64>,
    residual: f64,
}

/// `next` is path-major with `d` components; results use the same layout.
fn fit_step(design: &Design<'_>, next: &[f64], d: usize, noise: &NoiseBundle, step: usize) -> Result<StepFits> {
    let np = design.n_paths();
    let dt = noise.grid().dt();
    let mut out = StepFits {
        mean: vec![0.0; np * d],
        zw: vec![0.0; np * d],
        zy: vec![0.0; np * d],
        residual: 0.0,
    };
    for c in 0..d {
        let target: Vec<f64> = (0..np).into_par_iter().map(|j| next[j * d + c]).collect();
        let (map, fitted) = design.fit(&target)?;
        out.residual = out.residual.max(map.diagnostics.residual_rms);
        let tw: Vec<f64> = (0..np)
            .into_par_iter()
            .map(|j| (target[j] - fitted[j]) * noise.dw(j, step) / dt)
            .collect();
        let ty: Vec<f64> = (0..np)
            .into_par_iter()
            .map(|j| (target[j] - fitted[j]) * noise.dy(j, step) / dt)
            .collect();
        let zw = design.project(&tw)?;
        let zy = design.project(&ty)?;
        for j in 0..np {
            out.mean[j * d + c] = fitted[j];
            out.zw[j * d + c] = zw[j];
            out.zy[j * d + c] = zy[j];
        }
    }
    Ok(out)
}

#[inline]
fn slot(v: &[f64], i: usize, j: usize, np: usize, d: usize) -> &[f64] {
    let o = (i * np + j) * d;
    &v[o..o + d]
}

/// Backward state along simulated paths.
#[derive(Clone, Debug)]
pub struct BackwardTrajectories {
    grid: TimeGrid,
    n_paths: usize,
    m: usize,
    y: Vec<f64>,
    z1: Vec<f64>,
    z2: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
    formulation: Formulation,
    noise_fp: u64,
    control_fp: u64,
}

impl BackwardTrajectories {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }
    #[inline]
    pub fn y(&self, i: usize, j: usize) -> &[f64] {
        slot(&self.y, i, j, self.n_paths, self.m)
    }
    /// Defined for steps `0..N`.
    #[inline]
    pub fn z1(&self, i: usize, j: usize) -> &[f64] {
        slot(&self.z1, i, j, self.n_paths, self.m)
    }
    #[inline]
    pub fn z2(&self, i: usize, j: usize) -> &[f64] {
        slot(&self.z2, i, j, self.n_paths, self.m)
    }

    pub(crate) fn check_forward(&self, fwd: &ForwardTrajectories) -> Result<()> {
        if self.noise_fp != fwd.noise_fp || self.control_fp != fwd.control_fp || self.formulation != fwd.formulation() {
            return Err(Error::GridMismatch(
                "backward trajectories were computed from different forward paths".into(),
            ));
        }
        Ok(())
    }

    /// CSV with columns `path, step, y.., z1.., z2..`; the `z` columns are
    /// empty at the terminal node.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let m = self.m;
        let mut header = vec!["path".to_string(), "step".to_string()];
        for name in ["y", "z1_", "z2_"] {
            header.extend((0..m).map(|c| format!("{name}{c}")));
        }
        w.write_record(&header)?;
        let steps = self.grid.steps();
        for j in 0..self.n_paths {
            for i in 0..=steps {
                let mut rec = vec![j.to_string(), i.to_string()];
                rec.extend(self.y(i, j).iter().map(|v| format!("{v:e}")));
                if i < steps {
                    rec.extend(self.z1(i, j).iter().chain(self.z2(i, j)).map(|v| format!("{v:e}")));
                } else {
                    rec.extend(std::iter::repeat_n(String::new(), 2 * m));
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn diagnostics_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.diagnostics)?)
    }
}

/// Solves the backward equation `dy = f dt + z1 dW + z2 dW^u`, `y_T = phi(x_T)`
/// along the forward paths. Under the reference measure `dW^u = dY - h dt`;
/// in the weak formulation the bundle's second stream already is `W^u`.
///
/// The `y`-argument of `f` is handled by an explicit predictor and one corrector.
pub fn solve_backward(
    spec: &ProblemSpec,
    fwd: &ForwardTrajectories,
    noise: &NoiseBundle,
    basis: BasisSpec,
) -> Result<BackwardTrajectories> {
    fwd.check_noise(noise)?;
    let c = spec.coefficients();
    let (n, m) = (spec.dims.n, spec.dims.m);
    let np = fwd.n_paths();
    let grid = *fwd.grid();
    let (steps, dt) = (grid.steps(), grid.dt());

    let mut y = vec![0.0; (steps + 1) * np * m];
    let mut z1 = vec![0.0; steps * np * m];
    let mut z2 = vec![0.0; steps * np * m];
    y[steps * np * m..]
        .par_chunks_mut(m)
        .enumerate()
        .for_each(|(j, out)| c.terminal_map(fwd.x(steps, j), out));
    if let Some(j) = (0..np).find(|j| slot(&y, steps, *j, np, m).iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite {
            what: "terminal map phi".into(),
            path: j,
            step: steps,
        });
    }

    let mut diagnostics = Vec::with_capacity(steps);
    for i in (0..steps).rev() {
        let design = Design::build(fwd.x_at(i), n, fwd.weights(), basis)?;
        let (y_head, y_tail) = y.split_at_mut((i + 1) * np * m);
        let y_next = &y_tail[..np * m];
        let fits = fit_step(&design, y_next, m, noise, i)?;
        diagnostics.push(StepDiagnostics {
            step: i,
            basis_size: design.basis_size(),
            condition: design.condition(),
            residual_rms: fits.residual,
        });
        z1[i * np * m..(i + 1) * np * m].copy_from_slice(&fits.zw);
        z2[i * np * m..(i + 1) * np * m].copy_from_slice(&fits.zy);
        let t = grid.time(i);
        let y_cur = &mut y_head[i * np * m..];
        y_cur
            .par_chunks_mut(m)
            .enumerate()
            .for_each_init(
                || (vec![0.0; m], vec![0.0; m]),
                |(fbuf, ystar), (j, out)| {
                    let x = fwd.x(i, j);
                    let u = fwd.u(i, j);
                    let h = fwd.h(i, j);
                    let yhat = &fits.mean[j * m..(j + 1) * m];
                    let zz1 = &fits.zw[j * m..(j + 1) * m];
                    let zz2 = &fits.zy[j * m..(j + 1) * m];
                    let pt = Point {
                        t,
                        x,
                        y: yhat,
                        z1: zz1,
                        z2: zz2,
                        u,
                    };
                    c.driver(&pt, fbuf);
                    for a in 0..m {
                        ystar[a] = yhat[a] - (fbuf[a] - zz2[a] * h) * dt;
                    }
                    c.driver(&Point { y: ystar, ..pt }, fbuf);
                    for a in 0..m {
                        out[a] = yhat[a] - (fbuf[a] - zz2[a] * h) * dt;
                    }
                },
            );
        if let Some(j) = (0..np).find(|j| y_cur[j * m..(j + 1) * m].iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                what: "backward state y".into(),
                path: j,
                step: i,
            });
        }
    }
    diagnostics.reverse();
    Ok(BackwardTrajectories {
        grid,
        n_paths: np,
        m,
        y,
        z1,
        z2,
        diagnostics,
        formulation: fwd.formulation(),
        noise_fp: fwd.noise_fp,
        control_fp: fwd.control_fp,
    })
}

/// Adjoint processes along simulated paths.
///
/// Besides the node values, the conditional mean `p_hat_i = E_i[p_{i+1}]` is
/// kept: it is the multiplier the Hamiltonian is evaluated with on step `i`.
#[derive(Clone, Debug)]
pub struct AdjointTrajectories {
    grid: TimeGrid,
    n_paths: usize,
    n: usize,
    m: usize,
    k: Vec<f64>,
    p: Vec<f64>,
    p_hat: Vec<f64>,
    q1: Vec<f64>,
    q2: Vec<f64>,
    r: Vec<f64>,
    r1: Vec<f64>,
    r2: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
    noise_fp: u64,
    control_fp: u64,
}

impl AdjointTrajectories {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }
    #[inline]
    pub fn k(&self, i: usize, j: usize) -> &[f64] {
        slot(&self.k, i, j, self.n_paths, self.m)
    }
    #[inline]
    pub fn p(&self, i: usize, j: usize) -> &[f64] {
        slot(&self.p, i, j, self.n_paths, self.n)
    }
    /// Defined for steps `0..N`.
    #[inline]
    pub fn p_hat(&self, i: usize, j: usize) -> &[f64] {
        slot(&self.p_hat, i, j, self.n_paths, self.n)
    }
    #[inline]
    pub fn q1(&self, i: usize, j: usize) -> &[f64] {
        slot(&self.q1, i, j, self.n_paths, self.n)
    }
    #[inline]
    pub fn q2(&self, i: usize, j: usize) -> &[f64] {
        slot(&self.q2, i, j, self.n_paths, self.n)
    }
    #[inline]
    pub fn r(&self, i: usize, j: usize) -> f64 {
        self.r[i * self.n_paths + j]
    }
    #[inline]
    pub fn r1(&self, i: usize, j: usize) -> f64 {
        self.r1[i * self.n_paths + j]
    }
    #[inline]
    pub fn r2(&self, i: usize, j: usize) -> f64 {
        self.r2[i * self.n_paths + j]
    }

    pub(crate) fn check_forward(&self, fwd: &ForwardTrajectories) -> Result<()> {
        if self.noise_fp != fwd.noise_fp || self.control_fp != fwd.control_fp {
            return Err(Error::GridMismatch(
                "adjoint trajectories were computed from different forward paths".into(),
            ));
        }
        Ok(())
    }

    /// CSV with columns `path, step, k.., p.., q1_.., q2_.., r, R1, R2`; step
    /// quantities are empty at the terminal node.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let (n, m) = (self.n, self.m);
        let mut header = vec!["path".to_string(), "step".to_string()];
        header.extend((0..m).map(|c| format!("k{c}")));
        header.extend((0..n).map(|c| format!("p{c}")));
        header.extend((0..n).map(|c| format!("q1_{c}")));
        header.extend((0..n).map(|c| format!("q2_{c}")));
        header.extend(["r".to_string(), "R1".to_string(), "R2".to_string()]);
        w.write_record(&header)?;
        let steps = self.grid.steps();
        let fmt = |v: &f64| format!("{v:e}");
        for j in 0..self.n_paths {
            for i in 0..=steps {
                let mut rec = vec![j.to_string(), i.to_string()];
                rec.extend(self.k(i, j).iter().map(fmt));
                rec.extend(self.p(i, j).iter().map(fmt));
                if i < steps {
                    rec.extend(self.q1(i, j).iter().chain(self.q2(i, j)).map(fmt));
                    rec.push(fmt(&self.r(i, j)));
                    rec.push(fmt(&self.r1(i, j)));
                    rec.push(fmt(&self.r2(i, j)));
                } else {
                    rec.extend(std::iter::repeat_n(String::new(), 2 * n));
                    rec.push(fmt(&self.r(i, j)));
                    rec.push(String::new());
                    rec.push(String::new());
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn diagnostics_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.diagnostics)?)
    }
}

/// Solves the adjoint system along reference-measure trajectories:
///
/// ```text
/// dk = -H_y dt - H_z1 dW - H_z2 dW^u,          k_0 = -gamma_y(y_0)
/// dp = -H_x dt + q1 dW + q2 dW^u,              p_T = Phi_x(x_T) - phi_x^T k_T
/// dr = -l dt + R1 dW + R2 dW^u,                r_T = Phi(x_T)
/// ```
///
/// with `dW^u = dY - h dt`. `H_y` and `H_z` involve only `l` and `f`, so `k`
/// is advanced forward first; `(r, R1, R2)` and `(p, q1, q2)` then share one
/// backward sweep, regressing on `(x_i, k_i)`. On step `i` the partials use
/// the multipliers `(k_i, E_i[p_{i+1}], q1_i, q2_i)` and the shifted slot
/// `R2_i - <sigma2, p> - <z2, k>`. `gamma_y` is taken at the cross-path mean
/// of `y_0`, matching the cost.
pub fn solve_adjoint(
    spec: &ProblemSpec,
    fwd: &ForwardTrajectories,
    bwd: &BackwardTrajectories,
    noise: &NoiseBundle,
    basis: BasisSpec,
) -> Result<AdjointTrajectories> {
    fwd.check_noise(noise)?;
    bwd.check_forward(fwd)?;
    if fwd.formulation() != Formulation::Strong {
        return Err(Error::InvalidArgument("the adjoint system needs reference-measure trajectories".into()));
    }
    let c = spec.coefficients();
    let dims = spec.dims;
    let (n, m) = (dims.n, dims.m);
    let np = fwd.n_paths();
    let grid = *fwd.grid();
    let (steps, dt) = (grid.steps(), grid.dt());

    // Forward sweep for k.
    let mut k = vec![0.0; (steps + 1) * np * m];
    let y0_mean: Vec<f64> = (0..m)
        .map(|a| {
            let vals: Vec<f64> = (0..np).map(|j| bwd.y(0, j)[a]).collect();
            crate::stats::weighted_mean(&vals, fwd.weights())
        })
        .collect();
    let mut k0 = vec![0.0; m];
    c.initial_cost_gradient(&y0_mean, &mut k0);
    for v in &mut k0 {
        *v = -*v;
    }
    if k0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteTerm("initial cost gradient gamma_y".into()));
    }
    k[..np * m].par_chunks_mut(m).for_each(|out| out.copy_from_slice(&k0));
    let zeros_n = vec![0.0; n];
    for i in 0..steps {
        let t = grid.time(i);
        let (k_head, k_tail) = k.split_at_mut((i + 1) * np * m);
        let k_cur = &k_head[i * np * m..];
        let k_next = &mut k_tail[..np * m];
        let bad: Vec<Option<&'static str>> = k_next
            .par_chunks_mut(m)
            .enumerate()
            .map_init(
                || HamiltonianWorkspace::new(dims),
                |ws, (j, out)| {
                    let kj = &k_cur[j * m..(j + 1) * m];
                    let pt = Point {
                        t,
                        x: fwd.x(i, j),
                        y: bwd.y(i, j),
                        z1: bwd.z1(i, j),
                        z2: bwd.z2(i, j),
                        u: fwd.u(i, j),
                    };
                    ws.partials(c, &pt, kj, &zeros_n, &zeros_n, &zeros_n, 0.0);
                    let dwu = noise.dy(j, i) - fwd.h(i, j) * dt;
                    let dw = noise.dw(j, i);
                    for a in 0..m {
                        out[a] = kj[a] - ws.hy[a] * dt - ws.hz1[a] * dw - ws.hz2[a] * dwu;
                    }
                    ws.non_finite_partial()
                },
            )
            .collect();
        if let Some(name) = bad.iter().flatten().next() {
            return Err(Error::NonFiniteTerm(format!("Hamiltonian partial {name} on step {i}")));
        }
        if let Some(j) = (0..np).find(|j| k_next[j * m..(j + 1) * m].iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                what: "adjoint k".into(),
                path: j,
                step: i + 1,
            });
        }
    }

    // Backward sweep for (r, R1, R2) and (p, q1, q2).
    let mut r = vec![0.0; (steps + 1) * np];
    let mut r1 = vec![0.0; steps * np];
    let mut r2 = vec![0.0; steps * np];
    let mut p = vec![0.0; (steps + 1) * np * n];
    let mut p_hat = vec![0.0; steps * np * n];
    let mut q1 = vec![0.0; steps * np * n];
    let mut q2 = vec![0.0; steps * np * n];
    {
        let r_t = &mut r[steps * np..];
        let p_t = &mut p[steps * np * n..];
        let k_t = &k[steps * np * m..];
        r_t.par_iter_mut()
            .zip(p_t.par_chunks_mut(n))
            .enumerate()
            .for_each_init(
                || vec![0.0; m * n],
                |jac, (j, (rv, pv))| {
                    let x = fwd.x(steps, j);
                    *rv = c.terminal_cost(x);
                    c.terminal_cost_gradient(x, pv);
                    c.terminal_map_jacobian(x, jac);
                    let kj = &k_t[j * m..(j + 1) * m];
                    for a in 0..n {
                        for b in 0..m {
                            pv[a] -= jac[b * n + a] * kj[b];
                        }
                    }
                },
            );
        if let Some(j) = (0..np).find(|j| !r_t[*j].is_finite() || p_t[j * n..(j + 1) * n].iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                what: "terminal adjoint values".into(),
                path: j,
                step: steps,
            });
        }
    }

    let mut diagnostics = Vec::with_capacity(steps);
    let fdim = n + m;
    let mut features = vec![0.0; np * fdim];
    for i in (0..steps).rev() {
        let t = grid.time(i);
        let k_i = &k[i * np * m..(i + 1) * np * m];
        features.par_chunks_mut(fdim).enumerate().for_each(|(j, f)| {
            f[..n].copy_from_slice(fwd.x(i, j));
            f[n..].copy_from_slice(&k_i[j * m..(j + 1) * m]);
        });
        let design = Design::build(&features, fdim, fwd.weights(), basis)?;
        let rf = fit_step(&design, &r[(i + 1) * np..(i + 2) * np], 1, noise, i)?;
        let pf = fit_step(&design, &p[(i + 1) * np * n..(i + 2) * np * n], n, noise, i)?;
        diagnostics.push(StepDiagnostics {
            step: i,
            basis_size: design.basis_size(),
            condition: design.condition(),
            residual_rms: rf.residual.max(pf.residual),
        });
        r1[i * np..(i + 1) * np].copy_from_slice(&rf.zw);
        r2[i * np..(i + 1) * np].copy_from_slice(&rf.zy);
        p_hat[i * np * n..(i + 1) * np * n].copy_from_slice(&pf.mean);
        q1[i * np * n..(i + 1) * np * n].copy_from_slice(&pf.zw);
        q2[i * np * n..(i + 1) * np * n].copy_from_slice(&pf.zy);

        let r_cur = &mut r[i * np..(i + 1) * np];
        let p_cur = &mut p[i * np * n..(i + 1) * np * n];
        let bad: Vec<Option<&'static str>> = r_cur
            .par_iter_mut()
            .zip(p_cur.par_chunks_mut(n))
            .enumerate()
            .map_init(
                || HamiltonianWorkspace::new(dims),
                |ws, (j, (rv, pv))| {
                    let pt = Point {
                        t,
                        x: fwd.x(i, j),
                        y: bwd.y(i, j),
                        z1: bwd.z1(i, j),
                        z2: bwd.z2(i, j),
                        u: fwd.u(i, j),
                    };
                    let h = fwd.h(i, j);
                    let kj = &k_i[j * m..(j + 1) * m];
                    let ph = &pf.mean[j * n..(j + 1) * n];
                    let qq1 = &pf.zw[j * n..(j + 1) * n];
                    let qq2 = &pf.zy[j * n..(j + 1) * n];
                    let big_r2 = rf.zy[j];
                    let shifted = ws.shifted_r2(c, &pt, kj, ph, big_r2);
                    ws.partials(c, &pt, kj, ph, qq1, qq2, shifted);
                    for a in 0..n {
                        pv[a] = ph[a] + (ws.hx[a] + qq2[a] * h) * dt;
                    }
                    *rv = rf.mean[j] + (c.running_cost(&pt) + big_r2 * h) * dt;
                    ws.non_finite_partial()
                },
            )
            .collect();
        if let Some(name) = bad.iter().flatten().next() {
            return Err(Error::NonFiniteTerm(format!("Hamiltonian partial {name} on step {i}")));
        }
        if let Some(j) = (0..np).find(|j| !r_cur[*j].is_finite() || p_cur[j * n..(j + 1) * n].iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite {
                what: "adjoint (p, r)".into(),
                path: j,
                step: i,
            });
        }
    }
    diagnostics.reverse();
    Ok(AdjointTrajectories {
        grid,
        n_paths: np,
        n,
        m,
        k,
        p,
        p_hat,
        q1,
        q2,
        r,
        r1,
        r2,
        diagnostics,
        noise_fp: fwd.noise_fp,
        control_fp: fwd.control_fp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::simulate_forward;
    use crate::model::{ControlProcess, ControlSet, Map1, Map3, Map6, ScalarCoefficients};
    use crate::paths::{make_time_grid, sample_noise};

    fn walk(coeffs: ScalarCoefficients) -> ProblemSpec {
        let coeffs = coeffs.with_sigma1(Map3::constant(1.0));
        ProblemSpec::scalar("walk", 1.0, 0.2, ControlSet::interval(-1.0, 1.0).unwrap(), coeffs).unwrap()
    }

    fn run(spec: &ProblemSpec, steps: usize, paths: usize, seed: u64) -> (ForwardTrajectories, BackwardTrajectories, NoiseBundle) {
        let g = make_time_grid(spec.horizon, steps).unwrap();
        let noise = sample_noise(&g, paths, seed).unwrap();
        let u = ControlProcess::constant(g, &[0.0], &spec.control_set).unwrap();
        let fwd = simulate_forward(spec, &u, &noise).unwrap();
        let bwd = solve_backward(spec, &fwd, &noise, BasisSpec::default()).unwrap();
        (fwd, bwd, noise)
    }

    #[test]
    fn identity_terminal_map_gives_martingale() {
        let spec = walk(ScalarCoefficients::default());
        let (fwd, bwd, _) = run(&spec, 16, 20_000, 1);
        for i in 0..16 {
            let rms = |f: &dyn Fn(usize) -> f64| ((0..20_000).map(|j| f(j).powi(2)).sum::<f64>() / 20_000.0).sqrt();
            // Accumulated sample-mean error is about 1/sqrt(paths).
            assert!(rms(&|j| bwd.y(i, j)[0] - fwd.x(i, j)[0]) < 0.03);
            assert!(rms(&|j| bwd.z1(i, j)[0] - 1.0) < 0.05);
            assert!(rms(&|j| bwd.z2(i, j)[0]) < 0.05);
        }
    }

    #[test]
    fn constant_terminal_data() {
        let spec = walk(ScalarCoefficients::default().with_terminal_map(Map1::new(|_| 2.5, |_| 0.0)));
        let (_, bwd, _) = run(&spec, 8, 2_000, 2);
        for i in 0..8 {
            for j in 0..2_000 {
                assert!((bwd.y(i, j)[0] - 2.5).abs() < 1e-8);
                assert!(bwd.z1(i, j)[0].abs() < 1e-8 && bwd.z2(i, j)[0].abs() < 1e-8);
            }
        }
    }

    #[test]
    fn terminal_and_initial_pinning() {
        let g_w = 0.7;
        let spec = walk(
            ScalarCoefficients::default()
                .with_running_cost(Map6::new(
                    |_, x, _, _, _, u| x * x + u * u,
                    |_, x, _, _, _, _| 2.0 * x,
                    |_, _, _, _, _, _| 0.0,
                    |_, _, _, _, _, _| 0.0,
                    |_, _, _, _, _, _| 0.0,
                    |_, _, _, _, _, u| 2.0 * u,
                ))
                .with_terminal_cost(Map1::new(|x| x.cosh(), |x| x.sinh()))
                .with_initial_cost(Map1::new(move |y| g_w * y, move |_| g_w))
                .with_driver(Map6::new(
                    |_, x, y, _, _, _| 0.3 * y + x.sin(),
                    |_, x, _, _, _, _| x.cos(),
                    |_, _, _, _, _, _| 0.3,
                    |_, _, _, _, _, _| 0.0,
                    |_, _, _, _, _, _| 0.0,
                    |_, _, _, _, _, _| 0.0,
                ))
                .with_terminal_map(Map1::new(|x| 2.0 * x, |_| 2.0)),
        );
        let (fwd, bwd, noise) = run(&spec, 8, 3_000, 3);
        let adj = solve_adjoint(&spec, &fwd, &bwd, &noise, BasisSpec::default()).unwrap();
        for j in 0..3_000 {
            let x = fwd.x(8, j)[0];
            assert_eq!(bwd.y(8, j)[0], 2.0 * x);
            assert_eq!(adj.r(8, j), x.cosh());
            assert_eq!(adj.p(8, j)[0], x.sinh() - 2.0 * adj.k(8, j)[0]);
            assert_eq!(adj.k(0, j)[0], -g_w);
        }
    }

    #[test]
    fn zero_costs_give_zero_r() {
        let spec = walk(ScalarCoefficients::default());
        let (fwd, bwd, noise) = run(&spec, 8, 2_000, 4);
        let adj = solve_adjoint(&spec, &fwd, &bwd, &noise, BasisSpec::default()).unwrap();
        for i in 0..8 {
            for j in 0..2_000 {
                assert!(adj.r(i, j).abs() < 1e-8);
                assert!(adj.r1(i, j).abs() < 1e-8 && adj.r2(i, j).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn mismatched_noise_is_rejected() {
        let spec = walk(ScalarCoefficients::default());
        let (fwd, _, _) = run(&spec, 8, 500, 5);
        let other = sample_noise(fwd.grid(), 500, 6).unwrap();
        assert!(matches!(
            solve_backward(&spec, &fwd, &other, BasisSpec::default()),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn csv_exports_have_one_row_per_node() {
        let spec = walk(ScalarCoefficients::default());
        let (fwd, bwd, noise) = run(&spec, 4, 100, 7);
        let adj = solve_adjoint(&spec, &fwd, &bwd, &noise, BasisSpec::default()).unwrap();
        let mut buf = Vec::new();
        bwd.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 100 * 5);
        let mut buf = Vec::new();
        adj.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 100 * 5);
        let d: Vec<StepDiagnostics> = serde_json::from_str(&bwd.diagnostics_json().unwrap()).unwrap();
        assert_eq!(d.len(), 4);
    }
}
