use nearopt::bsde::solve_backward;
use nearopt::forward::{evaluate_cost_weak_on, simulate_forward, strong_cost};
use nearopt::model::{
    make_double_well_instance, make_lq_instance, make_scalar_nonlinear_instance, ControlProcess, ControlSet,
    DoubleWellParams, LqParams, Map1, Map3, ProblemSpec, ScalarCoefficients, ScalarNonlinearParams,
};
use nearopt::oracle::enumerate_lattice;
use nearopt::paths::{make_time_grid, sample_noise};
use nearopt::regression::BasisSpec;
use nearopt::stats::weighted_estimate;
use statrs::distribution::{ContinuousCDF, Normal};

fn builtins() -> Vec<ProblemSpec> {
    vec![
        make_lq_instance(&LqParams::default()).unwrap(),
        make_scalar_nonlinear_instance(&ScalarNonlinearParams::default()).unwrap(),
        make_double_well_instance(&DoubleWellParams::default()).unwrap(),
    ]
}

#[test]
fn gaussian_increments_pass_kolmogorov_smirnov() {
    let grid = make_time_grid(1.0, 4).unwrap();
    let noise = sample_noise(&grid, 10_000, 42).unwrap();
    let scale = grid.dt().sqrt();
    let std = Normal::new(0.0, 1.0).unwrap();
    for stream in 0..2 {
        let mut z: Vec<f64> = (0..noise.n_paths())
            .map(|j| if stream == 0 { noise.dw(j, 2) } else { noise.dy(j, 2) } / scale)
            .collect();
        z.sort_by(f64::total_cmp);
        let n = z.len() as f64;
        let d = z
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let c = std.cdf(*v);
                (c - i as f64 / n).abs().max((((i + 1) as f64) / n - c).abs())
            })
            .fold(0.0, f64::max);
        // 1% critical value of the one-sample statistic.
        assert!(d < 1.628 / n.sqrt(), "KS statistic {d}");
    }
}

#[test]
fn density_is_a_positive_martingale() {
    let spec = make_scalar_nonlinear_instance(&ScalarNonlinearParams::default()).unwrap();
    let grid = make_time_grid(1.0, 32).unwrap();
    let noise = sample_noise(&grid, 100_000, 5).unwrap();
    let u = ControlProcess::constant(grid, &[-0.4], &spec.control_set).unwrap();
    let fwd = simulate_forward(&spec, &u, &noise).unwrap();
    assert!((0..=32).all(|i| fwd.rho_at(i).iter().all(|r| *r > 0.0)));
    let e = weighted_estimate(fwd.rho_at(32), None);
    assert!((e.mean - 1.0).abs() <= 3.0 * e.stderr, "{e:?}");
}

#[test]
fn lq_cost_matches_the_lattice_in_expectation() {
    // Binomial and Gaussian increments share the first two moments, which is
    // all a quadratic cost sees.
    let spec = make_lq_instance(&LqParams::default()).unwrap();
    let grid = make_time_grid(1.0, 8).unwrap();
    let u = ControlProcess::constant(grid, &[0.0], &spec.control_set).unwrap();
    let exact = enumerate_lattice(&spec, &u).unwrap().j;
    let mc = strong_cost(&spec, &u, &sample_noise(&grid, 50_000, 8).unwrap(), BasisSpec::default()).unwrap();
    assert!((mc.j - exact).abs() <= 3.0 * mc.stderr, "{} vs {exact}", mc.j);
}

#[test]
fn weak_and_strong_agree_on_every_builtin() {
    for spec in builtins() {
        let grid = make_time_grid(spec.horizon, 16).unwrap();
        let u = ControlProcess::constant(grid, &[0.2], &spec.control_set).unwrap();
        let s = strong_cost(&spec, &u, &sample_noise(&grid, 40_000, 1).unwrap(), BasisSpec::default()).unwrap();
        let w = evaluate_cost_weak_on(&spec, &u, &sample_noise(&grid, 40_000, 2).unwrap(), BasisSpec::default()).unwrap();
        assert!(
            (s.j - w.j).abs() <= 3.0 * s.stderr.hypot(w.stderr),
            "{}: strong {} weak {}",
            spec.name,
            s.j,
            w.j
        );
    }
}

#[test]
fn linear_terminal_cost_recovers_initial_state() {
    let coeffs = ScalarCoefficients::default()
        .with_sigma1(Map3::constant(1.0))
        .with_terminal_cost(Map1::identity());
    let spec = ProblemSpec::scalar("mean", 1.0, 0.7, ControlSet::interval(-1.0, 1.0).unwrap(), coeffs).unwrap();
    let grid = make_time_grid(1.0, 8).unwrap();
    let u = ControlProcess::constant(grid, &[0.0], &spec.control_set).unwrap();
    let c = strong_cost(&spec, &u, &sample_noise(&grid, 100_000, 3).unwrap(), BasisSpec::default()).unwrap();
    assert!((c.j - 0.7).abs() <= 3.0 * c.stderr);
}

/// `sup_i mean_j |v|^m` for the forward state, backward value and density.
fn sup_moments(spec: &ProblemSpec, seed: u64) -> [f64; 6] {
    let grid = make_time_grid(spec.horizon, 16).unwrap();
    let noise = sample_noise(&grid, 20_000, seed).unwrap();
    let u = ControlProcess::constant(grid, &[0.3], &spec.control_set).unwrap();
    let fwd = simulate_forward(spec, &u, &noise).unwrap();
    let bwd = solve_backward(spec, &fwd, &noise, BasisSpec::default()).unwrap();
    let mut out = [0.0f64; 6];
    for i in 0..=16 {
        for (slot, m) in [2, 4].into_iter().enumerate() {
            let avg = |f: &dyn Fn(usize) -> f64| (0..noise.n_paths()).map(|j| f(j).abs().powi(m)).sum::<f64>() / 20_000.0;
            out[slot] = out[slot].max(avg(&|j| fwd.x(i, j)[0]));
            out[2 + slot] = out[2 + slot].max(avg(&|j| bwd.y(i, j)[0]));
            out[4 + slot] = out[4 + slot].max(avg(&|j| fwd.rho(i, j)));
        }
    }
    out
}

#[test]
fn sup_norm_moments_are_stable_across_seeds() {
    for spec in builtins() {
        let runs: Vec<[f64; 6]> = (1..=5).map(|s| sup_moments(&spec, s)).collect();
        for k in 0..6 {
            let hi = runs.iter().map(|r| r[k]).fold(0.0, f64::max);
            let lo = runs.iter().map(|r| r[k]).fold(f64::INFINITY, f64::min);
            assert!(hi.is_finite() && hi <= 1.2 * lo, "{} moment {k}: {lo} .. {hi}", spec.name);
        }
    }
}
