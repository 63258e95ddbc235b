use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nearopt::bsde::{solve_adjoint, solve_backward};
use nearopt::forward::simulate_forward;
use nearopt::model::{make_lq_instance, ControlProcess, LqParams, Map1, ProblemSpec, ScalarCoefficients};
use nearopt::nearopt::{
    analyze_control, certify_necessary, cost_difference_representation, min_gap_over_a, necessary_gap, Verdict,
};
use nearopt::optimizer::{constant_direction, order_study, smp_descent_on, DescentParams};
use nearopt::oracle::riccati_lq;
use nearopt::paths::{make_time_grid, sample_noise};
use nearopt::regression::BasisSpec;

fn lq() -> ProblemSpec {
    make_lq_instance(&LqParams::default()).unwrap()
}

#[test]
fn riccati_optimum_has_no_descent_direction() {
    let spec = lq();
    let grid = make_time_grid(1.0, 16).unwrap();
    let noise = sample_noise(&grid, 20_000, 21).unwrap();
    let ric = riccati_lq(&LqParams::default(), 2000).unwrap();
    let u_star = ric.open_loop_control(&grid).unwrap();
    let a = analyze_control(&spec, &u_star, &noise, BasisSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let values = (0..16).map(|_| spec.control_set.sample(&mut rng)).collect();
        let u = ControlProcess::new(grid, values, &spec.control_set).unwrap();
        let g = necessary_gap(&a, &u).unwrap();
        assert!(g.mean >= -3.0 * g.stderr, "{g:?}");
    }
    let mg = min_gap_over_a(&spec, &a).unwrap();
    assert!(mg.gap >= -3.0 * mg.stderr, "{mg:?}");
    let cert = certify_necessary(&spec, &u_star, 0.0, 1.0, &noise, BasisSpec::default()).unwrap();
    assert_eq!(cert.verdict, Verdict::NecessaryHolds);
}

#[test]
fn perturbed_optima_are_certified_and_far_controls_are_not() {
    let spec = lq();
    let grid = make_time_grid(1.0, 16).unwrap();
    let noise = sample_noise(&grid, 20_000, 22).unwrap();
    let ric = riccati_lq(&LqParams::default(), 2000).unwrap();
    let u_star = ric.open_loop_control(&grid).unwrap();
    let dir = constant_direction(&grid, &[1.0]);
    let deltas = [0.05, 0.1, 0.2, 0.4];
    let study = order_study(&spec, &u_star, &deltas, &dir, Some(ric.open_loop_cost), &noise, BasisSpec::default()).unwrap();
    assert!(study.fit.exponent >= 0.4, "{:?}", study.fit);
    let c = 10.0 * study.fit.constant;
    for (row, delta) in study.rows.iter().zip(deltas) {
        let u = ControlProcess::projected(grid, vec![vec![-0.5 + delta]; 16], &spec.control_set).unwrap();
        let cert = certify_necessary(&spec, &u, row.epsilon, c, &noise, BasisSpec::default()).unwrap();
        assert_eq!(cert.verdict, Verdict::NecessaryHolds);
    }
    // Far from optimal, with a claimed epsilon that is far too small.
    let far = ControlProcess::constant(grid, &[2.0], &spec.control_set).unwrap();
    let cert = certify_necessary(&spec, &far, 1e-8, study.fit.constant, &noise, BasisSpec::default()).unwrap();
    assert_eq!(cert.verdict, Verdict::NecessaryViolated);
}

#[test]
fn min_gap_is_linear_in_the_perturbation_size() {
    // With J(u* + delta) - J(u*) = delta^2 the gap behaves like -(3 delta + 2 delta^2):
    // halving delta roughly halves it.
    let spec = lq();
    let grid = make_time_grid(1.0, 16).unwrap();
    let noise = sample_noise(&grid, 20_000, 23).unwrap();
    let gap = |delta: f64| {
        let u = ControlProcess::constant(grid, &[-0.5 + delta], &spec.control_set).unwrap();
        let a = analyze_control(&spec, &u, &noise, BasisSpec::default()).unwrap();
        min_gap_over_a(&spec, &a).unwrap().gap
    };
    let (g1, g2) = (gap(0.2), gap(0.1));
    let expected = |d: f64| -(3.0 * d + 2.0 * d * d);
    assert!((g1 / expected(0.2) - 1.0).abs() < 0.05, "{g1}");
    assert!((g2 / expected(0.1) - 1.0).abs() < 0.05, "{g2}");
    assert!((g1 / g2 - 0.68 / 0.32).abs() < 0.15, "{g1} {g2}");
}

#[test]
fn cost_difference_dominates_the_gap_term() {
    let spec = lq();
    let grid = make_time_grid(1.0, 8).unwrap();
    let noise = sample_noise(&grid, 10_000, 24).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..10 {
        let draw = |rng: &mut ChaCha8Rng| {
            let v = (0..8).map(|_| spec.control_set.sample(rng)).collect();
            ControlProcess::new(grid, v, &spec.control_set).unwrap()
        };
        let (ue, u) = (draw(&mut rng), draw(&mut rng));
        let a = analyze_control(&spec, &ue, &noise, BasisSpec::default()).unwrap();
        let d = cost_difference_representation(&spec, &u, &a, &noise, BasisSpec::default()).unwrap();
        assert!(d.rhs >= d.gap_term - 3.0 * d.rhs_stderr.hypot(d.gap_stderr), "{d:?}");
        assert!((d.lhs - d.rhs).abs() <= 3.0 * d.combined_stderr(), "{d:?}");
    }
}

#[test]
fn gap_shrinks_along_descent_iterates() {
    let spec = lq();
    let grid = make_time_grid(1.0, 8).unwrap();
    let noise = sample_noise(&grid, 20_000, 25).unwrap();
    // A ramp, so that one line search along the vertex direction is not enough.
    let ramp = (0..8).map(|i| vec![-2.0 + 0.5 * i as f64]).collect();
    let u0 = ControlProcess::new(grid, ramp, &spec.control_set).unwrap();
    let params = DescentParams {
        max_iter: 15,
        n_paths: 20_000,
        ..DescentParams::default()
    };
    let trace = smp_descent_on(&spec, &u0, &params, &noise).unwrap();
    assert!(trace.records.len() > 2);
    for w in trace.records.windows(2) {
        assert!(w[1].min_gap.abs() <= w[0].min_gap.abs() + 3.0 * w[1].gap_stderr, "{:?}", w);
        assert!(w[1].cost <= w[0].cost + 3.0 * w[1].stderr);
    }
}

#[test]
fn descent_from_the_optimum_stops_at_once() {
    let spec = lq();
    let grid = make_time_grid(1.0, 16).unwrap();
    let noise = sample_noise(&grid, 20_000, 26).unwrap();
    let u_star = riccati_lq(&LqParams::default(), 2000).unwrap().open_loop_control(&grid).unwrap();
    let trace = smp_descent_on(&spec, &u_star, &DescentParams::default(), &noise).unwrap();
    assert_eq!(trace.records.len(), 1, "{:?}", trace.records.iter().map(|r| (r.min_gap, r.gap_stderr, r.cost)).collect::<Vec<_>>());
    assert!(trace.records[0].min_gap >= -3.0 * trace.records[0].gap_stderr);
}

#[test]
fn adjoint_initial_value_is_pinned_by_linear_gamma() {
    let coeffs = ScalarCoefficients::default()
        .with_sigma1(nearopt::model::Map3::constant(1.0))
        .with_initial_cost(Map1::new(|y| 0.7 * y, |_| 0.7));
    let spec = ProblemSpec::scalar(
        "lin_gamma",
        1.0,
        0.0,
        nearopt::model::ControlSet::interval(-1.0, 1.0).unwrap(),
        coeffs,
    )
    .unwrap();
    let grid = make_time_grid(1.0, 8).unwrap();
    let noise = sample_noise(&grid, 2_000, 27).unwrap();
    let u = ControlProcess::constant(grid, &[0.0], &spec.control_set).unwrap();
    let fwd = simulate_forward(&spec, &u, &noise).unwrap();
    let bwd = solve_backward(&spec, &fwd, &noise, BasisSpec::default()).unwrap();
    let adj = solve_adjoint(&spec, &fwd, &bwd, &noise, BasisSpec::default()).unwrap();
    assert!((0..2_000).all(|j| adj.k(0, j)[0] == -0.7));
}

#[test]
fn excess_cost_grows_quadratically() {
    let spec = lq();
    let grid = make_time_grid(1.0, 16).unwrap();
    let noise = sample_noise(&grid, 20_000, 28).unwrap();
    let ric = riccati_lq(&LqParams::default(), 2000).unwrap();
    let u_star = ric.open_loop_control(&grid).unwrap();
    let dir = constant_direction(&grid, &[1.0]);
    let fam = nearopt::optimizer::perturbation_family(
        &spec,
        &u_star,
        &[0.1, 0.2, 0.4],
        &dir,
        Some(ric.open_loop_cost),
        &noise,
        BasisSpec::default(),
    )
    .unwrap();
    for w in fam.windows(2) {
        let ratio = w[1].epsilon / w[0].epsilon;
        assert!((3.0..=5.0).contains(&ratio), "{ratio}");
    }
}
