use flowlab::expr::ScalarFn;
use flowlab::finsler::MetricState;
use flowlab::flow::{FlowSpec, TimeGrid};
use flowlab::grid::{GridGeometry, ScalarField};
use flowlab::pde::{check_cfl, solve, step_solution, PdeParams, SolveSetup, SolutionTrajectory};
use flowlab::Error;

fn zero() -> ScalarFn {
    ScalarFn::constant(0.0)
}

fn run(m: &MetricState, u0: &ScalarField, params: &PdeParams, flow: &FlowSpec, tg: TimeGrid) -> SolutionTrajectory {
    solve(&SolveSetup {
        u0,
        metric: m,
        measure_phi: &zero(),
        params,
        flow,
        time_grid: tg,
        save_every: tg.steps.max(1),
    })
    .unwrap()
}

/// `2 + sin x1 + 0.5 cos(x1 + x2)` evolved by the flat heat equation.
fn fourier(x: [f64; 2], t: f64) -> f64 {
    2.0 + (-t).exp() * x[0].sin() + 0.5 * (-2.0 * t).exp() * (x[0] + x[1]).cos()
}

fn heat_error(n: usize, dt: f64, t_end: f64) -> f64 {
    heat_error_against(n, dt, t_end, fourier)
}

fn heat_error_against(n: usize, dt: f64, t_end: f64, oracle: impl Fn([f64; 2], f64) -> f64) -> f64 {
    let g = GridGeometry::torus(n, 8).unwrap();
    let m = MetricState::euclidean(g);
    let u0 = ScalarField::from_fn(&g, |x| oracle(x, 0.0));
    let traj = run(&m, &u0, &PdeParams::heat(), &FlowSpec::conformal(0.0), TimeGrid::new(0.0, t_end, dt).unwrap());
    assert!(traj.completed());
    let last = traj.snapshots.last().unwrap();
    let exact = ScalarField::from_fn(&g, |x| oracle(x, t_end));
    let sq: f64 = last.values.iter().zip(&exact.values).map(|(a, b)| (a - b).powi(2)).sum();
    (sq / g.len() as f64).sqrt()
}

#[test]
fn flat_heat_matches_fourier_solution() {
    let err = heat_error(48, 2.5e-4, 0.25);
    assert!(err <= 5e-3, "L2 error {err}");
}

#[test]
fn flat_heat_spatial_order() {
    let (e1, e2) = (heat_error(16, 1e-4, 0.1), heat_error(32, 1e-4, 0.1));
    assert!((e1 / e2).log2() >= 1.8, "{e1} {e2}");
}

#[test]
fn flat_heat_temporal_order() {
    // decay rates of the five-point operator remove the spatial error
    let n = 32;
    let h = std::f64::consts::TAU / n as f64;
    let mu = 4.0 / (h * h) * (0.5 * h).sin().powi(2);
    let semi = move |x: [f64; 2], t: f64| {
        2.0 + (-mu * t).exp() * x[0].sin() + 0.5 * (-2.0 * mu * t).exp() * (x[0] + x[1]).cos()
    };
    let (e1, e2) = (heat_error_against(n, 4e-3, 0.4, semi), heat_error_against(n, 2e-3, 0.4, semi));
    assert!((e1 / e2).log2() >= 0.9, "{e1} {e2}");
}

#[test]
fn heat_mode_decays_at_unit_rate() {
    let g = GridGeometry::torus(32, 8).unwrap();
    let m = MetricState::euclidean(g);
    let u0 = ScalarField::from_fn(&g, |x| 2.0 + x[0].sin());
    let traj = run(&m, &u0, &PdeParams::heat(), &FlowSpec::conformal(0.0), TimeGrid::new(0.0, 0.5, 1e-3).unwrap());
    let amp = traj.snapshots.last().unwrap().max() - 2.0;
    assert!((amp - (-0.5f64).exp()).abs() < 2e-3, "{amp}");
}

#[test]
fn constant_solution_grows_exponentially() {
    let g = GridGeometry::torus(8, 8).unwrap();
    let m = MetricState::euclidean(g);
    let u0 = ScalarField::constant(&g, 1.5);
    let params = PdeParams { r1: ScalarFn::constant(0.4), ..PdeParams::heat() };
    let err = |dt: f64| {
        let traj = run(&m, &u0, &params, &FlowSpec::conformal(0.0), TimeGrid::new(0.0, 1.0, dt).unwrap());
        (traj.snapshots.last().unwrap().values[5] - 1.5 * 0.4f64.exp()).abs()
    };
    let (e1, e2) = (err(0.01), err(0.005));
    assert!(e1 < 0.01 && (e1 / e2).log2() > 0.9, "{e1} {e2}");
}

#[test]
fn unit_constant_is_stationary() {
    let g = GridGeometry::torus(12, 16).unwrap();
    let m = MetricState::randers(
        g,
        ScalarFn::constant(1.0),
        zero(),
        ScalarFn::constant(1.0),
        ScalarFn::parse("0.1*sin(x2)").unwrap(),
        zero(),
    )
    .unwrap();
    let u0 = ScalarField::constant(&g, 1.0);
    let traj = run(&m, &u0, &PdeParams::heat(), &FlowSpec::conformal(0.5), TimeGrid::new(0.0, 0.2, 0.01).unwrap());
    assert!(traj.completed());
    for s in &traj.snapshots {
        assert!(s.values.iter().all(|&v| v == 1.0));
    }
    assert_eq!((traj.delta_emp, traj.b_emp), (1.0, 1.0));
    assert_eq!((traj.sigma1_emp, traj.sigma2_emp), (0.0, 0.0));
}

#[test]
fn maximum_principle_under_conformal_flow() {
    let g = GridGeometry::torus(24, 16).unwrap();
    let m = MetricState::randers(
        g,
        ScalarFn::constant(1.0),
        zero(),
        ScalarFn::constant(1.0),
        ScalarFn::parse("0.1*sin(x2)").unwrap(),
        zero(),
    )
    .unwrap();
    let u0 = ScalarField::from_fn(&g, |x| 2.0 + 0.1 * x[0].sin());
    let traj = run(&m, &u0, &PdeParams::heat(), &FlowSpec::conformal(0.5), TimeGrid::new(0.0, 0.3, 5e-3).unwrap());
    assert!(traj.completed());
    for w in traj.steps.windows(2) {
        assert!(w[1].u_max <= w[0].u_max + 1e-14, "{w:?}");
        assert!(w[1].u_min >= w[0].u_min - 1e-14, "{w:?}");
    }
    // conformal scaling by e^{-lambda t} raises g^{-1} by e^{2 lambda t}
    let last = traj.steps.last().unwrap();
    assert!((last.lambda_max / traj.steps[0].lambda_max - (2.0 * 0.5 * 0.3f64).exp()).abs() < 1e-12);
}

#[test]
fn coefficient_bounds_are_tracked() {
    let g = GridGeometry::torus(16, 8).unwrap();
    let m = MetricState::euclidean(g);
    let u0 = ScalarField::from_fn(&g, |x| 2.0 + 0.2 * x[0].sin());
    let params = PdeParams {
        r1: ScalarFn::parse("0.1 + 0.05*sin(x1)").unwrap(),
        r2: ScalarFn::parse("0.02*t").unwrap(),
        ..PdeParams::heat()
    };
    let traj = run(&m, &u0, &params, &FlowSpec::conformal(0.0), TimeGrid::new(0.0, 0.5, 0.01).unwrap());
    // sup of 0.1 + 0.05 sin x1 on the 16-node grid is attained at x1 = pi/2
    assert!((traj.sigma1_emp - 0.15).abs() < 1e-15);
    // |d R1| = 0.05 |cos x1| up to the central-difference factor sin(h)/h
    let h = std::f64::consts::TAU / 16.0;
    assert!((traj.sigma2_emp - 0.05 * h.sin() / h).abs() < 1e-12, "{}", traj.sigma2_emp);
    assert!(traj.delta_emp > 0.0 && traj.b_emp >= traj.delta_emp);
}

#[test]
fn solve_is_deterministic() {
    let g = GridGeometry::torus(16, 16).unwrap();
    let m = MetricState::randers(
        g,
        ScalarFn::constant(1.0),
        zero(),
        ScalarFn::constant(1.0),
        ScalarFn::parse("0.1*sin(x2)").unwrap(),
        zero(),
    )
    .unwrap();
    let u0 = ScalarField::from_fn(&g, |x| 2.0 + 0.2 * x[0].sin());
    let params = PdeParams {
        alpha: 2.0,
        beta: 1.0,
        r1: ScalarFn::constant(0.1),
        r2: ScalarFn::constant(0.05),
        r3: ScalarFn::constant(0.05),
    };
    let tg = TimeGrid::new(0.0, 0.1, 0.01).unwrap();
    let a = run(&m, &u0, &params, &FlowSpec::conformal(0.2), tg);
    let b = run(&m, &u0, &params, &FlowSpec::conformal(0.2), tg);
    for (x, y) in a.snapshots.iter().zip(&b.snapshots) {
        assert_eq!(x.values, y.values);
    }
    assert_eq!(a.steps, b.steps);
}

#[test]
fn cfl_violation_is_rejected_up_front() {
    let g = GridGeometry::torus(32, 8).unwrap();
    let m = MetricState::euclidean(g);
    let tg = TimeGrid::new(0.0, 1.0, 0.01).unwrap();
    let err = check_cfl(&m, &FlowSpec::conformal(0.0), &tg).unwrap_err();
    let Error::Cfl { limit, .. } = err else { panic!("{err}") };
    let h = std::f64::consts::TAU / 32.0;
    assert!((limit - 0.9 * h * h / 4.0).abs() < 1e-15);
    // a shrinking metric tightens the limit over the run
    let tg = TimeGrid::new(0.0, 1.0, 0.0025).unwrap();
    assert!(check_cfl(&m, &FlowSpec::conformal(0.0), &tg).is_ok());
    assert!(check_cfl(&m, &FlowSpec::conformal(1.5), &tg).is_err());
}

#[test]
fn positivity_loss_stops_the_run() {
    let g = GridGeometry::torus(8, 8).unwrap();
    let m = MetricState::euclidean(g);
    let u0 = ScalarField::constant(&g, 1.0);
    let params = PdeParams { r1: ScalarFn::constant(-30.0), ..PdeParams::heat() };
    let traj = run(&m, &u0, &params, &FlowSpec::conformal(0.0), TimeGrid::new(0.0, 1.0, 0.05).unwrap());
    let Some(Error::PositivityLoss { time, min }) = traj.failure else { panic!("{:?}", traj.failure) };
    assert!((time - 0.05).abs() < 1e-15 && min < 0.0);
    assert_eq!(traj.snapshots.len(), 1);
}

#[test]
fn non_integer_beta_needs_unit_lower_bound() {
    let g = GridGeometry::torus(8, 8).unwrap();
    let m = MetricState::euclidean(g);
    let u0 = ScalarField::constant(&g, 0.5);
    let params = PdeParams { beta: 1.5, ..PdeParams::heat() };
    let err = solve(&SolveSetup {
        u0: &u0,
        metric: &m,
        measure_phi: &zero(),
        params: &params,
        flow: &FlowSpec::conformal(0.0),
        time_grid: TimeGrid::new(0.0, 0.1, 0.01).unwrap(),
        save_every: 1,
    })
    .unwrap_err();
    assert!(matches!(err, Error::Domain(_)));
    assert!(step_solution(&u0, &m, &zero(), &params, 0.01, 0.0).is_err());
}
