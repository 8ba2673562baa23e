//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::f64::consts::{E, TAU};
use std::time::Instant;

use flowlab::checker::{
    c1_value, epsilons_from_weights, hamilton_bound, hamilton_constants, harnack_constants, harnack_pairs,
    optimize_epsilons, shi_bound, shi_bound_from, shi_constants, BoundInputs, InputSource,
};
use flowlab::connection::{chern_coefficients, flag_curvature, s_pair};
use flowlab::expr::ScalarFn;
use flowlab::finsler::{cartan_tensor, sphere_bundle_samples, DirectionSample, MetricState};
use flowlab::flow::{gradient_norm_evolution_residual, inverse_evolution_residual, step_metric, FlowSpec, TimeGrid};
use flowlab::geodesic::NeighborStencil;
use flowlab::grid::{GridGeometry, ScalarField};
use flowlab::laplacian::{bochner_residual, finsler_laplacian, kato_gap, kato_tolerance};
use flowlab::pde::{solve, PdeParams, SolveSetup};
use flowlab::run::{distance_table, run};
use flowlab::scenario::{canonical, Scenario};
use flowlab::{Mat2, Vec2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn order(coarse: f64, fine: f64) -> f64 {
    (coarse / fine).log2()
}

fn zero() -> ScalarFn {
    ScalarFn::constant(0.0)
}

/// `a = e^{0.2 sin x1} I`.
fn conformal(n: usize, ntheta: usize) -> MetricState {
    let e = ScalarFn::parse("exp(0.2*sin(x1))").unwrap();
    MetricState::riemannian(GridGeometry::torus(n, ntheta).unwrap(), e.clone(), zero(), e).unwrap()
}

fn tilted_a(x: [f64; 2]) -> (Mat2, [Mat2; 2]) {
    let a = Mat2::new(1.0 + 0.2 * x[1].sin(), 0.1 * x[0].cos(), 0.1 * x[0].cos(), 1.0 + 0.1 * x[0].sin());
    let d1 = Mat2::new(0.0, -0.1 * x[0].sin(), -0.1 * x[0].sin(), 0.1 * x[0].cos());
    let d2 = Mat2::new(0.2 * x[1].cos(), 0.0, 0.0, 0.0);
    (a, [d1, d2])
}

/// Zero-drift Randers metric with a non-diagonal, non-constant `a`.
fn tilted() -> MetricState {
    MetricState::randers(
        GridGeometry::torus(16, 16).unwrap(),
        ScalarFn::parse("1 + 0.2*sin(x2)").unwrap(),
        ScalarFn::parse("0.1*cos(x1)").unwrap(),
        ScalarFn::parse("1 + 0.1*sin(x1)").unwrap(),
        zero(),
        zero(),
    )
    .unwrap()
}

fn riemannian_reduction() -> Outcome {
    let m = tilted();
    // the Riemannian volume measure e^Phi dx = sqrt(det a) dx
    let volume = ScalarFn::spatial(|x| 0.5 * tilted_a(x).0.determinant().ln());
    let mut cartan: f64 = 0.0;
    let mut s_max: f64 = 0.0;
    for s in sphere_bundle_samples(m.grid()) {
        cartan = cartan.max(cartan_tensor(&m, &s).unwrap().max_abs());
        let (sc, sd) = s_pair(&m, &volume, &s).unwrap();
        s_max = s_max.max(sc.abs()).max(sd.abs());
    }

    let mut christoffel: f64 = 0.0;
    for x in [[0.3, 0.9], [2.2, 4.1], [5.0, 1.7]] {
        let (a, da) = tilted_a(x);
        let ainv = a.try_inverse().unwrap();
        for y in [Vec2::new(1.0, 0.2), Vec2::new(-0.3, 0.8)] {
            let gamma = chern_coefficients(&m, &DirectionSample::new(x, y)).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    for k in 0..2 {
                        let exact: f64 = (0..2)
                            .map(|l| 0.5 * ainv[(i, l)] * (da[k][(l, j)] + da[j][(l, k)] - da[l][(j, k)]))
                            .sum();
                        christoffel = christoffel.max((gamma[i][j][k] - exact).abs());
                    }
                }
            }
        }
    }

    // Gaussian curvature of e^{2 phi} I is -e^{-2 phi} lap(phi); phi = 0.1 sin x1
    let cm = conformal(16, 16);
    let mut gauss: f64 = 0.0;
    for x in [[0.4, 1.1], [1.9, 3.3], [4.4, 5.8]] {
        let k = flag_curvature(&cm, &DirectionSample::new(x, Vec2::new(0.6, 0.8)), &Vec2::new(-0.8, 0.6)).unwrap();
        let exact = 0.1 * x[0].sin() * (-0.2 * x[0].sin()).exp();
        gauss = gauss.max((k - exact).abs());
    }

    // e^{-Phi} d_i(e^{Phi - 2 phi} d_i u) with Phi = 0.2 sin x2, u = sin x1 + 0.5 cos x2
    let classical = |x: [f64; 2]| {
        let phi = 0.1 * x[0].sin();
        let (dphi, dbig) = (0.1 * x[0].cos(), 0.2 * x[1].cos());
        let (ux, uy) = (x[0].cos(), -0.5 * x[1].sin());
        (-2.0 * phi).exp() * (-x[0].sin() - 0.5 * x[1].cos() - 2.0 * dphi * ux + dbig * uy)
    };
    let measure = ScalarFn::parse("0.2*sin(x2)").unwrap();
    let errs: Vec<f64> = [16, 32, 64]
        .iter()
        .map(|&n| {
            let m = conformal(n, 16);
            let u = ScalarField::from_fn(m.grid(), |x| x[0].sin() + 0.5 * x[1].cos());
            let lap = finsler_laplacian(&m, &measure, &u).unwrap();
            let exact = ScalarField::from_fn(m.grid(), classical);
            lap.values.iter().zip(&exact.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .collect();
    let orders = [order(errs[0], errs[1]), order(errs[1], errs[2])];
    let pass = cartan <= 1e-7 && s_max <= 1e-7 && christoffel <= 1e-7 && gauss <= 1e-4 && orders.iter().all(|&p| p >= 1.8);
    outcome(
        pass,
        format!(
            "max|C| = {cartan:.1e}, max|S|,|S'| = {s_max:.1e}, Christoffel err {christoffel:.1e}, \
             Gauss err {gauss:.1e}, Laplacian orders {:.2}/{:.2}",
            orders[0], orders[1]
        ),
    )
}

fn bochner() -> Outcome {
    let start = Instant::now();
    let res: Vec<f64> = [16, 32, 64]
        .iter()
        .map(|&n| {
            let m = conformal(n, 16);
            let u = ScalarField::from_fn(m.grid(), |x| 2.0 + 0.3 * x[0].sin() * x[1].cos());
            bochner_residual(&m, &zero(), &u).unwrap().max_abs()
        })
        .collect();
    let secs = start.elapsed().as_secs_f64();
    let orders = [order(res[0], res[1]), order(res[1], res[2])];
    outcome(
        orders.iter().all(|&p| p >= 1.5) && secs <= 30.0,
        format!(
            "residuals {:.2e}/{:.2e}/{:.2e}, orders {:.2}/{:.2}, {secs:.1} s",
            res[0], res[1], res[2], orders[0], orders[1]
        ),
    )
}

fn kato() -> Outcome {
    let scenario = canonical().build().unwrap();
    let m = &scenario.metric;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = f64::INFINITY;
    let mut failures = 0;
    for _ in 0..20 {
        let modes: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-2i32..=2) as f64,
                    rng.random_range(-2i32..=2) as f64,
                    rng.random_range(0.0..TAU),
                )
            })
            .collect();
        let u = ScalarField::from_fn(m.grid(), |x| {
            modes.iter().map(|&(c, a, b, p)| c * (a * x[0] + b * x[1] + p).sin()).sum::<f64>() + 0.5 * x[0].cos()
        });
        let gap = kato_gap(m, &u).unwrap().min();
        let tol = kato_tolerance(m, &u).unwrap();
        worst = worst.min(gap / tol.max(f64::MIN_POSITIVE));
        if gap < -tol {
            failures += 1;
        }
    }
    outcome(failures == 0, format!("20 fields, {failures} below tolerance, min gap/tolerance {worst:.2e}"))
}

fn evolution_residuals() -> Outcome {
    let spec = FlowSpec::conformal(0.5);
    let base = canonical().build().unwrap().metric;
    let f = ScalarField::from_fn(base.grid(), |x| x[0].sin() + 0.2 * x[1].cos());
    let dts = [1e-2, 5e-3, 2.5e-3];
    let grad: Vec<f64> = dts
        .iter()
        .map(|&dt| {
            let m1 = step_metric(&base, &spec, dt).unwrap();
            let m2 = step_metric(&m1, &spec, dt).unwrap();
            gradient_norm_evolution_residual([&base, &m1, &m2], &spec, [&f, &f, &f], dt).unwrap().max_abs()
        })
        .collect();
    let sampled = base.to_sampled().unwrap();
    let inv: Vec<f64> = dts.iter().map(|&dt| inverse_evolution_residual(&sampled, &spec, dt).unwrap()).collect();
    let slopes = |r: &[f64]| [order(r[0], r[1]), order(r[1], r[2])];
    let (sg, si) = (slopes(&grad), slopes(&inv));
    outcome(
        sg.iter().chain(&si).all(|&p| p >= 0.9),
        format!(
            "gradient-norm residual {:.2e}/{:.2e}/{:.2e} slopes {:.2}/{:.2}; inverse-metric residual slopes {:.2}/{:.2}",
            grad[0], grad[1], grad[2], sg[0], sg[1], si[0], si[1]
        ),
    )
}

fn inputs(k: f64, sigma1: f64, sigma2: f64, b: f64, delta: f64) -> BoundInputs {
    BoundInputs {
        k,
        l1: 0.0,
        sigma1,
        sigma2,
        b,
        delta,
        alpha: 2.0,
        beta: 1.0,
        rho: 1.0,
        n_weight: 4.0,
        source: InputSource::Declared,
    }
}

fn constants() -> Outcome {
    let rel = |a: f64, b: f64| if b == 0.0 { a.abs() } else { ((a - b) / b).abs() };
    let mut worst: f64 = 0.0;
    let mut check = |got: f64, want: f64| worst = worst.max(rel(got, want));

    let zero_case = inputs(0.0, 0.0, 0.0, 1.0, 1.0);
    let s = shi_constants(&zero_case).unwrap();
    check(s.m0, 2.0);
    check(s.m1, 0.0);
    check(s.gcal, 1.0);
    check(shi_bound(&zero_case).unwrap(), 1.0);
    check(shi_bound_from(2.0, 1.0, 0.0), 3.0);
    let eps = optimize_epsilons(&zero_case).unwrap();
    let (c1, c2) = hamilton_constants(&zero_case, eps).unwrap();
    check(c1, 0.0);
    check(c2, 0.0);
    check(hamilton_bound(&zero_case, c1, c2), 0.0);
    let (c3, c4) = harnack_constants(&zero_case, s.gcal, c1, c2);
    check(c3, 1.0);
    check(c4, 0.0);

    let k_one = inputs(1.0, 0.0, 0.0, E, 1.0);
    let eps = optimize_epsilons(&k_one).unwrap();
    let (c1, c2) = hamilton_constants(&k_one, eps).unwrap();
    check(c1, 0.0);
    check(c2, 1.0);
    let hb = hamilton_bound(&k_one, c1, c2);
    check(hb, 2.0 * 2f64.sqrt());
    let g = shi_constants(&k_one).unwrap().gcal;
    check(harnack_constants(&k_one, g, c1, c2).1 * k_one.rho, hb);

    check(c1_value(3.0, [1.0, 1.0, 1.0], 1.0, 1.0), 3.0);
    let e = epsilons_from_weights(4.0, 0.0);
    check(e[0], 1.0);
    check(e[1], 2.0);

    let doubled = [inputs(0.0, 0.0, 0.3, 2.0, 1.0), inputs(0.0, 0.0, 0.6, 2.0, 1.0)].map(|i| shi_constants(&i).unwrap());
    check(doubled[1].m1, 2.0 * doubled[0].m1);
    check(doubled[1].m0, doubled[0].m0);
    outcome(worst <= 1e-14, format!("max relative error {worst:.1e}; K = 1 Hamilton bound {hb:.7}"))
}

fn epsilons() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..50 {
        let (dh, dt): (f64, f64) = (rng.random_range(0.01..10.0), rng.random_range(0.01..10.0));
        let opt_eps = epsilons_from_weights(dh, dt);
        let opt = c1_value(1.0, opt_eps, dh, dt);
        let mut brute = f64::INFINITY;
        for i in 1..300 {
            for j in 1..(300 - i) {
                let e = [i as f64 * 0.01, j as f64 * 0.01, 3.0 - (i + j) as f64 * 0.01];
                brute = brute.min(c1_value(1.0, e, dh, dt));
            }
        }
        worst = worst.max(opt - brute);
    }
    outcome(worst <= 1e-6, format!("50 pairs, max C1(opt) - C1(brute force) = {worst:.2e}"))
}

struct Canonical {
    scenario: Scenario,
    report: flowlab::checker::VerificationReport,
    identical: bool,
    secs: f64,
}

fn canonical_runs() -> Canonical {
    let scenario = canonical().build().unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let start = Instant::now();
    let report = run(&scenario, a.path()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    run(&scenario, b.path()).unwrap();
    let bytes = |d: &tempfile::TempDir| std::fs::read(d.path().join("report.json")).unwrap();
    Canonical { identical: bytes(&a) == bytes(&b), scenario, report, secs }
}

fn end_to_end(c: &Canonical) -> Outcome {
    let margins: Vec<String> = c.report.records.iter().map(|r| format!("{:.3}", r.margin)).collect();
    let pass = c.report.pass
        && c.report.records.len() == 3
        && c.report.records.iter().all(|r| r.pass && r.margin > 0.0 && r.source == InputSource::Measured)
        && c.identical
        && c.secs <= 120.0;
    outcome(
        pass,
        format!(
            "Shi/Hamilton/Harnack margins {}, byte-identical reports: {}, {:.1} s per run",
            margins.join("/"),
            c.identical,
            c.secs
        ),
    )
}

fn harnack(c: &Canonical) -> Outcome {
    let h = &c.report.harnack;
    let record = &c.report.records[2];
    let mut flat = c.scenario.file.clone();
    if let flowlab::scenario::MetricFile::Randers { b1, .. } = &mut flat.metric {
        *b1 = flowlab::expr::Expr::constant(0.0);
    }
    let flat = flat.build().unwrap();
    let pairs = harnack_pairs(&flat.grid, c.scenario.checker.harnack_side);
    let sym = distance_table(&flat, &pairs, NeighborStencil::Sixteen)
        .unwrap()
        .iter()
        .map(|r| (r.forward - r.backward).abs())
        .fold(0.0, f64::max);
    let t_half = 0.5 * c.scenario.time_grid.t_end;
    let pass = h.pairs == 64 && (h.t0 - t_half).abs() < 1e-12 && record.pass && h.max_asymmetry > 1e-6 && sym <= 1e-10;
    outcome(
        pass,
        format!(
            "{} pairs at t0 = {}, worst margin {:.3}, Randers asymmetry {:.3e}, b = 0 asymmetry {sym:.1e}",
            h.pairs, h.t0, record.margin, h.max_asymmetry
        ),
    )
}

fn heat_error(n: usize, dt: f64, t_end: f64, oracle: &dyn Fn([f64; 2], f64) -> f64) -> f64 {
    let g = GridGeometry::torus(n, 8).unwrap();
    let m = MetricState::euclidean(g);
    let u0 = ScalarField::from_fn(&g, |x| oracle(x, 0.0));
    let tg = TimeGrid::new(0.0, t_end, dt).unwrap();
    let traj = solve(&SolveSetup {
        u0: &u0,
        metric: &m,
        measure_phi: &zero(),
        params: &PdeParams::heat(),
        flow: &FlowSpec::conformal(0.0),
        time_grid: tg,
        save_every: tg.steps,
    })
    .unwrap();
    let last = traj.snapshots.last().unwrap();
    let exact = ScalarField::from_fn(&g, |x| oracle(x, t_end));
    let sq: f64 = last.values.iter().zip(&exact.values).map(|(a, b)| (a - b).powi(2)).sum();
    (sq / g.len() as f64).sqrt()
}

fn flat_heat() -> Outcome {
    let fourier = |x: [f64; 2], t: f64| 2.0 + (-t).exp() * x[0].sin() + 0.5 * (-2.0 * t).exp() * (x[0] + x[1]).cos();
    let err = heat_error(48, 2.5e-4, 0.25, &fourier);
    let space = order(heat_error(16, 1e-4, 0.1, &fourier), heat_error(32, 1e-4, 0.1, &fourier));
    // decay rates of the five-point operator isolate the time error
    let n = 32;
    let h = TAU / n as f64;
    let mu = 4.0 / (h * h) * (0.5 * h).sin().powi(2);
    let semi = move |x: [f64; 2], t: f64| {
        2.0 + (-mu * t).exp() * x[0].sin() + 0.5 * (-2.0 * mu * t).exp() * (x[0] + x[1]).cos()
    };
    let time = order(heat_error(n, 4e-3, 0.4, &semi), heat_error(n, 2e-3, 0.4, &semi));
    outcome(
        err <= 5e-3 && space >= 1.8 && time >= 0.9,
        format!("L2 error {err:.2e} at 48^2, spatial order {space:.2}, temporal order {time:.2}"),
    )
}

fn main() {
    let canon = canonical_runs();
    let results: Vec<(&str, Outcome)> = vec![
        ("Riemannian reduction", riemannian_reduction()),
        ("Bochner-Weitzenbock residual", bochner()),
        ("Kato gap", kato()),
        ("gradient-norm and inverse-metric evolution", evolution_residuals()),
        ("constants regression", constants()),
        ("epsilon optimization", epsilons()),
        ("end-to-end verification", end_to_end(&canon)),
        ("Harnack sampling", harnack(&canon)),
        ("flat-torus heat oracle", flat_heat()),
    ];
    let mut failed = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        println!("criterion {} [{}] {name}: {}", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} of {} criteria pass", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
