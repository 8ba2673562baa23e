//! Evolution of the metric under `d/dt g = -2h`, i.e. `d/dt log F = -H`
//! with `H = h(y) / F^2(y)`.
//!
//! Parametric Randers metrics only support conformal flows, which are applied
//! exactly to the Randers data. Grid-sampled metrics support every kind: the
//! samples of `F` are advanced by one explicit step of the scalar equation.

use crate::connection::{flag_from, CurvatureFrame};
use crate::error::{Error, Result};
use crate::expr::{ScalarFn, Var, Vars};
use crate::finsler::{sphere_bundle_samples, sym_eigenvalues, DirectionSample, MetricMode, MetricState, ZERO_GRADIENT};
use crate::grid::{cubic_weights, locate, ScalarField};
use crate::laplacian::differential;
use crate::{Mat2, Vec2};

/// Which deformation tensor `h` drives the flow.
#[derive(Debug, Clone)]
pub enum FlowSpec {
    /// `h = lambda(t) g`.
    Conformal { lambda: ScalarFn },
    /// `h_ij = (Ric / 2)_{y^i y^j}`.
    Ricci,
    /// User-given `h_ij(x, theta, t)` with `theta` the angle of `y`. The flow
    /// uses the fiber Hessian of `h(y) / 2`, `h(y) = h_ij y^i y^j`, which is
    /// the tensor compatible with `d/dt log F = -h(y) / F^2`.
    Custom { h11: ScalarFn, h12: ScalarFn, h22: ScalarFn },
}

impl FlowSpec {
    pub fn conformal(lambda: f64) -> Self {
        FlowSpec::Conformal { lambda: ScalarFn::constant(lambda) }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            FlowSpec::Conformal { .. } => "conformal",
            FlowSpec::Ricci => "ricci",
            FlowSpec::Custom { .. } => "custom",
        }
    }

    /// Reasons this flow cannot run on a metric of the given mode.
    pub fn problems(&self, mode: MetricMode) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            FlowSpec::Conformal { lambda } => {
                if let ScalarFn::Expr(e) = lambda {
                    if e.uses(Var::X1) || e.uses(Var::X2) || e.uses(Var::Theta) {
                        out.push(format!("conformal lambda must depend on t only (got \"{e}\")"));
                    }
                }
            }
            FlowSpec::Ricci | FlowSpec::Custom { .. } => {
                if mode == MetricMode::ParametricRanders {
                    out.push(format!(
                        "{} flow needs a grid-sampled metric (parametric Randers metrics only support conformal flows)",
                        self.kind()
                    ));
                }
            }
        }
        out
    }
}

/// Uniform time stepping of `[t0, t_end]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub t_end: f64,
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    /// Smallest number of equal steps of size at most `dt_max` covering the interval.
    pub fn new(t0: f64, t_end: f64, dt_max: f64) -> Result<Self> {
        if !(dt_max > 0.0) || !(t_end >= t0) || !t0.is_finite() || !t_end.is_finite() {
            return Err(Error::Parameter(format!(
                "time grid needs t_end >= t0 and dt > 0 (got t0 = {t0}, t_end = {t_end}, dt = {dt_max})"
            )));
        }
        let span = t_end - t0;
        let steps = ((span / dt_max) * (1.0 - 1e-12)).ceil().max(if span > 0.0 { 1.0 } else { 0.0 }) as usize;
        let dt = if steps == 0 { dt_max } else { span / steps as f64 };
        Ok(TimeGrid { t0, t_end, dt, steps })
    }

    /// Time of level `k`; the last level is exactly `t_end`.
    pub fn time(&self, k: usize) -> f64 {
        if k >= self.steps {
            self.t_end
        } else {
            self.t0 + k as f64 * self.dt
        }
    }
}

/// Largest absolute generalized eigenvalue of `(h, g)` with `g` positive definite.
pub fn relative_spectral_radius(h: &Mat2, g: &Mat2) -> f64 {
    // eigenvalues of L^{-1} h L^{-T} with g = L L^T
    let l11 = g[(0, 0)].sqrt();
    let l21 = g[(1, 0)] / l11;
    let l22 = (g[(1, 1)] - l21 * l21).sqrt();
    let linv = Mat2::new(1.0 / l11, 0.0, -l21 / (l11 * l22), 1.0 / l22);
    let s = linv * h * linv.transpose();
    let [lo, hi] = sym_eigenvalues(&s);
    lo.abs().max(hi.abs())
}

/// `2 psi e_r e_r + (2 psi + psi'') e_t e_t + psi' (e_r e_t + e_t e_r)`: the
/// fiber Hessian of the 2-homogeneous function `r^2 psi(theta)`.
fn polar_hessian(psi: f64, d1: f64, d2: f64, theta: f64) -> Mat2 {
    let (s, c) = theta.sin_cos();
    let er = Vec2::new(c, s);
    let et = Vec2::new(-s, c);
    er * er.transpose() * (2.0 * psi) + et * et.transpose() * (2.0 * psi + d2) + (er * et.transpose() + et * er.transpose()) * d1
}

/// Fiber Hessian of `r^2 psi(theta)` built like the sampled fundamental
/// tensor: differences of `psi` at the grid angles, then cubic interpolation
/// of `psi`, `psi'` and `psi''` to `theta`.
fn sampled_fiber_hessian(psi: impl Fn(f64) -> Result<f64>, theta: f64, dtheta: f64) -> Result<Mat2> {
    let (k0, frac) = locate(theta, dtheta);
    let offsets: Vec<isize> = if frac == 0.0 { vec![0] } else { vec![-1, 0, 1, 2] };
    let lo = offsets[0] - 1;
    let hi = offsets[offsets.len() - 1] + 1;
    let values: Vec<f64> = (lo..=hi).map(|o| psi((k0 + o) as f64 * dtheta)).collect::<Result<_>>()?;
    let at = |o: isize| values[(o - lo) as usize];
    let weights = if frac == 0.0 { vec![1.0] } else { cubic_weights(frac).to_vec() };
    let (mut p0, mut d1, mut d2) = (0.0, 0.0, 0.0);
    for (o, w) in offsets.iter().zip(&weights) {
        p0 += w * at(*o);
        d1 += w * (at(o + 1) - at(o - 1)) / (2.0 * dtheta);
        d2 += w * (at(o + 1) - 2.0 * at(*o) + at(o - 1)) / (dtheta * dtheta);
    }
    Ok(polar_hessian(p0, d1, d2, theta))
}

fn ricci_unit(frame: &CurvatureFrame, theta: f64) -> Result<f64> {
    let y = Vec2::new(theta.cos(), theta.sin());
    let g = frame.stencil().center().metric_tensor(&y);
    let r = frame.riemann(&y)?;
    let e1 = crate::connection::transverse_frame(&g, &y)?;
    Ok(flag_from(&r, &g, &y, &e1)? * (y.transpose() * g * y)[(0, 0)])
}

/// `h_ij(x, theta, t) e^i e^j` for the user tensor of the custom kind, with
/// `e` the unit vector at angle `theta`.
fn custom_quadratic(spec: &FlowSpec, x: [f64; 2], time: f64, theta: f64) -> f64 {
    let FlowSpec::Custom { h11, h12, h22 } = spec else { return 0.0 };
    let v = Vars { x1: x[0], x2: x[1], t: time, theta };
    let (s, c) = theta.sin_cos();
    h11.eval(&v) * c * c + 2.0 * h12.eval(&v) * s * c + h22.eval(&v) * s * s
}

/// `h_ij(x, y)` using a prepared curvature frame at `x` for the Ricci kind.
fn deformation_in_frame(
    spec: &FlowSpec,
    m: &MetricState,
    frame: Option<&CurvatureFrame>,
    s: &DirectionSample,
) -> Result<Mat2> {
    let theta = s.y[1].atan2(s.y[0]);
    match spec {
        FlowSpec::Conformal { lambda } => {
            let g = m.local(s.x)?.metric_tensor(&s.y);
            Ok(g * lambda.at(s.x, m.time))
        }
        FlowSpec::Custom { .. } => {
            let psi = |t: f64| Ok(0.5 * custom_quadratic(spec, s.x, m.time, t));
            sampled_fiber_hessian(psi, theta, m.grid().dtheta())
        }
        FlowSpec::Ricci => {
            let owned;
            let frame = match frame {
                Some(f) => f,
                None => {
                    owned = CurvatureFrame::new(m, s.x)?;
                    &owned
                }
            };
            let psi = |t: f64| ricci_unit(frame, t).map(|r| 0.5 * r);
            sampled_fiber_hessian(psi, theta, m.grid().dtheta())
        }
    }
}

/// Deformation tensor `h_ij(x, y)` of the flow at the metric's current time.
pub fn deformation_tensor(spec: &FlowSpec, m: &MetricState, s: &DirectionSample) -> Result<Mat2> {
    crate::finsler::check_nonzero(&s.y)?;
    deformation_in_frame(spec, m, None, s)
}

/// `H = h(y) / F^2(y)` at every sphere-bundle sample of the grid.
pub fn scalar_deformation(spec: &FlowSpec, m: &MetricState) -> Result<Vec<f64>> {
    let grid = *m.grid();
    let mut out = Vec::with_capacity(grid.len() * grid.ntheta);
    for idx in 0..grid.len() {
        let (i, j) = grid.node(idx);
        let x = grid.point(i, j);
        match spec {
            FlowSpec::Conformal { lambda } => {
                let l = lambda.at(x, m.time);
                out.extend(std::iter::repeat_n(l, grid.ntheta));
            }
            FlowSpec::Ricci => {
                let frame = CurvatureFrame::new(m, x)?;
                let local = frame.stencil().center().clone();
                for k in 0..grid.ntheta {
                    let y = grid.direction(k);
                    let f = local.norm(&y);
                    out.push(ricci_unit(&frame, grid.theta(k))? / (f * f));
                }
            }
            FlowSpec::Custom { .. } => {
                let local = m.local(x)?;
                for k in 0..grid.ntheta {
                    let f = local.norm(&grid.direction(k));
                    out.push(custom_quadratic(spec, x, m.time, grid.theta(k)) / (f * f));
                }
            }
        }
    }
    Ok(out)
}

fn degeneration(e: Error, time: f64) -> Error {
    match e {
        Error::FlowDegeneration { .. } => e,
        other => Error::FlowDegeneration { time, reason: other.to_string() },
    }
}

/// One explicit step of the flow; the returned metric carries time `t + dt`.
pub fn step_metric(m: &MetricState, spec: &FlowSpec, dt: f64) -> Result<MetricState> {
    let problems = spec.problems(m.mode());
    if !problems.is_empty() {
        return Err(Error::Parameter(problems.join("; ")));
    }
    if !(dt >= 0.0) {
        return Err(Error::Parameter(format!("dt must be nonnegative (got {dt})")));
    }
    let t_next = m.time + dt;
    let mut next = m.clone();
    next.time = t_next;
    match m.mode() {
        MetricMode::ParametricRanders => {
            let FlowSpec::Conformal { lambda } = spec else { unreachable!("checked above") };
            let l = lambda.at([0.0, 0.0], m.time);
            if !l.is_finite() {
                return Err(Error::FlowDegeneration { time: m.time, reason: format!("lambda = {l}") });
            }
            next.scale((-l * dt).exp());
            next.validate().map_err(|e| degeneration(e, t_next))?;
        }
        MetricMode::GridSampled => {
            let h = scalar_deformation(spec, m).map_err(|e| degeneration(e, m.time))?;
            let f = m.f_samples().expect("grid-sampled metric has samples");
            let samples: Vec<f64> = f.iter().zip(&h).map(|(f, h)| f * (-dt * h).exp()).collect();
            if let Some(bad) = samples.iter().position(|v| !v.is_finite()) {
                return Err(Error::FlowDegeneration { time: t_next, reason: format!("non-finite F at sample {bad}") });
            }
            next = MetricState::from_samples(*m.grid(), samples, t_next).map_err(|e| degeneration(e, t_next))?;
        }
    }
    Ok(next)
}

/// `max |(g^{-1}(t + dt) - g^{-1}(t)) / dt - 2 h^{ij}|` over the sphere bundle.
pub fn inverse_evolution_residual(m: &MetricState, spec: &FlowSpec, dt: f64) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(Error::Parameter("inverse evolution residual needs dt > 0".into()));
    }
    let next = step_metric(m, spec, dt)?;
    let grid = *m.grid();
    let mut worst: f64 = 0.0;
    for idx in 0..grid.len() {
        let (i, j) = grid.node(idx);
        let x = grid.point(i, j);
        let (l0, l1) = (m.local(x)?, next.local(x)?);
        let frame = match spec {
            FlowSpec::Ricci => Some(CurvatureFrame::new(m, x)?),
            _ => None,
        };
        for k in 0..grid.ntheta {
            let y = grid.direction(k);
            let g0 = l0.ginv(&y)?;
            let g1 = l1.ginv(&y)?;
            let h = deformation_in_frame(spec, m, frame.as_ref(), &DirectionSample::new(x, y))?;
            let r = (g1 - g0) / dt - g0 * h * g0 * 2.0;
            worst = worst.max(r.amax());
        }
    }
    Ok(worst)
}

/// Pointwise residual of `d/dt F^2(grad f) = 2 h(grad f) + 2 df_t(grad f)`
/// at the middle of three equally spaced levels; zero where `df = 0`.
pub fn gradient_norm_evolution_residual(
    metrics: [&MetricState; 3],
    spec: &FlowSpec,
    f: [&ScalarField; 3],
    dt: f64,
) -> Result<ScalarField> {
    if !(dt > 0.0) {
        return Err(Error::Parameter("evolution residual needs dt > 0".into()));
    }
    let grid = *metrics[1].grid();
    let d: Vec<Vec<Vec2>> = f.iter().map(|u| differential(&grid, u)).collect();
    let mut values = vec![0.0; grid.len()];
    for (idx, r) in values.iter_mut().enumerate() {
        if d.iter().any(|di| di[idx].norm() <= ZERO_GRADIENT) {
            continue;
        }
        let (i, j) = grid.node(idx);
        let x = grid.point(i, j);
        let dual2 = |k: usize| -> Result<f64> {
            let v = metrics[k].local(x)?.legendre(&d[k][idx])?;
            Ok(d[k][idx].dot(&v))
        };
        let lhs = (dual2(2)? - dual2(0)?) / (2.0 * dt);
        let v = metrics[1].local(x)?.legendre(&d[1][idx])?;
        let h = deformation_tensor(spec, metrics[1], &DirectionSample::new(x, v))?;
        let dft = (d[2][idx] - d[0][idx]) / (2.0 * dt);
        let rhs = 2.0 * (v.transpose() * h * v)[(0, 0)] + 2.0 * dft.dot(&v);
        *r = lhs - rhs;
    }
    Ok(ScalarField { nx: grid.nx, ny: grid.ny, values, time: Some(metrics[1].time) })
}

/// `L_1`: the largest `|l|` with `h v = l g v` over the samples.
pub fn estimate_l1(spec: &FlowSpec, m: &MetricState, samples: &[DirectionSample]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    if let FlowSpec::Conformal { lambda } = spec {
        for s in samples {
            crate::finsler::check_nonzero(&s.y)?;
            worst = worst.max(lambda.at(s.x, m.time).abs());
        }
        return Ok(worst);
    }
    let mut cached: Option<([f64; 2], Option<CurvatureFrame>)> = None;
    for s in samples {
        crate::finsler::check_nonzero(&s.y)?;
        if cached.as_ref().is_none_or(|(x, _)| *x != s.x) {
            let frame = match spec {
                FlowSpec::Ricci => Some(CurvatureFrame::new(m, s.x)?),
                _ => None,
            };
            cached = Some((s.x, frame));
        }
        let frame = cached.as_ref().and_then(|(_, f)| f.as_ref());
        let h = deformation_in_frame(spec, m, frame, s)?;
        let g = m.local(s.x)?.metric_tensor(&s.y);
        worst = worst.max(relative_spectral_radius(&h, &g));
    }
    Ok(worst)
}

/// `L_1` over the full sphere bundle of the metric's grid.
pub fn estimate_l1_grid(spec: &FlowSpec, m: &MetricState) -> Result<f64> {
    estimate_l1(spec, m, &sphere_bundle_samples(m.grid()))
}
