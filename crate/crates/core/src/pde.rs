//! Explicit solver for
//! `u_t = Delta u + R1 u + R2 u^alpha + R3 u (log u)^beta`
//! on the torus, coupled to the evolving metric.

use crate::error::{Error, Result};
use crate::expr::ScalarFn;
use crate::finsler::{sym_eigenvalues, MetricState};
use crate::flow::{estimate_l1_grid, step_metric, FlowSpec, TimeGrid};
use crate::grid::{GridGeometry, ScalarField};
use crate::laplacian::{differential, GradientField, LaplacianPlan};
use crate::Mat2;

/// Safety factor of the explicit time step.
pub const CFL_FACTOR: f64 = 0.9;

/// Exponents and coefficient functions of the reaction terms.
#[derive(Debug, Clone)]
pub struct PdeParams {
    pub alpha: f64,
    pub beta: f64,
    pub r1: ScalarFn,
    pub r2: ScalarFn,
    pub r3: ScalarFn,
}

impl PdeParams {
    pub fn new(alpha: f64, beta: f64, r1: ScalarFn, r2: ScalarFn, r3: ScalarFn) -> Result<Self> {
        let p = PdeParams { alpha, beta, r1, r2, r3 };
        let problems = p.problems();
        if problems.is_empty() {
            Ok(p)
        } else {
            Err(Error::Parameter(problems.join("; ")))
        }
    }

    /// Heat equation: all coefficients zero.
    pub fn heat() -> Self {
        let zero = ScalarFn::constant(0.0);
        PdeParams { alpha: 1.0, beta: 1.0, r1: zero.clone(), r2: zero.clone(), r3: zero }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            out.push(format!("alpha must be positive (got {})", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            out.push(format!("beta must be positive (got {})", self.beta));
        }
        out
    }

    pub fn coefficients(&self) -> [&ScalarFn; 3] {
        [&self.r1, &self.r2, &self.r3]
    }

    /// True when `(log u)^beta` is defined for every `u > 0`.
    pub fn beta_is_integer(&self) -> bool {
        self.beta.fract() == 0.0
    }
}

/// `base^exponent` with `0^0 = 1`; a negative base needs an integer exponent.
pub fn signed_power(base: f64, exponent: f64) -> Result<f64> {
    if exponent == 0.0 {
        return Ok(1.0);
    }
    if base < 0.0 && exponent.fract() != 0.0 {
        return Err(Error::Domain(format!("({base})^{exponent} is not real")));
    }
    Ok(base.powf(exponent))
}

/// Pointwise `R1 u + R2 u^alpha + R3 u (log u)^beta` at time `t`.
pub fn reaction_term(grid: &GridGeometry, u: &ScalarField, params: &PdeParams, t: f64) -> Result<ScalarField> {
    let mut values = Vec::with_capacity(u.values.len());
    for (idx, &v) in u.values.iter().enumerate() {
        let (i, j) = grid.node(idx);
        let x = grid.point(i, j);
        if !(v > 0.0) {
            return Err(Error::PositivityLoss { time: t, min: u.min() });
        }
        if !params.beta_is_integer() && v < 1.0 {
            return Err(Error::Domain(format!(
                "u = {v} < 1 at {x:?} with non-integer beta = {}",
                params.beta
            )));
        }
        let log_term = signed_power(v.ln(), params.beta)?;
        values.push(
            params.r1.at(x, t) * v + params.r2.at(x, t) * v.powf(params.alpha) + params.r3.at(x, t) * v * log_term,
        );
    }
    Ok(ScalarField { nx: u.nx, ny: u.ny, values, time: Some(t) })
}

/// Smallest eigenvalue of `g(x, y)` over nodes and sampled directions.
pub fn convexity_margin(m: &MetricState) -> Result<f64> {
    let grid = *m.grid();
    let mut worst = f64::INFINITY;
    for idx in 0..grid.len() {
        let (i, j) = grid.node(idx);
        let local = m.local(grid.point(i, j))?;
        for k in 0..grid.ntheta {
            worst = worst.min(sym_eigenvalues(&local.metric_tensor(&grid.direction(k)))[0]);
        }
    }
    Ok(worst)
}

/// Largest eigenvalue of `g^{-1}(x, y)` over nodes and sampled directions.
pub fn lambda_max(m: &MetricState) -> Result<f64> {
    let margin = convexity_margin(m)?;
    if !(margin > 0.0) {
        return Err(Error::DegenerateMetric {
            location: format!("t = {}", m.time),
            reason: format!("fundamental tensor not positive definite (min eigenvalue {margin})"),
        });
    }
    Ok(1.0 / margin)
}

/// Stable explicit step `0.9 min(dx^2, dy^2) / (2 n Lambda_max)` with `n = 2`.
pub fn cfl_limit(grid: &GridGeometry, lambda_max: f64) -> f64 {
    let h = grid.spacing();
    CFL_FACTOR * h[0].min(h[1]).powi(2) / (4.0 * lambda_max)
}

/// Largest `Lambda_max` over the run for a conformal flow, from
/// `g^{-1} -> e^{2 lambda dt} g^{-1}` per step; `None` for other kinds.
pub fn predicted_lambda_max(lambda0: f64, flow: &FlowSpec, tg: &TimeGrid) -> Option<f64> {
    let FlowSpec::Conformal { lambda } = flow else { return None };
    let mut factor: f64 = 1.0;
    let mut worst: f64 = 1.0;
    for k in 0..tg.steps {
        factor *= (2.0 * lambda.at([0.0, 0.0], tg.time(k)) * tg.dt).exp();
        worst = worst.max(factor);
    }
    Some(lambda0 * worst)
}

/// `u + dt (Delta u + reaction)` with the metric at time `t`.
pub fn step_solution(
    u: &ScalarField,
    m: &MetricState,
    measure_phi: &ScalarFn,
    params: &PdeParams,
    dt: f64,
    t: f64,
) -> Result<ScalarField> {
    let plan = LaplacianPlan::new(m, measure_phi)?;
    step_with_plan(&plan, u, params, dt, t).map(|(next, _)| next)
}

fn step_with_plan(
    plan: &LaplacianPlan,
    u: &ScalarField,
    params: &PdeParams,
    dt: f64,
    t: f64,
) -> Result<(ScalarField, GradientField)> {
    let grad = plan.gradient(u)?;
    let lap = plan.apply(&grad, u)?;
    let reaction = reaction_term(plan.grid(), u, params, t)?;
    let values = u
        .values
        .iter()
        .zip(lap.values.iter().zip(&reaction.values))
        .map(|(v, (l, r))| v + dt * (l + r))
        .collect();
    Ok((ScalarField { nx: u.nx, ny: u.ny, values, time: Some(t + dt) }, grad))
}

/// Per-step log entry.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub time: f64,
    pub u_min: f64,
    pub u_max: f64,
    /// Smallest eigenvalue of `g` over the sampled sphere bundle.
    pub convexity_margin: f64,
    /// Largest eigenvalue of `g^{-1}`, the reciprocal of the margin.
    pub lambda_max: f64,
    /// Deformation bound `L_1` of the flow at this level.
    pub l1: f64,
    /// Fraction of nodes with `du != 0`.
    pub mask_fraction: f64,
}

/// Saved levels and empirical bounds of a run.
#[derive(Debug, Clone)]
pub struct SolutionTrajectory {
    pub time_grid: TimeGrid,
    /// Saved solution levels (each carries its time).
    pub snapshots: Vec<ScalarField>,
    /// Metric at each saved level.
    pub metrics: Vec<MetricState>,
    pub steps: Vec<StepDiagnostics>,
    pub delta_emp: f64,
    pub b_emp: f64,
    pub sigma1_emp: f64,
    pub sigma2_emp: f64,
    /// Error that stopped the run early, if any.
    pub failure: Option<Error>,
}

impl SolutionTrajectory {
    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.time.unwrap_or(f64::NAN)).collect()
    }
}

/// `max_i sup_x F_{grad u}(grad^{grad u} R_i)` at one level: `sqrt(dR g^{-1}(grad u) dR)`,
/// with the base tensor where `du = 0`.
pub fn coefficient_gradient_bound(
    m: &MetricState,
    grad: &GradientField,
    params: &PdeParams,
    t: f64,
) -> Result<f64> {
    let grid = *m.grid();
    let fields: Vec<Vec<crate::Vec2>> = params
        .coefficients()
        .iter()
        .map(|r| differential(&grid, &ScalarField::sample(&grid, r, t)))
        .collect();
    let mut worst: f64 = 0.0;
    for idx in 0..grid.len() {
        let (i, j) = grid.node(idx);
        let local = m.local(grid.point(i, j))?;
        let ginv: Mat2 = if grad.mask[idx] {
            local.ginv(&grad.vectors[idx])?
        } else {
            local.base_tensor().try_inverse().ok_or_else(|| Error::DegenerateMetric {
                location: format!("node ({i}, {j})"),
                reason: "base tensor not invertible".into(),
            })?
        };
        for d in &fields {
            worst = worst.max((d[idx].transpose() * ginv * d[idx])[(0, 0)].max(0.0).sqrt());
        }
    }
    Ok(worst)
}

fn coefficient_sup(grid: &GridGeometry, params: &PdeParams, t: f64) -> f64 {
    params
        .coefficients()
        .iter()
        .map(|r| ScalarField::sample(grid, r, t).max())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Inputs of [`solve`].
#[derive(Debug, Clone)]
pub struct SolveSetup<'a> {
    pub u0: &'a ScalarField,
    pub metric: &'a MetricState,
    pub measure_phi: &'a ScalarFn,
    pub params: &'a PdeParams,
    pub flow: &'a FlowSpec,
    pub time_grid: TimeGrid,
    /// Save every this many steps (the final level is always saved).
    pub save_every: usize,
}

/// Check the explicit step against the stability limit before running.
pub fn check_cfl(metric: &MetricState, flow: &FlowSpec, tg: &TimeGrid) -> Result<f64> {
    let l0 = lambda_max(metric)?;
    let lmax = predicted_lambda_max(l0, flow, tg).unwrap_or(l0);
    let limit = cfl_limit(metric.grid(), lmax);
    if tg.steps > 0 && tg.dt > limit {
        return Err(Error::Cfl { dt: tg.dt, limit });
    }
    Ok(limit)
}

/// Run the coupled system over the time grid. Precondition failures are
/// errors; failures during the run stop it and are recorded in the trajectory.
pub fn solve(setup: &SolveSetup<'_>) -> Result<SolutionTrajectory> {
    let SolveSetup { u0, metric, measure_phi, params, flow, time_grid: tg, save_every } = setup.clone();
    let grid = *metric.grid();
    if !u0.matches(&grid) || !u0.is_finite() {
        return Err(Error::Parameter("initial field does not match the grid or is not finite".into()));
    }
    let problems: Vec<String> = params.problems().into_iter().chain(flow.problems(metric.mode())).collect();
    if !problems.is_empty() {
        return Err(Error::Parameter(problems.join("; ")));
    }
    if !(u0.min() > 0.0) {
        return Err(Error::PositivityLoss { time: tg.t0, min: u0.min() });
    }
    if !params.beta_is_integer() && u0.min() < 1.0 {
        return Err(Error::Domain(format!("non-integer beta needs u0 >= 1 (min u0 = {})", u0.min())));
    }
    check_cfl(metric, flow, &tg)?;
    let save_every = save_every.max(1);

    let mut m = metric.clone();
    m.time = tg.t0;
    let mut u = u0.clone();
    u.time = Some(tg.t0);
    let lam = lambda_max(&m)?;
    let mut traj = SolutionTrajectory {
        time_grid: tg,
        snapshots: Vec::new(),
        metrics: Vec::new(),
        steps: Vec::new(),
        delta_emp: u.min(),
        b_emp: u.max(),
        sigma1_emp: f64::NEG_INFINITY,
        sigma2_emp: 0.0,
        failure: None,
    };
    let mut plan = LaplacianPlan::new(&m, measure_phi)?;
    let grad0 = plan.gradient(&u)?;
    traj.sigma2_emp = coefficient_gradient_bound(&m, &grad0, params, tg.t0)?;
    traj.snapshots.push(u.clone());
    traj.metrics.push(m.clone());
    traj.steps.push(StepDiagnostics {
        step: 0,
        time: tg.t0,
        u_min: u.min(),
        u_max: u.max(),
        convexity_margin: 1.0 / lam,
        lambda_max: lam,
        l1: estimate_l1_grid(flow, &m)?,
        mask_fraction: grad0.mask_count() as f64 / grid.len() as f64,
    });

    for k in 0..tg.steps {
        let t = tg.time(k);
        let t_next = tg.time(k + 1);
        traj.sigma1_emp = traj.sigma1_emp.max(coefficient_sup(&grid, params, t));
        let (u_next, grad) = match step_with_plan(&plan, &u, params, tg.dt, t) {
            Ok(r) => r,
            Err(e) => {
                traj.failure = Some(e);
                break;
            }
        };
        let mut m_next = match step_metric(&m, flow, tg.dt) {
            Ok(next) => next,
            Err(e) => {
                traj.failure = Some(e);
                break;
            }
        };
        m_next.time = t_next;
        if !u_next.is_finite() || !(u_next.min() > 0.0) {
            traj.failure = Some(Error::PositivityLoss { time: t_next, min: u_next.min() });
            break;
        }
        let (lam, l1) = match lambda_max(&m_next).and_then(|lam| Ok((lam, estimate_l1_grid(flow, &m_next)?))) {
            Ok(v) => v,
            Err(e) => {
                traj.failure = Some(match e {
                    Error::DegenerateMetric { reason, .. } => Error::FlowDegeneration { time: t_next, reason },
                    other => other,
                });
                break;
            }
        };
        let limit = cfl_limit(&grid, lam);
        if tg.dt > limit {
            traj.failure = Some(Error::Cfl { dt: tg.dt, limit });
            break;
        }
        u = u_next;
        u.time = Some(t_next);
        m = m_next;
        plan = match LaplacianPlan::new(&m, measure_phi) {
            Ok(p) => p,
            Err(e) => {
                traj.failure = Some(e);
                break;
            }
        };
        traj.delta_emp = traj.delta_emp.min(u.min());
        traj.b_emp = traj.b_emp.max(u.max());
        traj.steps.push(StepDiagnostics {
            step: k + 1,
            time: t_next,
            u_min: u.min(),
            u_max: u.max(),
            convexity_margin: 1.0 / lam,
            lambda_max: lam,
            l1,
            mask_fraction: grad.mask_count() as f64 / grid.len() as f64,
        });
        if (k + 1) % save_every == 0 || k + 1 == tg.steps {
            let g = match plan.gradient(&u) {
                Ok(g) => g,
                Err(e) => {
                    traj.failure = Some(e);
                    break;
                }
            };
            match coefficient_gradient_bound(&m, &g, params, t_next) {
                Ok(s2) => traj.sigma2_emp = traj.sigma2_emp.max(s2),
                Err(e) => {
                    traj.failure = Some(e);
                    break;
                }
            }
            traj.snapshots.push(u.clone());
            traj.metrics.push(m.clone());
        }
    }
    let t_last = traj.steps.last().map(|s| s.time).unwrap_or(tg.t0);
    traj.sigma1_emp = traj.sigma1_emp.max(coefficient_sup(&grid, params, t_last));
    Ok(traj)
}
