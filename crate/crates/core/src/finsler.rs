//! Finsler norms on the torus and their fiber-wise tensors.
//!
//! A [`MetricState`] is either a parametric Randers metric
//! `F = sqrt(a_ij y^i y^j) + b_i y^i` with coefficient functions of `x`, or a
//! metric given by samples of `F` on the unit circle bundle (`f(x, theta)`
//! with `y = (cos theta, sin theta)`). Everything downstream works through
//! [`MetricState::local`], which freezes the norm at one point into a
//! [`Minkowski`] norm on the tangent plane.
//!
//! For sampled metrics the fiber is charted by the angle: writing
//! `F^2(r, theta) = 2 r^2 phi(theta)`, homogeneity gives
//!
//! ```text
//! g = 2 phi e_r e_r + (2 phi + phi'') e_t e_t + phi' (e_r e_t + e_t e_r)
//! C = (4 phi' + phi''') / (2 r) e_t e_t e_t
//! ```
//!
//! with `e_r = y/|y|` and `e_t` its rotation by `pi/2`, so only
//! theta-derivatives of the samples are needed.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::ScalarFn;
use crate::grid::{interp2, interp_periodic, GridGeometry};
use crate::{Mat2, Vec2};

/// Target residual of the Legendre fixed-point iteration.
pub const LEGENDRE_TOL: f64 = 1e-10;
/// Iteration cap of the Legendre fixed-point iteration.
pub const LEGENDRE_MAX_ITER: usize = 100;
/// Damping factor of the Legendre fixed-point iteration.
pub const LEGENDRE_DAMPING: f64 = 0.5;
/// Relative step of spatial metric derivatives (per `2 pi` of period).
pub const DERIVATIVE_STEP: f64 = 1e-4;
/// Below this Euclidean size a differential is treated as zero.
pub const ZERO_GRADIENT: f64 = 1e-12;

/// A point of the tangent bundle: base point `x` and a nonzero vector `y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionSample {
    pub x: [f64; 2],
    pub y: Vec2,
}

impl DirectionSample {
    pub fn new(x: [f64; 2], y: Vec2) -> Self {
        DirectionSample { x, y }
    }
}

/// Totally symmetric 3-tensor `C_ijk`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Cartan(pub [[[f64; 2]; 2]; 2]);

impl Cartan {
    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.0[i][j][k]
    }

    /// `C(v, ., .)` as a matrix.
    pub fn contract(&self, v: &Vec2) -> Mat2 {
        let mut m = Mat2::zeros();
        for i in 0..2 {
            for j in 0..2 {
                m[(i, j)] = (0..2).map(|k| self.0[i][j][k] * v[k]).sum();
            }
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest deviation from total symmetry.
    pub fn asymmetry(&self) -> f64 {
        let c = &self.0;
        let mut worst: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for other in [c[i][k][j], c[j][i][k], c[j][k][i], c[k][i][j], c[k][j][i]] {
                        worst = worst.max((c[i][j][k] - other).abs());
                    }
                }
            }
        }
        worst
    }

    fn from_fn(f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut c = [[[0.0; 2]; 2]; 2];
        for (i, ci) in c.iter_mut().enumerate() {
            for (j, cij) in ci.iter_mut().enumerate() {
                for (k, v) in cij.iter_mut().enumerate() {
                    *v = f(i, j, k);
                }
            }
        }
        Cartan(c)
    }
}

/// Fundamental tensor, its inverse and the Cartan tensor at one `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiberTensors {
    pub f: f64,
    pub g: Mat2,
    pub ginv: Mat2,
    pub cartan: Cartan,
}

/// Angular profile of a sampled norm at one base point.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    phi: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
    d3: Vec<f64>,
    dtheta: f64,
}

impl Profile {
    /// Build from samples `f(theta_k) > 0`.
    pub fn from_samples(f: &[f64]) -> Self {
        let n = f.len();
        let h = std::f64::consts::TAU / n as f64;
        let phi: Vec<f64> = f.iter().map(|v| 0.5 * v * v).collect();
        let at = |k: isize| phi[k.rem_euclid(n as isize) as usize];
        let mut d1 = vec![0.0; n];
        let mut d2 = vec![0.0; n];
        let mut d3 = vec![0.0; n];
        for k in 0..n as isize {
            let (m2, m1, p0, p1, p2) = (at(k - 2), at(k - 1), at(k), at(k + 1), at(k + 2));
            d1[k as usize] = (p1 - m1) / (2.0 * h);
            d2[k as usize] = (p1 - 2.0 * p0 + m1) / (h * h);
            d3[k as usize] = (p2 - 2.0 * p1 + 2.0 * m1 - m2) / (2.0 * h * h * h);
        }
        Profile { phi, d1, d2, d3, dtheta: h }
    }

    fn eval(&self, theta: f64) -> [f64; 4] {
        [
            interp_periodic(&self.phi, self.dtheta, theta),
            interp_periodic(&self.d1, self.dtheta, theta),
            interp_periodic(&self.d2, self.dtheta, theta),
            interp_periodic(&self.d3, self.dtheta, theta),
        ]
    }

    fn g_from(phi: f64, d1: f64, d2: f64, theta: f64) -> Mat2 {
        let (s, c) = theta.sin_cos();
        let er = Vec2::new(c, s);
        let et = Vec2::new(-s, c);
        er * er.transpose() * (2.0 * phi)
            + et * et.transpose() * (2.0 * phi + d2)
            + (er * et.transpose() + et * er.transpose()) * d1
    }

    /// Fundamental tensor at each sampled angle.
    pub fn node_tensors(&self) -> Vec<Mat2> {
        (0..self.phi.len())
            .map(|k| Self::g_from(self.phi[k], self.d1[k], self.d2[k], k as f64 * self.dtheta))
            .collect()
    }
}

/// The norm on a single tangent plane.
#[derive(Debug, Clone, PartialEq)]
pub enum Minkowski {
    Randers { a: Mat2, ainv: Mat2, b: Vec2 },
    Sampled(Profile),
}

#[inline]
pub(crate) fn sym_inverse(g: &Mat2) -> Option<Mat2> {
    let det = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    Some(Mat2::new(g[(1, 1)], -g[(0, 1)], -g[(1, 0)], g[(0, 0)]) / det)
}

#[inline]
pub(crate) fn is_spd(g: &Mat2) -> bool {
    g[(0, 0)] > 0.0 && g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)] > 0.0
}

/// Eigenvalues of a symmetric 2x2 matrix, ascending.
pub fn sym_eigenvalues(m: &Mat2) -> [f64; 2] {
    let tr = m[(0, 0)] + m[(1, 1)];
    let diff = m[(0, 0)] - m[(1, 1)];
    let off = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    let disc = (0.25 * diff * diff + off * off).sqrt();
    [0.5 * tr - disc, 0.5 * tr + disc]
}

impl Minkowski {
    /// Randers norm from `a` (symmetric positive definite) and `b` with `|b|_a < 1`.
    pub fn randers(a: Mat2, b: Vec2) -> Result<Self> {
        if !is_spd(&a) || (a[(0, 1)] - a[(1, 0)]).abs() > 1e-12 * a.norm() {
            return Err(Error::InvalidMetric {
                location: String::new(),
                reason: format!("a = {a:?} is not symmetric positive definite"),
            });
        }
        let ainv = sym_inverse(&a).expect("spd");
        let bnorm = (b.transpose() * ainv * b)[(0, 0)].sqrt();
        if !(bnorm < 1.0) {
            return Err(Error::InvalidMetric {
                location: String::new(),
                reason: format!("|b|_a = {bnorm} >= 1 (Randers norm not strongly convex)"),
            });
        }
        Ok(Minkowski::Randers { a, ainv, b })
    }

    pub fn euclidean() -> Self {
        Minkowski::Randers { a: Mat2::identity(), ainv: Mat2::identity(), b: Vec2::zeros() }
    }

    /// `F(y)`. The caller guarantees `y != 0`.
    #[inline]
    pub fn norm(&self, y: &Vec2) -> f64 {
        match self {
            Minkowski::Randers { a, b, .. } => (y.transpose() * a * y)[(0, 0)].sqrt() + b.dot(y),
            Minkowski::Sampled(p) => {
                let r = y.norm();
                let phi = interp_periodic(&p.phi, p.dtheta, y[1].atan2(y[0]));
                r * (2.0 * phi).sqrt()
            }
        }
    }

    /// `F`, `g`, `g^-1` and `C` at `y != 0`.
    pub fn tensors(&self, y: &Vec2) -> Result<FiberTensors> {
        match self {
            Minkowski::Randers { a, b, .. } => {
                let ay = a * y;
                let alpha = y.dot(&ay).sqrt();
                let beta = b.dot(y);
                let f = alpha + beta;
                let al = ay / alpha;
                let h = a - al * al.transpose();
                let fl = al + b;
                let g = h * (f / alpha) + fl * fl.transpose();
                let rho = b - al * (beta / alpha);
                let cartan = Cartan::from_fn(|i, j, k| {
                    (h[(i, j)] * rho[k] + h[(j, k)] * rho[i] + h[(k, i)] * rho[j]) / (2.0 * alpha)
                });
                let ginv = sym_inverse(&g).ok_or_else(|| Error::DegenerateMetric {
                    location: format!("y = {:?}", [y[0], y[1]]),
                    reason: "fundamental tensor not invertible".into(),
                })?;
                Ok(FiberTensors { f, g, ginv, cartan })
            }
            Minkowski::Sampled(p) => {
                let r = y.norm();
                let theta = y[1].atan2(y[0]);
                let [phi, d1, d2, d3] = p.eval(theta);
                let g = Profile::g_from(phi, d1, d2, theta);
                let (s, c) = theta.sin_cos();
                let et = [-s, c];
                let coef = (4.0 * d1 + d3) / (2.0 * r);
                let cartan = Cartan::from_fn(|i, j, k| coef * et[i] * et[j] * et[k]);
                let ginv = sym_inverse(&g).ok_or_else(|| Error::DegenerateMetric {
                    location: format!("y = {:?}", [y[0], y[1]]),
                    reason: "sampled fundamental tensor not invertible".into(),
                })?;
                Ok(FiberTensors { f: r * (2.0 * phi).sqrt(), g, ginv, cartan })
            }
        }
    }

    /// `g(y)` alone.
    #[inline]
    pub fn metric_tensor(&self, y: &Vec2) -> Mat2 {
        match self {
            Minkowski::Randers { a, b, .. } => {
                let ay = a * y;
                let alpha = y.dot(&ay).sqrt();
                let f = alpha + b.dot(y);
                let al = ay / alpha;
                let fl = al + b;
                (a - al * al.transpose()) * (f / alpha) + fl * fl.transpose()
            }
            Minkowski::Sampled(p) => {
                let theta = y[1].atan2(y[0]);
                let [phi, d1, d2, _] = p.eval(theta);
                Profile::g_from(phi, d1, d2, theta)
            }
        }
    }

    /// `g^{-1}(y)` without the Cartan tensor.
    #[inline]
    pub fn ginv(&self, y: &Vec2) -> Result<Mat2> {
        let g = self.metric_tensor(y);
        sym_inverse(&g).ok_or_else(|| Error::DegenerateMetric {
            location: format!("y = {:?}", [y[0], y[1]]),
            reason: "fundamental tensor not invertible".into(),
        })
    }

    /// Riemannian reference tensor used where no direction is available:
    /// `a` for Randers norms, the angular average of `g` for sampled norms.
    pub fn base_tensor(&self) -> Mat2 {
        match self {
            Minkowski::Randers { a, .. } => *a,
            Minkowski::Sampled(p) => {
                let gs = p.node_tensors();
                gs.iter().fold(Mat2::zeros(), |acc, g| acc + g) / gs.len() as f64
            }
        }
    }

    /// Legendre transform of a covector: the `v` with `v = g^{-1}(v) xi`,
    /// by damped fixed-point iteration. `xi = 0` maps to `0`.
    pub fn legendre(&self, xi: &Vec2) -> Result<Vec2> {
        if xi.norm() == 0.0 {
            return Ok(Vec2::zeros());
        }
        let mut v = match self {
            Minkowski::Randers { ainv, .. } => ainv * xi,
            Minkowski::Sampled(_) => *xi,
        };
        let mut residual = f64::INFINITY;
        for _ in 0..LEGENDRE_MAX_ITER {
            let w = self.ginv(&v)? * xi;
            residual = (v - w).norm();
            if residual <= 1e-3 * LEGENDRE_TOL * v.norm().max(1.0) {
                return Ok(v);
            }
            v = v * (1.0 - LEGENDRE_DAMPING) + w * LEGENDRE_DAMPING;
        }
        let w = self.ginv(&v)? * xi;
        let final_residual = (v - w).norm();
        if final_residual <= LEGENDRE_TOL * v.norm().max(1.0) {
            Ok(v)
        } else {
            Err(Error::Convergence {
                iterations: LEGENDRE_MAX_ITER,
                residual: residual.min(final_residual),
            })
        }
    }

    /// Initial-guess-free check that `v` is the Legendre image of `xi`.
    pub fn legendre_residual(&self, xi: &Vec2, v: &Vec2) -> Result<f64> {
        if v.norm() == 0.0 {
            return Ok(xi.norm());
        }
        Ok((v - self.ginv(v)? * xi).norm())
    }
}

/// Which representation a metric uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricMode {
    ParametricRanders,
    GridSampled,
}

/// Coefficient functions of a Randers metric plus accumulated conformal scales.
#[derive(Debug, Clone)]
pub struct RandersData {
    pub a11: ScalarFn,
    pub a12: ScalarFn,
    pub a22: ScalarFn,
    pub b1: ScalarFn,
    pub b2: ScalarFn,
    /// Factor multiplying `a` (conformal flow history).
    pub a_scale: f64,
    /// Factor multiplying `b`.
    pub b_scale: f64,
}

#[derive(Debug, Clone)]
enum Repr {
    Randers(RandersData),
    Sampled(Arc<Vec<f64>>),
}

/// A (possibly time-dependent) Finsler metric on the periodic grid.
#[derive(Debug, Clone)]
pub struct MetricState {
    grid: GridGeometry,
    pub time: f64,
    repr: Repr,
}

impl MetricState {
    /// Parametric Randers metric; validated at every grid node.
    pub fn randers(
        grid: GridGeometry,
        a11: ScalarFn,
        a12: ScalarFn,
        a22: ScalarFn,
        b1: ScalarFn,
        b2: ScalarFn,
    ) -> Result<Self> {
        let m = MetricState {
            grid,
            time: 0.0,
            repr: Repr::Randers(RandersData {
                a11,
                a12,
                a22,
                b1,
                b2,
                a_scale: 1.0,
                b_scale: 1.0,
            }),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn euclidean(grid: GridGeometry) -> Self {
        let one = ScalarFn::constant(1.0);
        let zero = ScalarFn::constant(0.0);
        MetricState::randers(grid, one.clone(), zero.clone(), one, zero.clone(), zero)
            .expect("euclidean metric is valid")
    }

    /// Riemannian metric `a_ij(x)` (Randers with `b = 0`).
    pub fn riemannian(grid: GridGeometry, a11: ScalarFn, a12: ScalarFn, a22: ScalarFn) -> Result<Self> {
        let zero = ScalarFn::constant(0.0);
        MetricState::randers(grid, a11, a12, a22, zero.clone(), zero)
    }

    /// Metric given by samples `f(x, theta)` on the unit circle bundle.
    pub fn sampled(grid: GridGeometry, f: impl Fn([f64; 2], f64) -> f64) -> Result<Self> {
        let mut samples = Vec::with_capacity(grid.len() * grid.ntheta);
        for idx in 0..grid.len() {
            let (i, j) = grid.node(idx);
            let x = grid.point(i, j);
            for k in 0..grid.ntheta {
                samples.push(f(x, grid.theta(k)));
            }
        }
        Self::from_samples(grid, samples, 0.0)
    }

    pub fn from_samples(grid: GridGeometry, samples: Vec<f64>, time: f64) -> Result<Self> {
        if samples.len() != grid.len() * grid.ntheta {
            return Err(Error::Parameter(format!(
                "expected {} samples, got {}",
                grid.len() * grid.ntheta,
                samples.len()
            )));
        }
        let m = MetricState { grid, time, repr: Repr::Sampled(Arc::new(samples)) };
        m.validate()?;
        Ok(m)
    }

    /// Sample this metric onto the sphere bundle of its grid.
    pub fn to_sampled(&self) -> Result<Self> {
        let g = self.grid;
        let mut samples = Vec::with_capacity(g.len() * g.ntheta);
        for idx in 0..g.len() {
            let (i, j) = g.node(idx);
            let local = self.local(g.point(i, j))?;
            for k in 0..g.ntheta {
                samples.push(local.norm(&g.direction(k)));
            }
        }
        Self::from_samples(g, samples, self.time)
    }

    pub fn grid(&self) -> &GridGeometry {
        &self.grid
    }

    /// Step used for spatial derivatives of the metric at fixed `y`.
    pub fn derivative_step(&self) -> [f64; 2] {
        let l = self.grid.lengths;
        [DERIVATIVE_STEP * l[0] / std::f64::consts::TAU, DERIVATIVE_STEP * l[1] / std::f64::consts::TAU]
    }

    pub fn mode(&self) -> MetricMode {
        match self.repr {
            Repr::Randers(_) => MetricMode::ParametricRanders,
            Repr::Sampled(_) => MetricMode::GridSampled,
        }
    }

    pub fn randers_data(&self) -> Option<&RandersData> {
        match &self.repr {
            Repr::Randers(r) => Some(r),
            Repr::Sampled(_) => None,
        }
    }

    /// `F` samples, index `(j * nx + i) * ntheta + k`.
    pub fn f_samples(&self) -> Option<&[f64]> {
        match &self.repr {
            Repr::Sampled(s) => Some(s.as_slice()),
            Repr::Randers(_) => None,
        }
    }

    /// `a_ij` at every node (parametric mode).
    pub fn a_field(&self) -> Option<Vec<Mat2>> {
        let r = self.randers_data()?;
        Some(
            (0..self.grid.len())
                .map(|idx| {
                    let (i, j) = self.grid.node(idx);
                    let (a, _) = randers_coefficients(r, self.grid.point(i, j));
                    a
                })
                .collect(),
        )
    }

    /// `b_i` at every node (parametric mode).
    pub fn b_field(&self) -> Option<Vec<Vec2>> {
        let r = self.randers_data()?;
        Some(
            (0..self.grid.len())
                .map(|idx| {
                    let (i, j) = self.grid.node(idx);
                    randers_coefficients(r, self.grid.point(i, j)).1
                })
                .collect(),
        )
    }

    /// True when the metric is Randers with `b` identically zero at the nodes.
    pub fn is_riemannian(&self) -> bool {
        self.b_field().is_some_and(|b| b.iter().all(|v| v.norm() == 0.0))
    }

    /// Freeze the norm at a (continuous, periodically wrapped) point.
    pub fn local(&self, x: [f64; 2]) -> Result<Minkowski> {
        let x = self.grid.wrap(x);
        match &self.repr {
            Repr::Randers(r) => {
                let (a, b) = randers_coefficients(r, x);
                Minkowski::randers(a, b).map_err(|e| locate_error(e, x))
            }
            Repr::Sampled(s) => {
                let nt = self.grid.ntheta;
                let column: Vec<f64> =
                    (0..nt).map(|k| interp2(&self.grid, x, |idx| s[idx * nt + k])).collect();
                if let Some(bad) = column.iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::InvalidMetric {
                        location: format!("x = {x:?}"),
                        reason: format!("non-positive F sample {bad}"),
                    });
                }
                Ok(Minkowski::Sampled(Profile::from_samples(&column)))
            }
        }
    }

    /// `F(x, y)` without building the full fiber profile.
    pub fn norm_at(&self, x: [f64; 2], y: &Vec2) -> Result<f64> {
        match &self.repr {
            Repr::Randers(_) => Ok(self.local(x)?.norm(y)),
            Repr::Sampled(s) => {
                let x = self.grid.wrap(x);
                let nt = self.grid.ntheta;
                let h = self.grid.dtheta();
                let (k0, frac) = crate::grid::locate(y[1].atan2(y[0]).rem_euclid(std::f64::consts::TAU), h);
                let column = |k: isize| {
                    let k = k.rem_euclid(nt as isize) as usize;
                    let f = interp2(&self.grid, x, |idx| s[idx * nt + k]);
                    0.5 * f * f
                };
                let phi = if frac == 0.0 {
                    column(k0)
                } else {
                    let w = crate::grid::cubic_weights(frac);
                    (0..4).map(|a| w[a] * column(k0 + a as isize - 1)).sum()
                };
                if !(phi > 0.0) {
                    return Err(Error::InvalidMetric {
                        location: format!("x = {x:?}"),
                        reason: format!("non-positive interpolated F^2/2 = {phi}"),
                    });
                }
                Ok(y.norm() * (2.0 * phi).sqrt())
            }
        }
    }

    /// Check positivity and strong convexity at every node (and every
    /// sampled direction in grid mode).
    pub fn validate(&self) -> Result<()> {
        for idx in 0..self.grid.len() {
            let (i, j) = self.grid.node(idx);
            let x = self.grid.point(i, j);
            let local = self.local(x)?;
            if let Minkowski::Sampled(p) = &local {
                for (k, g) in p.node_tensors().iter().enumerate() {
                    if !is_spd(g) {
                        return Err(Error::DegenerateMetric {
                            location: format!("x = {x:?}, theta = {}", self.grid.theta(k)),
                            reason: format!("fundamental tensor {g:?} not positive definite"),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Multiply `F` by `factor > 0` everywhere.
    pub fn scale(&mut self, factor: f64) {
        match &mut self.repr {
            Repr::Randers(r) => {
                r.a_scale *= factor * factor;
                r.b_scale *= factor;
            }
            Repr::Sampled(s) => {
                for v in Arc::make_mut(s).iter_mut() {
                    *v *= factor;
                }
            }
        }
    }

    /// Replace the sphere-bundle samples (grid mode only).
    pub fn set_samples(&mut self, samples: Vec<f64>) -> Result<()> {
        match &mut self.repr {
            Repr::Sampled(s) if samples.len() == s.len() => {
                *s = Arc::new(samples);
                Ok(())
            }
            _ => Err(Error::Parameter("set_samples requires a grid-sampled metric of the same size".into())),
        }
    }

    /// Same metric description on another grid (parametric mode), used for
    /// mesh-refinement studies.
    pub fn regrid(&self, grid: GridGeometry) -> Result<Self> {
        match &self.repr {
            Repr::Randers(r) => {
                let m = MetricState { grid, time: self.time, repr: Repr::Randers(r.clone()) };
                m.validate()?;
                Ok(m)
            }
            Repr::Sampled(_) => Err(Error::Parameter(
                "grid-sampled metrics cannot be transferred to another grid".into(),
            )),
        }
    }
}

fn randers_coefficients(r: &RandersData, x: [f64; 2]) -> (Mat2, Vec2) {
    let a12 = r.a12.at(x, 0.0);
    let a = Mat2::new(r.a11.at(x, 0.0), a12, a12, r.a22.at(x, 0.0)) * r.a_scale;
    let b = Vec2::new(r.b1.at(x, 0.0), r.b2.at(x, 0.0)) * r.b_scale;
    (a, b)
}

fn locate_error(e: Error, x: [f64; 2]) -> Error {
    match e {
        Error::InvalidMetric { reason, .. } => Error::InvalidMetric { location: format!("x = {x:?}"), reason },
        other => other,
    }
}

pub(crate) fn check_nonzero(y: &Vec2) -> Result<()> {
    if y.norm() > 0.0 && y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Domain(format!("direction must be nonzero and finite, got {:?}", [y[0], y[1]])))
    }
}

/// `F(x, y)`.
pub fn eval_f(m: &MetricState, s: &DirectionSample) -> Result<f64> {
    check_nonzero(&s.y)?;
    Ok(m.local(s.x)?.norm(&s.y))
}

/// All fiber tensors at `(x, y)`, with a positive-definiteness check on `g`.
pub fn fiber_tensors(m: &MetricState, s: &DirectionSample) -> Result<FiberTensors> {
    check_nonzero(&s.y)?;
    let t = m.local(s.x)?.tensors(&s.y).map_err(|e| match e {
        Error::DegenerateMetric { reason, .. } => Error::DegenerateMetric {
            location: format!("x = {:?}, y = {:?}", s.x, [s.y[0], s.y[1]]),
            reason,
        },
        other => other,
    })?;
    if !is_spd(&t.g) {
        return Err(Error::DegenerateMetric {
            location: format!("x = {:?}, y = {:?}", s.x, [s.y[0], s.y[1]]),
            reason: format!("fundamental tensor has eigenvalues {:?}", sym_eigenvalues(&t.g)),
        });
    }
    Ok(t)
}

/// `g_ij(x, y)`.
pub fn fundamental_tensor(m: &MetricState, s: &DirectionSample) -> Result<Mat2> {
    fiber_tensors(m, s).map(|t| t.g)
}

/// `C_ijk(x, y)`.
pub fn cartan_tensor(m: &MetricState, s: &DirectionSample) -> Result<Cartan> {
    fiber_tensors(m, s).map(|t| t.cartan)
}

/// Legendre transform of the covector `xi` at `x`.
pub fn legendre_transform(m: &MetricState, x: [f64; 2], xi: &Vec2) -> Result<Vec2> {
    m.local(x)?.legendre(xi)
}

/// `max F(x, y) / F(x, -y)` over the samples.
pub fn reversibility_estimate(m: &MetricState, samples: &[DirectionSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Parameter("reversibility needs at least one sample".into()));
    }
    let mut rho: f64 = 1.0;
    let mut cached: Option<([f64; 2], Minkowski)> = None;
    for s in samples {
        check_nonzero(&s.y)?;
        let local = match &cached {
            Some((x, l)) if *x == s.x => l,
            _ => {
                cached = Some((s.x, m.local(s.x)?));
                &cached.as_ref().unwrap().1
            }
        };
        rho = rho.max(local.norm(&s.y) / local.norm(&(-s.y)));
    }
    Ok(rho)
}

/// Every node paired with every sampled unit direction.
pub fn sphere_bundle_samples(grid: &GridGeometry) -> Vec<DirectionSample> {
    let mut out = Vec::with_capacity(grid.len() * grid.ntheta);
    for idx in 0..grid.len() {
        let (i, j) = grid.node(idx);
        let x = grid.point(i, j);
        for k in 0..grid.ntheta {
            out.push(DirectionSample::new(x, grid.direction(k)));
        }
    }
    out
}
