//! Chern connection, spray and curvature of a Finsler metric on the torus.
//!
//! Spatial derivatives are central differences of the metric at fixed `y`
//! with the step [`MetricState::derivative_step`]; derivatives along the
//! fiber use the Cartan tensor (`dg/dy = 2C`) or central differences in `y`.
//! Indices follow `gamma[i][j][k] = Gamma^i_jk` and
//! `riemann[i][j][k][l] = R_j^i_kl`.

use crate::error::{Error, Result};
use crate::expr::ScalarFn;
use crate::finsler::{check_nonzero, is_spd, sym_inverse, DirectionSample, MetricState, Minkowski};
use crate::geodesic;
use crate::{Mat2, Vec2};

/// Coefficients `Gamma^i_jk`.
pub type Christoffel = [[[f64; 2]; 2]; 2];

/// Relative fiber step for `y`-derivatives of connection coefficients.
const FIBER_STEP: f64 = 1e-4;
/// Geodesic step (in arclength) for S and its derivative.
pub const S_STEP: f64 = 1e-3;

/// Chern connection data at one point of the tangent bundle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConnectionValue {
    /// Chern coefficients `Gamma^i_jk(x, y)`.
    pub gamma: Christoffel,
    /// Spray coefficients `G^i(x, y)`.
    pub spray: Vec2,
    /// Nonlinear connection `N^i_j = dG^i/dy^j`, stored as `nconn[(i, j)]`.
    pub nconn: Mat2,
}

/// Chern curvature tensor at `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiemannTensor(pub [[[[f64; 2]; 2]; 2]; 2]);

impl RiemannTensor {
    /// `R_j^i_kl`.
    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.0[i][j][k][l]
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().flatten().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Every curvature quantity at one `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvatureValue {
    pub riemann: RiemannTensor,
    /// Flag curvature of the (unique, in dimension 2) flag with pole `y`.
    pub flag: f64,
    /// `Ric(y)`, 2-homogeneous.
    pub ricci: f64,
    pub distortion: f64,
    /// `S(x, y)`, 1-homogeneous.
    pub s_curv: f64,
    /// `S'(x, y)`, 2-homogeneous.
    pub s_dot: f64,
    /// `Ric^N(V)` at `V = y / F(y)`.
    pub weighted: f64,
}

fn located(e: Error, s: &DirectionSample) -> Error {
    match e {
        Error::DegenerateMetric { reason, .. } => Error::DegenerateMetric {
            location: format!("x = {:?}, y = {:?}", s.x, [s.y[0], s.y[1]]),
            reason,
        },
        other => other,
    }
}

fn invert(g: &Mat2, x: [f64; 2], y: &Vec2) -> Result<Mat2> {
    sym_inverse(g).ok_or_else(|| Error::DegenerateMetric {
        location: format!("x = {x:?}, y = {:?}", [y[0], y[1]]),
        reason: "fundamental tensor not invertible".into(),
    })
}

/// The metric frozen at `x` and at `x +- h e_k`.
#[derive(Debug, Clone)]
pub struct Stencil {
    x: [f64; 2],
    h: [f64; 2],
    center: Minkowski,
    plus: [Minkowski; 2],
    minus: [Minkowski; 2],
}

impl Stencil {
    pub fn new(m: &MetricState, x: [f64; 2]) -> Result<Self> {
        let h = m.derivative_step();
        let shift = |k: usize, sign: f64| {
            let mut p = x;
            p[k] += sign * h[k];
            m.local(p)
        };
        Ok(Stencil {
            x,
            h,
            center: m.local(x)?,
            plus: [shift(0, 1.0)?, shift(1, 1.0)?],
            minus: [shift(0, -1.0)?, shift(1, -1.0)?],
        })
    }

    /// The norm at the central point.
    pub fn center(&self) -> &Minkowski {
        &self.center
    }

    /// `d g_ij / d x^k` at fixed `y`.
    fn dg(&self, y: &Vec2) -> [Mat2; 2] {
        [0, 1].map(|k| {
            (self.plus[k].metric_tensor(y) - self.minus[k].metric_tensor(y)) / (2.0 * self.h[k])
        })
    }

    /// Spray coefficients alone; `G(x, 0) = 0`.
    pub fn spray(&self, y: &Vec2) -> Result<Vec2> {
        if y.norm() == 0.0 {
            return Ok(Vec2::zeros());
        }
        let ginv = invert(&self.center.metric_tensor(y), self.x, y)?;
        let gamma = formal_christoffel(&ginv, &self.dg(y));
        Ok(contract_yy(&gamma, y) * 0.5)
    }

    /// Chern connection, spray and nonlinear connection at `y != 0`.
    pub fn connection(&self, y: &Vec2) -> Result<ConnectionValue> {
        let t = self.center.tensors(y)?;
        let dg = self.dg(y);
        let gamma0 = formal_christoffel(&t.ginv, &dg);
        let spray = contract_yy(&gamma0, y) * 0.5;
        // C^i_jk = g^il C_ljk
        let mut cup = [[[0.0; 2]; 2]; 2];
        for (i, ci) in cup.iter_mut().enumerate() {
            for (j, cij) in ci.iter_mut().enumerate() {
                for (k, v) in cij.iter_mut().enumerate() {
                    *v = (0..2).map(|l| t.ginv[(i, l)] * t.cartan.get(l, j, k)).sum();
                }
            }
        }
        let mut nconn = Mat2::zeros();
        for i in 0..2 {
            for j in 0..2 {
                let lin: f64 = (0..2).map(|k| gamma0[i][j][k] * y[k]).sum();
                let corr: f64 = (0..2).map(|k| cup[i][j][k] * 2.0 * spray[k]).sum();
                nconn[(i, j)] = lin - corr;
            }
        }
        // horizontal derivatives of g
        let mut dh = dg;
        for (k, d) in dh.iter_mut().enumerate() {
            for i in 0..2 {
                for j in 0..2 {
                    let c: f64 = (0..2).map(|m| nconn[(m, k)] * t.cartan.get(i, j, m)).sum();
                    d[(i, j)] -= 2.0 * c;
                }
            }
        }
        let gamma = formal_christoffel(&t.ginv, &dh);
        Ok(ConnectionValue { gamma, spray, nconn })
    }
}

/// `1/2 g^il (D_k g_lj + D_j g_lk - D_l g_jk)` for a derivative `D`.
fn formal_christoffel(ginv: &Mat2, d: &[Mat2; 2]) -> Christoffel {
    let mut lower = [[[0.0; 2]; 2]; 2];
    for (l, cl) in lower.iter_mut().enumerate() {
        for (j, clj) in cl.iter_mut().enumerate() {
            for (k, v) in clj.iter_mut().enumerate() {
                *v = 0.5 * (d[k][(l, j)] + d[j][(l, k)] - d[l][(j, k)]);
            }
        }
    }
    let mut out = [[[0.0; 2]; 2]; 2];
    for (i, oi) in out.iter_mut().enumerate() {
        for (j, oij) in oi.iter_mut().enumerate() {
            for (k, v) in oij.iter_mut().enumerate() {
                *v = (0..2).map(|l| ginv[(i, l)] * lower[l][j][k]).sum();
            }
        }
    }
    out
}

fn contract_yy(gamma: &Christoffel, y: &Vec2) -> Vec2 {
    let mut out = Vec2::zeros();
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                out[i] += gamma[i][j][k] * y[j] * y[k];
            }
        }
    }
    out
}

/// Stencils at `x` and its four derivative neighbours; enough for the
/// curvature at every direction over `x`.
#[derive(Debug, Clone)]
pub struct CurvatureFrame {
    h: [f64; 2],
    center: Stencil,
    plus: [Stencil; 2],
    minus: [Stencil; 2],
}

impl CurvatureFrame {
    pub fn new(m: &MetricState, x: [f64; 2]) -> Result<Self> {
        let h = m.derivative_step();
        let shift = |k: usize, sign: f64| {
            let mut p = x;
            p[k] += sign * h[k];
            Stencil::new(m, p)
        };
        Ok(CurvatureFrame {
            h,
            center: Stencil::new(m, x)?,
            plus: [shift(0, 1.0)?, shift(1, 1.0)?],
            minus: [shift(0, -1.0)?, shift(1, -1.0)?],
        })
    }

    pub fn stencil(&self) -> &Stencil {
        &self.center
    }

    /// Chern curvature `R_j^i_kl` at `y != 0`.
    pub fn riemann(&self, y: &Vec2) -> Result<RiemannTensor> {
        let c = self.center.connection(y)?;
        let g = c.gamma;
        let dx: [Christoffel; 2] = [
            diff(&self.plus[0].connection(y)?.gamma, &self.minus[0].connection(y)?.gamma, 2.0 * self.h[0]),
            diff(&self.plus[1].connection(y)?.gamma, &self.minus[1].connection(y)?.gamma, 2.0 * self.h[1]),
        ];
        let eps = FIBER_STEP * y.norm();
        let mut dy = [[[[0.0; 2]; 2]; 2]; 2];
        for (m, d) in dy.iter_mut().enumerate() {
            let mut e = Vec2::zeros();
            e[m] = eps;
            *d = diff(
                &self.center.connection(&(y + e))?.gamma,
                &self.center.connection(&(y - e))?.gamma,
                2.0 * eps,
            );
        }
        // delta_k Gamma^i_jl
        let delta = |k: usize, i: usize, j: usize, l: usize| {
            dx[k][i][j][l] - (0..2).map(|m| c.nconn[(m, k)] * dy[m][i][j][l]).sum::<f64>()
        };
        let mut r = [[[[0.0; 2]; 2]; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let (k, l) = (0, 1);
                let mut v = delta(k, i, j, l) - delta(l, i, j, k);
                for m in 0..2 {
                    v += g[i][k][m] * g[m][j][l] - g[i][l][m] * g[m][j][k];
                }
                r[i][j][k][l] = v;
                r[i][j][l][k] = -v;
            }
        }
        Ok(RiemannTensor(r))
    }
}

fn diff(a: &Christoffel, b: &Christoffel, h: f64) -> Christoffel {
    let mut out = [[[0.0; 2]; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                out[i][j][k] = (a[i][j][k] - b[i][j][k]) / h;
            }
        }
    }
    out
}

/// Chern connection coefficients `Gamma^i_jk(x, y)`.
pub fn chern_coefficients(m: &MetricState, s: &DirectionSample) -> Result<Christoffel> {
    connection(m, s).map(|c| c.gamma)
}

/// Full connection data at `(x, y)`.
pub fn connection(m: &MetricState, s: &DirectionSample) -> Result<ConnectionValue> {
    check_nonzero(&s.y)?;
    Stencil::new(m, s.x)?.connection(&s.y).map_err(|e| located(e, s))
}

/// Spray coefficients `G^i(x, y)`.
pub fn spray_coefficients(m: &MetricState, s: &DirectionSample) -> Result<Vec2> {
    check_nonzero(&s.y)?;
    Stencil::new(m, s.x)?.spray(&s.y).map_err(|e| located(e, s))
}

/// Nonlinear connection `N^i_j(x, y)`.
pub fn nonlinear_connection(m: &MetricState, s: &DirectionSample) -> Result<Mat2> {
    connection(m, s).map(|c| c.nconn)
}

/// Chern curvature at `(x, y)`.
pub fn chern_riemann(m: &MetricState, s: &DirectionSample) -> Result<RiemannTensor> {
    check_nonzero(&s.y)?;
    CurvatureFrame::new(m, s.x)?.riemann(&s.y).map_err(|e| located(e, s))
}

/// Flag curvature from a precomputed curvature tensor and `g_y`.
pub fn flag_from(r: &RiemannTensor, g: &Mat2, y: &Vec2, u: &Vec2) -> Result<f64> {
    let gyy = (y.transpose() * g * y)[(0, 0)];
    let guu = (u.transpose() * g * u)[(0, 0)];
    let gyu = (y.transpose() * g * u)[(0, 0)];
    let den = gyy * guu - gyu * gyu;
    if !(den > 1e-12 * gyy * guu) {
        return Err(Error::DegenerateFlag);
    }
    let mut num = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    let rl: f64 = (0..2).map(|m| g[(j, m)] * r.0[m][i][k][l]).sum();
                    num -= rl * y[i] * u[j] * y[k] * u[l];
                }
            }
        }
    }
    Ok(num / den)
}

/// Flag curvature `K(y, u)` of the flag spanned by `y` and `u`.
pub fn flag_curvature(m: &MetricState, s: &DirectionSample, u: &Vec2) -> Result<f64> {
    check_nonzero(&s.y)?;
    let frame = CurvatureFrame::new(m, s.x)?;
    let g = frame.center.center.metric_tensor(&s.y);
    let r = frame.riemann(&s.y).map_err(|e| located(e, s))?;
    flag_from(&r, &g, &s.y, u)
}

/// Unit `g_y`-normal completing `y / F` to an orthonormal frame: Gram-Schmidt
/// from `e_1`, or from `e_2` when `e_1` is nearly parallel to `y`.
pub fn transverse_frame(g: &Mat2, y: &Vec2) -> Result<Vec2> {
    if !is_spd(g) {
        return Err(Error::DegenerateMetric {
            location: format!("y = {:?}", [y[0], y[1]]),
            reason: "fundamental tensor not positive definite".into(),
        });
    }
    let gyy = (y.transpose() * g * y)[(0, 0)];
    for start in [Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)] {
        let v = start - y * ((y.transpose() * g * start)[(0, 0)] / gyy);
        let n2 = (v.transpose() * g * v)[(0, 0)];
        if n2 > 1e-4 * (start.transpose() * g * start)[(0, 0)] {
            return Ok(v / n2.sqrt());
        }
    }
    Err(Error::DegenerateMetric {
        location: format!("y = {:?}", [y[0], y[1]]),
        reason: "could not complete a g_y-orthonormal frame".into(),
    })
}

fn ricci_from(r: &RiemannTensor, g: &Mat2, y: &Vec2) -> Result<(f64, f64)> {
    let e1 = transverse_frame(g, y)?;
    let k = flag_from(r, g, y, &e1)?;
    let f2 = (y.transpose() * g * y)[(0, 0)];
    Ok((k, f2 * k))
}

/// Ricci curvature `Ric(y) = F^2(y) K(y, e_1)`.
pub fn ricci_curvature(m: &MetricState, s: &DirectionSample) -> Result<f64> {
    check_nonzero(&s.y)?;
    let frame = CurvatureFrame::new(m, s.x)?;
    let g = frame.center.center.metric_tensor(&s.y);
    let r = frame.riemann(&s.y).map_err(|e| located(e, s))?;
    ricci_from(&r, &g, &s.y).map(|(_, ric)| ric)
}

fn tau_local(local: &Minkowski, phi: &ScalarFn, x: [f64; 2], y: &Vec2) -> Result<f64> {
    let g = local.metric_tensor(y);
    let det = g.determinant();
    if !(det > 0.0) {
        return Err(Error::DegenerateMetric {
            location: format!("x = {x:?}, y = {:?}", [y[0], y[1]]),
            reason: format!("det g = {det}"),
        });
    }
    Ok(0.5 * det.ln() - phi.at(x, 0.0))
}

/// Distortion `tau = 1/2 log det g(x, y) - Phi(x)` of the measure `e^Phi dx`.
pub fn distortion(m: &MetricState, measure_phi: &ScalarFn, s: &DirectionSample) -> Result<f64> {
    check_nonzero(&s.y)?;
    tau_local(&m.local(s.x)?, measure_phi, s.x, &s.y)
}

/// `S` and `S'` at `(x, y)` from central and second differences of `tau`
/// along the geodesic with initial velocity `y`, Richardson-extrapolated.
pub fn s_pair(m: &MetricState, measure_phi: &ScalarFn, s: &DirectionSample) -> Result<(f64, f64)> {
    check_nonzero(&s.y)?;
    let local = m.local(s.x)?;
    let f = local.norm(&s.y);
    let tau0 = tau_local(&local, measure_phi, s.x, &s.y)?;
    let tau_at = |t: f64| -> Result<f64> {
        let (x, v) = geodesic::flow(m, s.x, s.y, t, 1)?;
        tau_local(&m.local(x)?, measure_phi, x, &v)
    };
    let h = S_STEP / f;
    let diffs = |h: f64| -> Result<(f64, f64)> {
        let (p, q) = (tau_at(h)?, tau_at(-h)?);
        Ok(((p - q) / (2.0 * h), (p - 2.0 * tau0 + q) / (h * h)))
    };
    let (d1, d2) = diffs(h)?;
    let (e1, e2) = diffs(0.5 * h)?;
    Ok(((4.0 * e1 - d1) / 3.0, (4.0 * e2 - d2) / 3.0))
}

/// S-curvature `S(x, y)`.
pub fn s_curvature(m: &MetricState, measure_phi: &ScalarFn, s: &DirectionSample) -> Result<f64> {
    s_pair(m, measure_phi, s).map(|p| p.0)
}

/// Derivative `S'(x, y)` of the S-curvature along the geodesic.
pub fn s_dot(m: &MetricState, measure_phi: &ScalarFn, s: &DirectionSample) -> Result<f64> {
    s_pair(m, measure_phi, s).map(|p| p.1)
}

/// `Ric^N` on the unit vector from `Ric`, `S`, `S'` at a unit vector.
/// `N = n = 2` with `S != 0` gives `-inf`.
pub fn weighted_from_parts(ric: f64, s: f64, s_dot: f64, n_weight: f64) -> Result<f64> {
    const DIM: f64 = 2.0;
    if n_weight.is_nan() || n_weight < DIM {
        return Err(Error::Parameter(format!("weight N = {n_weight} must be at least the dimension 2")));
    }
    if n_weight.is_infinite() {
        Ok(ric + s_dot)
    } else if n_weight == DIM {
        Ok(if s.abs() <= 1e-9 { ric + s_dot } else { f64::NEG_INFINITY })
    } else {
        Ok(ric + s_dot - s * s / (n_weight - DIM))
    }
}

/// All curvature quantities at `(x, y)` given a prepared frame.
pub fn curvature_in_frame(
    m: &MetricState,
    frame: &CurvatureFrame,
    measure_phi: &ScalarFn,
    s: &DirectionSample,
    n_weight: f64,
) -> Result<CurvatureValue> {
    check_nonzero(&s.y)?;
    let local = frame.center.center();
    let g = local.metric_tensor(&s.y);
    let riemann = frame.riemann(&s.y).map_err(|e| located(e, s))?;
    let (flag, ricci) = ricci_from(&riemann, &g, &s.y)?;
    let distortion = tau_local(local, measure_phi, s.x, &s.y)?;
    let (s_curv, s_dot) = s_pair(m, measure_phi, s)?;
    let f = local.norm(&s.y);
    let weighted = weighted_from_parts(ricci / (f * f), s_curv / f, s_dot / (f * f), n_weight)?;
    Ok(CurvatureValue { riemann, flag, ricci, distortion, s_curv, s_dot, weighted })
}

/// All curvature quantities at `(x, y)`.
pub fn curvature(m: &MetricState, measure_phi: &ScalarFn, s: &DirectionSample, n_weight: f64) -> Result<CurvatureValue> {
    let frame = CurvatureFrame::new(m, s.x)?;
    curvature_in_frame(m, &frame, measure_phi, s, n_weight)
}

/// Weighted Ricci curvature `Ric^N(V)` at `V = y / F(y)`.
pub fn weighted_ricci(m: &MetricState, measure_phi: &ScalarFn, s: &DirectionSample, n_weight: f64) -> Result<f64> {
    weighted_from_parts(0.0, 0.0, 0.0, n_weight)?;
    curvature(m, measure_phi, s, n_weight).map(|c| c.weighted)
}

/// Result of [`estimate_k`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KEstimate {
    /// `max(0, -min Ric^N)`.
    pub k: f64,
    pub min_weighted: f64,
    pub argmin: DirectionSample,
}

/// Smallest `K >= 0` with `Ric^N >= -K` over the samples.
pub fn estimate_k(m: &MetricState, measure_phi: &ScalarFn, n_weight: f64, samples: &[DirectionSample]) -> Result<KEstimate> {
    weighted_from_parts(0.0, 0.0, 0.0, n_weight)?;
    let first = samples.first().ok_or_else(|| Error::Parameter("no samples".into()))?;
    let mut best = KEstimate { k: 0.0, min_weighted: f64::INFINITY, argmin: *first };
    let mut frame: Option<([f64; 2], CurvatureFrame)> = None;
    for s in samples {
        if frame.as_ref().is_none_or(|(x, _)| *x != s.x) {
            frame = Some((s.x, CurvatureFrame::new(m, s.x)?));
        }
        let fr = &frame.as_ref().expect("frame set").1;
        let w = curvature_in_frame(m, fr, measure_phi, s, n_weight)?.weighted;
        if w == f64::NEG_INFINITY {
            return Err(Error::CdViolated { x: s.x, y: [s.y[0], s.y[1]] });
        }
        if w < best.min_weighted {
            best.min_weighted = w;
            best.argmin = *s;
        }
    }
    best.k = (-best.min_weighted).max(0.0);
    Ok(best)
}
