//! Gradient, divergence and the nonlinear Finsler Laplacian of the measure
//! `dmu = e^Phi dx`, with the Hessian and the Bochner and Kato diagnostics.
//!
//! The Laplacian is assembled in flux form. On the face between two
//! neighbouring nodes the differential is the one-sided difference in the
//! normal direction and the averaged central difference in the tangential
//! one; the flux is `e^Phi (g^{-1}(x_face, ref) df)_normal` with the reference
//! vector averaged from the two nodes. Summing fluxes telescopes, so the
//! discrete divergence theorem holds to rounding.

use crate::connection::{curvature_in_frame, CurvatureFrame, Stencil};
use crate::error::{Error, Result};
use crate::expr::ScalarFn;
use crate::finsler::{DirectionSample, MetricState, Minkowski, ZERO_GRADIENT};
use crate::grid::{GridGeometry, ScalarField};
use crate::{Mat2, Vec2};

/// Gradient vectors `grad u` per node and the set `M_u` where `du != 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub vectors: Vec<Vec2>,
    pub mask: Vec<bool>,
}

impl GradientField {
    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Central-difference differential `du` at every node.
pub fn differential(grid: &GridGeometry, u: &ScalarField) -> Vec<Vec2> {
    let h = grid.spacing();
    (0..grid.len())
        .map(|idx| {
            let (i, j) = grid.node(idx);
            let (i, j) = (i as isize, j as isize);
            Vec2::new(
                (u.at(i + 1, j) - u.at(i - 1, j)) / (2.0 * h[0]),
                (u.at(i, j + 1) - u.at(i, j - 1)) / (2.0 * h[1]),
            )
        })
        .collect()
}

fn check_field(grid: &GridGeometry, u: &ScalarField) -> Result<()> {
    if !u.matches(grid) {
        return Err(Error::Parameter(format!(
            "field is {} x {}, grid is {} x {}",
            u.nx, u.ny, grid.nx, grid.ny
        )));
    }
    if !u.is_finite() {
        return Err(Error::Domain("field has non-finite values".into()));
    }
    Ok(())
}

/// Metric data reused by every Laplacian evaluation on one snapshot.
#[derive(Debug, Clone)]
pub struct LaplacianPlan {
    grid: GridGeometry,
    nodes: Vec<Minkowski>,
    /// Norms at the faces `x_{i+1/2, j}` and `x_{i, j+1/2}`.
    faces: [Vec<Minkowski>; 2],
    /// `g^{-1}` of the base tensor at the faces (off-mask fallback).
    face_base_inv: [Vec<Mat2>; 2],
    face_weight: [Vec<f64>; 2],
    node_weight_inv: Vec<f64>,
}

impl LaplacianPlan {
    pub fn new(m: &MetricState, measure_phi: &ScalarFn) -> Result<Self> {
        let grid = *m.grid();
        let h = grid.spacing();
        let mut nodes = Vec::with_capacity(grid.len());
        let mut faces = [Vec::with_capacity(grid.len()), Vec::with_capacity(grid.len())];
        let mut face_base_inv = [Vec::with_capacity(grid.len()), Vec::with_capacity(grid.len())];
        let mut face_weight = [Vec::with_capacity(grid.len()), Vec::with_capacity(grid.len())];
        let mut node_weight_inv = Vec::with_capacity(grid.len());
        for idx in 0..grid.len() {
            let (i, j) = grid.node(idx);
            let x = grid.point(i, j);
            nodes.push(m.local(x)?);
            node_weight_inv.push((-measure_phi.at(x, 0.0)).exp());
            for d in 0..2 {
                let mut xf = x;
                xf[d] += 0.5 * h[d];
                let local = m.local(xf)?;
                let base = local.base_tensor();
                face_base_inv[d].push(base.try_inverse().ok_or_else(|| Error::DegenerateMetric {
                    location: format!("x = {xf:?}"),
                    reason: "base tensor not invertible".into(),
                })?);
                faces[d].push(local);
                face_weight[d].push(measure_phi.at(xf, 0.0).exp());
            }
        }
        Ok(LaplacianPlan { grid, nodes, faces, face_base_inv, face_weight, node_weight_inv })
    }

    pub fn grid(&self) -> &GridGeometry {
        &self.grid
    }

    /// Gradient field of `u`: the Legendre transform of `du` at each node.
    pub fn gradient(&self, u: &ScalarField) -> Result<GradientField> {
        check_field(&self.grid, u)?;
        let du = differential(&self.grid, u);
        let mut vectors = Vec::with_capacity(du.len());
        let mut mask = Vec::with_capacity(du.len());
        let mut failed = Vec::new();
        for (idx, xi) in du.iter().enumerate() {
            if xi.norm() <= ZERO_GRADIENT {
                vectors.push(Vec2::zeros());
                mask.push(false);
                continue;
            }
            match self.nodes[idx].legendre(xi) {
                Ok(v) => {
                    vectors.push(v);
                    mask.push(true);
                }
                Err(_) => {
                    failed.push(self.grid.node(idx));
                    vectors.push(Vec2::zeros());
                    mask.push(false);
                }
            }
        }
        if failed.is_empty() {
            Ok(GradientField { vectors, mask })
        } else {
            Err(Error::Gradient { points: failed })
        }
    }

    /// Face fluxes `e^Phi (g^{-1}(ref) df)_normal` in directions 0 and 1;
    /// entry `idx` belongs to the face on the positive side of node `idx`.
    pub fn fluxes(&self, reference: &GradientField, f: &ScalarField) -> Result<[Vec<f64>; 2]> {
        check_field(&self.grid, f)?;
        let g = &self.grid;
        let h = g.spacing();
        let mut out = [vec![0.0; g.len()], vec![0.0; g.len()]];
        for idx in 0..g.len() {
            let (i, j) = g.node(idx);
            let (i, j) = (i as isize, j as isize);
            for (d, flux) in out.iter_mut().enumerate() {
                let (ni, nj) = if d == 0 { (i + 1, j) } else { (i, j + 1) };
                let nidx = g.index(ni, nj);
                let central = |a: isize, b: isize| {
                    if d == 0 {
                        (f.at(a, b + 1) - f.at(a, b - 1)) / (2.0 * h[1])
                    } else {
                        (f.at(a + 1, b) - f.at(a - 1, b)) / (2.0 * h[0])
                    }
                };
                let normal = (f.at(ni, nj) - f.at(i, j)) / h[d];
                let tangential = 0.5 * (central(i, j) + central(ni, nj));
                let df = if d == 0 { Vec2::new(normal, tangential) } else { Vec2::new(tangential, normal) };
                let ginv = if reference.mask[idx] && reference.mask[nidx] {
                    let r = (reference.vectors[idx] + reference.vectors[nidx]) * 0.5;
                    if r.norm() > ZERO_GRADIENT {
                        self.faces[d][idx].ginv(&r)?
                    } else {
                        self.face_base_inv[d][idx]
                    }
                } else {
                    self.face_base_inv[d][idx]
                };
                flux[idx] = self.face_weight[d][idx] * (ginv * df)[d];
            }
        }
        Ok(out)
    }

    /// `div_mu(g^{-1}(ref) df)`: the Laplacian linearized at `ref`.
    pub fn apply(&self, reference: &GradientField, f: &ScalarField) -> Result<ScalarField> {
        let [fx, fy] = self.fluxes(reference, f)?;
        let g = &self.grid;
        let h = g.spacing();
        let values = (0..g.len())
            .map(|idx| {
                let (i, j) = g.node(idx);
                let (i, j) = (i as isize, j as isize);
                let div = (fx[idx] - fx[g.index(i - 1, j)]) / h[0] + (fy[idx] - fy[g.index(i, j - 1)]) / h[1];
                self.node_weight_inv[idx] * div
            })
            .collect();
        Ok(ScalarField { nx: g.nx, ny: g.ny, values, time: f.time })
    }

    /// The nonlinear Laplacian `div_mu(grad u)`.
    pub fn laplacian(&self, u: &ScalarField) -> Result<ScalarField> {
        let grad = self.gradient(u)?;
        self.apply(&grad, u)
    }
}

/// Gradient vector field of `u`.
pub fn gradient_field(m: &MetricState, u: &ScalarField) -> Result<GradientField> {
    check_field(m.grid(), u)?;
    LaplacianPlan::new(m, &ScalarFn::constant(0.0))?.gradient(u)
}

/// `div_mu V = e^{-Phi} d_i(e^Phi V^i)` with central differences.
pub fn divergence(grid: &GridGeometry, measure_phi: &ScalarFn, v: &[Vec2]) -> Result<ScalarField> {
    if v.len() != grid.len() {
        return Err(Error::Parameter(format!("vector field has {} entries, grid has {}", v.len(), grid.len())));
    }
    let h = grid.spacing();
    let w: Vec<f64> = (0..grid.len())
        .map(|idx| {
            let (i, j) = grid.node(idx);
            measure_phi.at(grid.point(i, j), 0.0).exp()
        })
        .collect();
    let values = (0..grid.len())
        .map(|idx| {
            let (i, j) = grid.node(idx);
            let (i, j) = (i as isize, j as isize);
            let flux = |a: isize, b: isize, d: usize| {
                let k = grid.index(a, b);
                w[k] * v[k][d]
            };
            let div = (flux(i + 1, j, 0) - flux(i - 1, j, 0)) / (2.0 * h[0])
                + (flux(i, j + 1, 1) - flux(i, j - 1, 1)) / (2.0 * h[1]);
            div / w[idx]
        })
        .collect();
    Ok(ScalarField { nx: grid.nx, ny: grid.ny, values, time: None })
}

/// Nonlinear Finsler Laplacian `Delta u = div_mu(grad u)`.
pub fn finsler_laplacian(m: &MetricState, measure_phi: &ScalarFn, u: &ScalarField) -> Result<ScalarField> {
    LaplacianPlan::new(m, measure_phi)?.laplacian(u)
}

/// Linearized Laplacian `Delta^{ref} f`.
pub fn weighted_laplacian(
    m: &MetricState,
    measure_phi: &ScalarFn,
    reference: &GradientField,
    f: &ScalarField,
) -> Result<ScalarField> {
    if reference.vectors.len() != m.grid().len() || reference.mask.len() != m.grid().len() {
        return Err(Error::Parameter("reference field does not match the grid".into()));
    }
    LaplacianPlan::new(m, measure_phi)?.apply(reference, f)
}

/// Second partial derivatives of `u` at every node.
fn second_differences(grid: &GridGeometry, u: &ScalarField) -> Vec<Mat2> {
    let h = grid.spacing();
    (0..grid.len())
        .map(|idx| {
            let (i, j) = grid.node(idx);
            let (i, j) = (i as isize, j as isize);
            let uxx = (u.at(i + 1, j) - 2.0 * u.at(i, j) + u.at(i - 1, j)) / (h[0] * h[0]);
            let uyy = (u.at(i, j + 1) - 2.0 * u.at(i, j) + u.at(i, j - 1)) / (h[1] * h[1]);
            let uxy = (u.at(i + 1, j + 1) - u.at(i + 1, j - 1) - u.at(i - 1, j + 1) + u.at(i - 1, j - 1))
                / (4.0 * h[0] * h[1]);
            Mat2::new(uxx, uxy, uxy, uyy)
        })
        .collect()
}

/// Hessian `u_{i|j} = d_i d_j u - Gamma^k_ij(x, ref) u_k`. Off the mask
/// `du = 0` and only second differences remain.
pub fn hessian(m: &MetricState, reference: &GradientField, u: &ScalarField) -> Result<Vec<Mat2>> {
    let grid = *m.grid();
    check_field(&grid, u)?;
    let du = differential(&grid, u);
    let mut out = second_differences(&grid, u);
    for (idx, hes) in out.iter_mut().enumerate() {
        if !reference.mask[idx] {
            continue;
        }
        let (i, j) = grid.node(idx);
        let gamma = Stencil::new(m, grid.point(i, j))?.connection(&reference.vectors[idx])?.gamma;
        for a in 0..2 {
            for b in 0..2 {
                hes[(a, b)] -= (0..2).map(|k| gamma[k][a][b] * du[idx][k]).sum::<f64>();
            }
        }
    }
    Ok(out)
}

/// `g^ik g^jl H_ij H_kl`.
pub fn hs_norm2(ginv: &Mat2, h: &Mat2) -> f64 {
    (ginv * h * ginv * h.transpose()).trace()
}

/// Per-node residual of the Bochner-Weitzenbock identity
/// `Delta^{grad u}(F^2(grad u)) = 2 d(Delta u)(grad u) + 2 |Hess u|^2 + 2 Ric^inf(grad u)`,
/// left side minus right side, zero off the mask.
pub fn bochner_residual(m: &MetricState, measure_phi: &ScalarFn, u: &ScalarField) -> Result<ScalarField> {
    let grid = *m.grid();
    let plan = LaplacianPlan::new(m, measure_phi)?;
    let grad = plan.gradient(u)?;
    let f2 = ScalarField {
        nx: grid.nx,
        ny: grid.ny,
        values: grad.vectors.iter().enumerate().map(|(k, v)| if grad.mask[k] { plan.nodes[k].norm(v).powi(2) } else { 0.0 }).collect(),
        time: u.time,
    };
    let lhs = plan.apply(&grad, &f2)?;
    let lap = plan.apply(&grad, u)?;
    let dlap = differential(&grid, &lap);
    let hess = hessian(m, &grad, u)?;
    let mut values = vec![0.0; grid.len()];
    for (idx, r) in values.iter_mut().enumerate() {
        if !grad.mask[idx] {
            continue;
        }
        let (i, j) = grid.node(idx);
        let x = grid.point(i, j);
        let v = grad.vectors[idx];
        let ginv = plan.nodes[idx].ginv(&v)?;
        let frame = CurvatureFrame::new(m, x)?;
        let c = curvature_in_frame(m, &frame, measure_phi, &DirectionSample::new(x, v), f64::INFINITY)?;
        let rhs = 2.0 * dlap[idx].dot(&v) + 2.0 * hs_norm2(&ginv, &hess[idx]) + 2.0 * (c.ricci + c.s_dot);
        *r = lhs.values[idx] - rhs;
    }
    Ok(ScalarField { nx: grid.nx, ny: grid.ny, values, time: u.time })
}

/// Kato gap `|Hess u|^2_HS - g^{kl}(grad u) dF_k dF_l` with `F = F(grad u)`,
/// zero off the mask.
pub fn kato_gap(m: &MetricState, u: &ScalarField) -> Result<ScalarField> {
    let grid = *m.grid();
    let plan = LaplacianPlan::new(m, &ScalarFn::constant(0.0))?;
    let grad = plan.gradient(u)?;
    let norm = ScalarField {
        nx: grid.nx,
        ny: grid.ny,
        values: grad.vectors.iter().enumerate().map(|(k, v)| if grad.mask[k] { plan.nodes[k].norm(v) } else { 0.0 }).collect(),
        time: u.time,
    };
    let dnorm = differential(&grid, &norm);
    let hess = hessian(m, &grad, u)?;
    let mut values = vec![0.0; grid.len()];
    for (idx, gap) in values.iter_mut().enumerate() {
        if !grad.mask[idx] {
            continue;
        }
        let ginv = plan.nodes[idx].ginv(&grad.vectors[idx])?;
        *gap = hs_norm2(&ginv, &hess[idx]) - (dnorm[idx].transpose() * ginv * dnorm[idx])[(0, 0)];
    }
    Ok(ScalarField { nx: grid.nx, ny: grid.ny, values, time: u.time })
}

/// Tolerance for [`kato_gap`]: `10 max(dx^2, dy^2) max |Hess u|^2`.
pub fn kato_tolerance(m: &MetricState, u: &ScalarField) -> Result<f64> {
    let grid = *m.grid();
    let plan = LaplacianPlan::new(m, &ScalarFn::constant(0.0))?;
    let grad = plan.gradient(u)?;
    let hess = hessian(m, &grad, u)?;
    let mut scale: f64 = 0.0;
    for (idx, h) in hess.iter().enumerate() {
        if grad.mask[idx] {
            scale = scale.max(hs_norm2(&plan.nodes[idx].ginv(&grad.vectors[idx])?, h));
        }
    }
    let s = grid.spacing();
    Ok(10.0 * s[0].max(s[1]).powi(2) * scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn euclid(n: usize) -> MetricState {
        MetricState::euclidean(GridGeometry::torus(n, 16).unwrap())
    }

    #[test]
    fn constant_field_has_empty_mask() {
        let m = euclid(16);
        let u = ScalarField::constant(m.grid(), 2.0);
        let g = gradient_field(&m, &u).unwrap();
        assert_eq!(g.mask_count(), 0);
        assert!(g.vectors.iter().all(|v| *v == Vec2::zeros()));
        let lap = finsler_laplacian(&m, &ScalarFn::constant(0.0), &u).unwrap();
        assert_eq!(lap.max_abs(), 0.0);
    }

    #[test]
    fn euclidean_laplacian_of_sine() {
        let err = |n: usize| {
            let m = euclid(n);
            let u = ScalarField::from_fn(m.grid(), |x| x[0].sin());
            let lap = finsler_laplacian(&m, &ScalarFn::constant(0.3), &u).unwrap();
            let exact = ScalarField::from_fn(m.grid(), |x| -x[0].sin());
            lap.values.iter().zip(&exact.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let (e1, e2) = (err(16), err(32));
        assert!(e1 < 0.05 && (e1 / e2).log2() > 1.9);
    }

    #[test]
    fn divergence_examples() {
        let g = GridGeometry::torus(32, 8).unwrap();
        let v: Vec<Vec2> = (0..g.len()).map(|_| Vec2::new(0.0, 1.0)).collect();
        let phi = ScalarFn::parse("0.2*sin(x2)").unwrap();
        let d = divergence(&g, &phi, &v).unwrap();
        let h = g.spacing()[1];
        for idx in 0..g.len() {
            let (i, j) = g.node(idx);
            let exact = 0.2 * g.point(i, j)[1].cos();
            assert!((d.values[idx] - exact).abs() < 0.02 * h * h * 10.0);
        }
        let weighted: f64 = (0..g.len())
            .map(|idx| {
                let (i, j) = g.node(idx);
                d.values[idx] * phi.at(g.point(i, j), 0.0).exp()
            })
            .sum();
        assert!(weighted.abs() < 1e-10);
    }

    #[test]
    fn euclidean_hessian_of_sine() {
        let m = euclid(32);
        let u = ScalarField::from_fn(m.grid(), |x| x[0].sin());
        let grad = gradient_field(&m, &u).unwrap();
        let h = hessian(&m, &grad, &u).unwrap();
        let dx = m.grid().spacing()[0];
        for idx in 0..m.grid().len() {
            let (i, j) = m.grid().node(idx);
            let x = m.grid().point(i, j);
            assert!((h[idx][(0, 0)] + x[0].sin()).abs() < dx * dx);
            assert!(h[idx][(0, 1)].abs() < 1e-12 && h[idx][(1, 1)].abs() < 1e-12);
        }
    }

    #[test]
    fn linear_function_has_zero_kato_gap() {
        let m = euclid(16);
        let u = ScalarField::from_fn(m.grid(), |x| 0.3 * x[0] + 0.1 * x[1]);
        // a linear function is not periodic; use its restriction away from the seam
        let gap = kato_gap(&m, &u).unwrap();
        let g = m.grid();
        for idx in 0..g.len() {
            let (i, j) = g.node(idx);
            if (2..g.nx - 2).contains(&i) && (2..g.ny - 2).contains(&j) {
                assert!(gap.values[idx].abs() < 1e-10);
            }
        }
    }
}
