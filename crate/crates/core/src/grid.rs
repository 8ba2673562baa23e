//! Periodic grids on the flat 2-torus and fields living on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::ScalarFn;
use crate::Vec2;

/// Discretization of the torus `[0, L1) x [0, L2)` plus a uniform set of
/// fiber directions `theta_k = 2 pi k / ntheta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub nx: usize,
    pub ny: usize,
    pub lengths: [f64; 2],
    pub ntheta: usize,
}

impl GridGeometry {
    pub fn new(nx: usize, ny: usize, lengths: [f64; 2], ntheta: usize) -> Result<Self> {
        let g = GridGeometry { nx, ny, lengths, ntheta };
        let problems = g.problems();
        if problems.is_empty() {
            Ok(g)
        } else {
            Err(Error::Parameter(problems.join("; ")))
        }
    }

    /// Square `2 pi`-periodic torus with `n x n` nodes.
    pub fn torus(n: usize, ntheta: usize) -> Result<Self> {
        Self::new(n, n, [std::f64::consts::TAU; 2], ntheta)
    }

    pub(crate) fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.nx < 8 || self.ny < 8 {
            out.push(format!("grid sizes must be >= 8 (got {} x {})", self.nx, self.ny));
        }
        if self.ntheta < 8 {
            out.push(format!("ntheta must be >= 8 (got {})", self.ntheta));
        }
        if !(self.lengths[0] > 0.0 && self.lengths[1] > 0.0)
            || !self.lengths.iter().all(|l| l.is_finite())
        {
            out.push(format!("periods must be positive and finite (got {:?})", self.lengths));
        }
        out
    }

    pub fn spacing(&self) -> [f64; 2] {
        [self.lengths[0] / self.nx as f64, self.lengths[1] / self.ny as f64]
    }

    pub fn dtheta(&self) -> f64 {
        std::f64::consts::TAU / self.ntheta as f64
    }

    /// Number of spatial nodes.
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of node `(i, j)` with periodic wrapping.
    #[inline]
    pub fn index(&self, i: isize, j: isize) -> usize {
        let i = i.rem_euclid(self.nx as isize) as usize;
        let j = j.rem_euclid(self.ny as isize) as usize;
        j * self.nx + i
    }

    /// Inverse of [`GridGeometry::index`].
    #[inline]
    pub fn node(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }

    #[inline]
    pub fn point(&self, i: usize, j: usize) -> [f64; 2] {
        let h = self.spacing();
        [i as f64 * h[0], j as f64 * h[1]]
    }

    pub fn theta(&self, k: usize) -> f64 {
        k as f64 * self.dtheta()
    }

    /// Unit Euclidean direction at fiber angle index `k`.
    pub fn direction(&self, k: usize) -> Vec2 {
        let th = self.theta(k);
        Vec2::new(th.cos(), th.sin())
    }

    /// Reduce a point to the fundamental domain.
    pub fn wrap(&self, x: [f64; 2]) -> [f64; 2] {
        [x[0].rem_euclid(self.lengths[0]), x[1].rem_euclid(self.lengths[1])]
    }

    /// Same grid with a different resolution (periods and ntheta unchanged).
    pub fn with_resolution(&self, nx: usize, ny: usize) -> Result<Self> {
        Self::new(nx, ny, self.lengths, self.ntheta)
    }

    pub fn with_ntheta(&self, ntheta: usize) -> Result<Self> {
        Self::new(self.nx, self.ny, self.lengths, ntheta)
    }
}

/// A real value per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
    pub time: Option<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &GridGeometry) -> Self {
        ScalarField { nx: grid.nx, ny: grid.ny, values: vec![0.0; grid.len()], time: None }
    }

    pub fn constant(grid: &GridGeometry, c: f64) -> Self {
        ScalarField { nx: grid.nx, ny: grid.ny, values: vec![c; grid.len()], time: None }
    }

    pub fn from_fn(grid: &GridGeometry, f: impl Fn([f64; 2]) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|idx| {
                let (i, j) = grid.node(idx);
                f(grid.point(i, j))
            })
            .collect();
        ScalarField { nx: grid.nx, ny: grid.ny, values, time: None }
    }

    /// Sample a scalar function at time `t`.
    pub fn sample(grid: &GridGeometry, f: &ScalarFn, t: f64) -> Self {
        let mut s = Self::from_fn(grid, |x| f.at(x, t));
        s.time = Some(t);
        s
    }

    #[inline]
    pub fn at(&self, i: isize, j: isize) -> f64 {
        let i = i.rem_euclid(self.nx as isize) as usize;
        let j = j.rem_euclid(self.ny as isize) as usize;
        self.values[j * self.nx + i]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        ScalarField {
            nx: self.nx,
            ny: self.ny,
            values: self.values.iter().map(|&v| f(v)).collect(),
            time: self.time,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn matches(&self, grid: &GridGeometry) -> bool {
        self.nx == grid.nx && self.ny == grid.ny
    }
}

/// Lagrange weights for the stencil offsets `-1, 0, 1, 2` at fractional
/// position `s` in `[0, 1)`.
#[inline]
pub(crate) fn cubic_weights(s: f64) -> [f64; 4] {
    [
        -s * (s - 1.0) * (s - 2.0) / 6.0,
        (s + 1.0) * (s - 1.0) * (s - 2.0) / 2.0,
        -(s + 1.0) * s * (s - 2.0) / 2.0,
        (s + 1.0) * s * (s - 1.0) / 6.0,
    ]
}

/// Cell index and fractional offset of coordinate `x` on a grid of step `h`.
/// Coordinates within 1e-11 cells of a node snap to it, so node evaluation is exact.
#[inline]
pub(crate) fn locate(x: f64, h: f64) -> (isize, f64) {
    let u = x / h;
    let r = u.round();
    if (u - r).abs() < 1e-11 {
        (r as isize, 0.0)
    } else {
        let f = u.floor();
        (f as isize, u - f)
    }
}

/// Periodic cubic interpolation of a node function at a continuous point.
pub(crate) fn interp2(grid: &GridGeometry, x: [f64; 2], value: impl Fn(usize) -> f64) -> f64 {
    let h = grid.spacing();
    let (i0, sx) = locate(x[0], h[0]);
    let (j0, sy) = locate(x[1], h[1]);
    if sx == 0.0 && sy == 0.0 {
        return value(grid.index(i0, j0));
    }
    let wx = cubic_weights(sx);
    let wy = cubic_weights(sy);
    let mut acc = 0.0;
    for (b, wyb) in wy.iter().enumerate() {
        if *wyb == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for (a, wxa) in wx.iter().enumerate() {
            if *wxa == 0.0 {
                continue;
            }
            row += wxa * value(grid.index(i0 + a as isize - 1, j0 + b as isize - 1));
        }
        acc += wyb * row;
    }
    acc
}

/// Periodic cubic interpolation on a uniform periodic 1-D table.
pub(crate) fn interp_periodic(table: &[f64], step: f64, x: f64) -> f64 {
    let n = table.len() as isize;
    let (i0, s) = locate(x, step);
    if s == 0.0 {
        return table[i0.rem_euclid(n) as usize];
    }
    let w = cubic_weights(s);
    let mut acc = 0.0;
    for (a, wa) in w.iter().enumerate() {
        acc += wa * table[(i0 + a as isize - 1).rem_euclid(n) as usize];
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_grids() {
        assert!(GridGeometry::torus(4, 16).is_err());
        assert!(GridGeometry::torus(16, 4).is_err());
        assert!(GridGeometry::new(16, 16, [0.0, 1.0], 16).is_err());
        assert!(GridGeometry::torus(16, 16).is_ok());
    }

    #[test]
    fn periodic_indexing_roundtrip() {
        let g = GridGeometry::torus(8, 8).unwrap();
        assert_eq!(g.index(-1, 0), g.index(7, 0));
        assert_eq!(g.index(8, 9), g.index(0, 1));
        for idx in 0..g.len() {
            let (i, j) = g.node(idx);
            assert_eq!(g.index(i as isize, j as isize), idx);
        }
    }

    #[test]
    fn interpolation_is_exact_at_nodes_and_on_cubics() {
        let g = GridGeometry::torus(16, 16).unwrap();
        let f = ScalarField::from_fn(&g, |x| x[0].sin() * x[1].cos());
        let p = g.point(3, 5);
        assert_eq!(interp2(&g, p, |k| f.values[k]), f.at(3, 5));

        // cubic weights reproduce cubic polynomials exactly
        let poly = |s: f64| 1.0 - 2.0 * s + 0.5 * s * s - 0.25 * s * s * s;
        for s in [0.1, 0.37, 0.9] {
            let w = cubic_weights(s);
            let v: f64 = (0..4).map(|a| w[a] * poly(a as f64 - 1.0)).sum();
            assert!((v - poly(s)).abs() < 1e-14);
        }
    }

    #[test]
    fn interpolation_error_is_fourth_order() {
        let err = |n: usize| {
            let g = GridGeometry::torus(n, 8).unwrap();
            let f = ScalarField::from_fn(&g, |x| x[0].sin() + (2.0 * x[1]).cos());
            (0..50)
                .map(|q| {
                    let x = [0.123 * q as f64, 0.271 * q as f64 + 0.05];
                    (interp2(&g, x, |k| f.values[k]) - (x[0].sin() + (2.0 * x[1]).cos())).abs()
                })
                .fold(0.0, f64::max)
        };
        let order = (err(16) / err(32)).log2();
        assert!(order > 3.5, "order {order}");
    }
}
