//! Geodesics from the spray and forward distances on the grid graph.
//!
//! Geodesics solve `x'' + 2 G(x, x') = 0` with the classical fourth-order
//! Runge-Kutta scheme. Distances are shortest paths on the directed graph
//! joining every node to a fixed set of lattice neighbours, each edge costed
//! by Simpson's rule for `int F` along the straight segment.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::connection::Stencil;
use crate::error::{Error, Result};
use crate::finsler::MetricState;
use crate::Vec2;

/// Geodesic acceleration `-2 G(x, v)`.
pub fn acceleration(m: &MetricState, x: [f64; 2], v: &Vec2) -> Result<Vec2> {
    if v.norm() == 0.0 {
        return Ok(Vec2::zeros());
    }
    Ok(Stencil::new(m, x)?.spray(v)? * -2.0)
}

fn integration_error(e: Error, x: [f64; 2], v: &Vec2) -> Error {
    match e {
        Error::Integration { .. } => e,
        other => Error::Integration { reason: other.to_string(), x, v: [v[0], v[1]] },
    }
}

fn rk4_step(m: &MetricState, x: [f64; 2], v: Vec2, h: f64) -> Result<([f64; 2], Vec2)> {
    let shift = |x: [f64; 2], d: Vec2, s: f64| [x[0] + s * d[0], x[1] + s * d[1]];
    let acc = |x: [f64; 2], v: &Vec2| acceleration(m, x, v).map_err(|e| integration_error(e, x, v));
    let (k1x, k1v) = (v, acc(x, &v)?);
    let (k2x, k2v) = (v + k1v * (0.5 * h), acc(shift(x, k1x, 0.5 * h), &(v + k1v * (0.5 * h)))?);
    let (k3x, k3v) = (v + k2v * (0.5 * h), acc(shift(x, k2x, 0.5 * h), &(v + k2v * (0.5 * h)))?);
    let (k4x, k4v) = (v + k3v * h, acc(shift(x, k3x, h), &(v + k3v * h))?);
    let dx = (k1x + (k2x + k3x) * 2.0 + k4x) * (h / 6.0);
    let dv = (k1v + (k2v + k3v) * 2.0 + k4v) * (h / 6.0);
    Ok(([x[0] + dx[0], x[1] + dx[1]], v + dv))
}

/// Position and velocity after time `t` (negative allowed) along the
/// geodesic with initial data `(x, v)`, using `steps` equal RK4 steps.
pub fn flow(m: &MetricState, x: [f64; 2], v: Vec2, t: f64, steps: usize) -> Result<([f64; 2], Vec2)> {
    let steps = steps.max(1);
    let h = t / steps as f64;
    let mut state = (x, v);
    for _ in 0..steps {
        state = rk4_step(m, state.0, state.1, h)?;
    }
    Ok(state)
}

/// A sampled geodesic.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicArc {
    /// `(x, x')` at the accepted steps, starting with the initial data.
    pub states: Vec<([f64; 2], Vec2)>,
    /// Parameter values of the states.
    pub times: Vec<f64>,
    /// `int F(x') dt` along the arc.
    pub arclength: f64,
    /// Largest relative deviation of `F(x')` from its initial value.
    pub speed_drift: f64,
}

impl GeodesicArc {
    pub fn end(&self) -> ([f64; 2], Vec2) {
        *self.states.last().expect("arc has at least one state")
    }
}

/// Integrate the geodesic from `(x0, y0)` until its length reaches `length`,
/// with step doubling so that the local error per unit length stays below `tol`.
pub fn geodesic_shoot(m: &MetricState, x0: [f64; 2], y0: Vec2, length: f64, tol: f64) -> Result<GeodesicArc> {
    if y0.norm() == 0.0 || !y0.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain("geodesic needs a nonzero initial velocity".into()));
    }
    if !(length >= 0.0 && tol > 0.0) {
        return Err(Error::Parameter(format!("need length >= 0 and tol > 0 (got {length}, {tol})")));
    }
    let speed0 = m.norm_at(x0, &y0)?;
    let duration = length / speed0;
    let hmin = m.grid().spacing()[0].min(m.grid().spacing()[1]);
    let mut dt = (0.1 * hmin / speed0).min(duration.max(f64::MIN_POSITIVE));
    let mut arc = GeodesicArc { states: vec![(x0, y0)], times: vec![0.0], arclength: 0.0, speed_drift: 0.0 };
    let (mut x, mut v, mut t) = (x0, y0, 0.0);
    while t < duration {
        let step = dt.min(duration - t);
        if step < 1e-12 * duration.max(1e-300) && duration - t > step {
            return Err(Error::Integration {
                reason: format!("step size underflow (dt = {step:e})"),
                x,
                v: [v[0], v[1]],
            });
        }
        let coarse = rk4_step(m, x, v, step)?;
        let half = rk4_step(m, x, v, 0.5 * step)?;
        let fine = rk4_step(m, half.0, half.1, 0.5 * step)?;
        let err = ((fine.0[0] - coarse.0[0]).hypot(fine.0[1] - coarse.0[1]) + (fine.1 - coarse.1).norm() / v.norm())
            / 15.0;
        let budget = tol * step / duration.max(1e-300);
        if err <= budget || step <= 1e-12 * duration {
            let f0 = m.norm_at(x, &v)?;
            let fm = m.norm_at(half.0, &half.1)?;
            let f1 = m.norm_at(fine.0, &fine.1)?;
            arc.arclength += step * ((f0 + f1) + 4.0 * fm) / 6.0;
            arc.speed_drift = arc.speed_drift.max((f1 - speed0).abs() / speed0);
            t += step;
            x = fine.0;
            v = fine.1;
            arc.states.push((x, v));
            arc.times.push(t);
            let grow = if err > 0.0 { 0.9 * (budget / err).powf(0.2) } else { 2.0 };
            dt = step * grow.clamp(0.2, 2.0);
        } else {
            dt = step * (0.9 * (budget / err).powf(0.2)).clamp(0.1, 0.5);
        }
    }
    Ok(arc)
}

/// Neighbour set of the distance graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NeighborStencil {
    /// Offsets `(1,0)`, `(1,1)`, `(2,1)` and their symmetric images.
    #[default]
    #[serde(rename = "16")]
    Sixteen,
    /// The 16 offsets plus `(3,1)`, `(3,2)` and their symmetric images.
    #[serde(rename = "32")]
    ThirtyTwo,
}

impl NeighborStencil {
    pub fn from_count(n: usize) -> Result<Self> {
        match n {
            16 => Ok(NeighborStencil::Sixteen),
            32 => Ok(NeighborStencil::ThirtyTwo),
            _ => Err(Error::Parameter(format!("stencil must have 16 or 32 neighbours (got {n})"))),
        }
    }

    pub fn count(self) -> usize {
        match self {
            NeighborStencil::Sixteen => 16,
            NeighborStencil::ThirtyTwo => 32,
        }
    }

    /// Lattice offsets, each with its symmetric images.
    pub fn offsets(self) -> Vec<(isize, isize)> {
        let mut base: Vec<(isize, isize)> = vec![(1, 0), (1, 1), (2, 1)];
        if self == NeighborStencil::ThirtyTwo {
            base.extend([(3, 1), (3, 2)]);
        }
        let mut out = Vec::new();
        for (a, b) in base {
            for (p, q) in [(a, b), (b, a)] {
                for (sp, sq) in [(1, 1), (-1, 1), (1, -1), (-1, -1)] {
                    let o = (sp * p, sq * q);
                    if !out.contains(&o) {
                        out.push(o);
                    }
                }
            }
        }
        out
    }

    /// Worst-case relative excess of graph distance over Euclidean distance
    /// on a square lattice: `1 / cos(gap / 2) - 1` for the widest angular gap
    /// between neighbour directions.
    pub fn euclidean_error_bound(self) -> f64 {
        let mut angles: Vec<f64> =
            self.offsets().iter().map(|&(a, b)| (b as f64).atan2(a as f64)).collect();
        angles.sort_by(f64::total_cmp);
        let n = angles.len();
        let gap = (0..n)
            .map(|k| {
                let next = if k + 1 < n { angles[k + 1] } else { angles[0] + std::f64::consts::TAU };
                next - angles[k]
            })
            .fold(0.0, f64::max);
        1.0 / (0.5 * gap).cos() - 1.0
    }
}

/// Directed, weighted lattice graph of one metric snapshot.
#[derive(Debug, Clone)]
pub struct DistanceGraph {
    nx: usize,
    ny: usize,
    stencil: NeighborStencil,
    edges: Vec<Vec<(usize, f64)>>,
}

impl DistanceGraph {
    pub fn build(m: &MetricState, stencil: NeighborStencil) -> Result<Self> {
        let grid = *m.grid();
        let h = grid.spacing();
        let offsets = stencil.offsets();
        let mut edges = Vec::with_capacity(grid.len());
        for idx in 0..grid.len() {
            let (i, j) = grid.node(idx);
            let p = grid.point(i, j);
            let mut out = Vec::with_capacity(offsets.len());
            for &(a, b) in &offsets {
                let d = Vec2::new(a as f64 * h[0], b as f64 * h[1]);
                let f0 = m.norm_at(p, &d)?;
                let fm = m.norm_at([p[0] + 0.5 * d[0], p[1] + 0.5 * d[1]], &d)?;
                let f1 = m.norm_at([p[0] + d[0], p[1] + d[1]], &d)?;
                let target = grid.index(i as isize + a, j as isize + b);
                out.push((target, ((f0 + f1) + 4.0 * fm) / 6.0));
            }
            edges.push(out);
        }
        Ok(DistanceGraph { nx: grid.nx, ny: grid.ny, stencil, edges })
    }

    pub fn stencil(&self) -> NeighborStencil {
        self.stencil
    }

    /// Forward distances from node `src` to every node.
    pub fn from_node(&self, src: usize) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.edges.len()];
        let mut heap = BinaryHeap::new();
        dist[src] = 0.0;
        heap.push(Reverse((Key(0.0), src)));
        while let Some(Reverse((Key(d), u))) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for &(v, w) in &self.edges[u] {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(Reverse((Key(nd), v)));
                }
            }
        }
        dist
    }

    /// Forward distance between grid nodes `(i, j)`.
    pub fn distance(&self, from: (usize, usize), to: (usize, usize)) -> f64 {
        let src = from.1 * self.nx + from.0;
        let dst = to.1 * self.nx + to.0;
        debug_assert!(dst < self.nx * self.ny);
        self.from_node(src)[dst]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Key(f64);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Forward distance `d(x_from, x_to)` between grid nodes on the 16-neighbour graph.
pub fn finsler_distance(m: &MetricState, x_from: (usize, usize), x_to: (usize, usize)) -> Result<f64> {
    let g = m.grid();
    if x_from.0 >= g.nx || x_from.1 >= g.ny || x_to.0 >= g.nx || x_to.1 >= g.ny {
        return Err(Error::Parameter(format!("points {x_from:?}, {x_to:?} are not grid nodes")));
    }
    Ok(DistanceGraph::build(m, NeighborStencil::Sixteen)?.distance(x_from, x_to))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::ScalarFn;
    use crate::grid::GridGeometry;
    use std::f64::consts::PI;

    fn randers_x(b1: f64, n: usize) -> MetricState {
        MetricState::randers(
            GridGeometry::torus(n, 16).unwrap(),
            ScalarFn::constant(1.0),
            ScalarFn::constant(0.0),
            ScalarFn::constant(1.0),
            ScalarFn::constant(b1),
            ScalarFn::constant(0.0),
        )
        .unwrap()
    }

    #[test]
    fn straight_lines_for_constant_coefficients() {
        let m = randers_x(0.1, 16);
        let arc = geodesic_shoot(&m, [0.2, 0.3], Vec2::new(0.6, 0.8), 2.0, 1e-8).unwrap();
        let (x, v) = arc.end();
        let t = *arc.times.last().unwrap();
        assert!((x[0] - (0.2 + 0.6 * t)).abs() < 1e-12 && (x[1] - (0.3 + 0.8 * t)).abs() < 1e-12);
        assert!((v - Vec2::new(0.6, 0.8)).norm() < 1e-12);
        assert!((arc.arclength - 2.0).abs() < 1e-12);
    }

    #[test]
    fn conformal_geodesic_matches_step_halving() {
        let e = ScalarFn::parse("exp(0.2*sin(x1))").unwrap();
        let m = MetricState::riemannian(GridGeometry::torus(16, 16).unwrap(), e.clone(), ScalarFn::constant(0.0), e)
            .unwrap();
        let tol = 1e-7;
        let arc = geodesic_shoot(&m, [0.1, 0.2], Vec2::new(1.0, 0.5), 3.0, tol).unwrap();
        let (x, _) = arc.end();
        let t = *arc.times.last().unwrap();
        let (xr, _) = flow(&m, [0.1, 0.2], Vec2::new(1.0, 0.5), t, 4000).unwrap();
        assert!((x[0] - xr[0]).hypot(x[1] - xr[1]) < 10.0 * tol);
        assert!(arc.speed_drift < tol);
    }

    #[test]
    fn stencil_bounds() {
        assert_eq!(NeighborStencil::Sixteen.offsets().len(), 16);
        assert_eq!(NeighborStencil::ThirtyTwo.offsets().len(), 32);
        let b16 = NeighborStencil::Sixteen.euclidean_error_bound();
        assert!((b16 - (1.0 / (0.5 * 0.5f64.atan()).cos() - 1.0)).abs() < 1e-15);
        assert!(NeighborStencil::ThirtyTwo.euclidean_error_bound() < b16);
    }

    #[test]
    fn randers_distances_are_asymmetric() {
        let m = randers_x(0.1, 16);
        let g = DistanceGraph::build(&m, NeighborStencil::Sixteen).unwrap();
        assert!((g.distance((0, 0), (4, 0)) - 0.55 * PI).abs() < 1e-12);
        assert!((g.distance((4, 0), (0, 0)) - 0.45 * PI).abs() < 1e-12);
        assert!((g.distance((0, 0), (8, 0)) - 0.9 * PI).abs() < 1e-12);
        assert_eq!(g.distance((3, 5), (3, 5)), 0.0);
    }
}
