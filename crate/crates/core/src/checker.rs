//! Constants of the Shi-type and Hamilton-type gradient estimates and of the
//! Harnack inequality, and their verification against computed trajectories.
//!
//! Inputs come either from the trajectory and metric history (`measured`) or
//! from the user (`declared`). Declared inputs tighter than their measured
//! counterparts are reported as inconsistent instead of being used silently.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::connection::estimate_k;
use crate::error::{Error, Result};
use crate::expr::ScalarFn;
use crate::finsler::{reversibility_estimate, sphere_bundle_samples};
use crate::geodesic::{DistanceGraph, NeighborStencil};
use crate::grid::GridGeometry;
use crate::laplacian::{differential, gradient_field};
use crate::pde::{signed_power, PdeParams, SolutionTrajectory};

/// Serde for reals that may be `+inf`, written as the string `"inf"`.
pub mod extended_real {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Number(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) if t == "inf" || t == "infinity" => Ok(f64::INFINITY),
            Repr::Text(t) => Err(D::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}

/// Where a set of hypothesis constants came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputSource {
    #[default]
    Declared,
    Measured,
}

/// Hypothesis constants of the gradient estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundInputs {
    /// Lower bound `Ric^N >= -K`.
    #[serde(rename = "K")]
    pub k: f64,
    /// Deformation bound `-L1 g <= h <= L1 g`.
    #[serde(rename = "L1")]
    pub l1: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    #[serde(rename = "B")]
    pub b: f64,
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub rho: f64,
    #[serde(rename = "N", with = "extended_real")]
    pub n_weight: f64,
    #[serde(default)]
    pub source: InputSource,
}

impl BoundInputs {
    /// Every violated sign or domain constraint.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let nonneg = [("K", self.k), ("L1", self.l1), ("sigma1", self.sigma1), ("sigma2", self.sigma2)];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(format!("{name} must be finite and >= 0 (got {v})"));
            }
        }
        if !(self.delta > 0.0 && self.b >= self.delta && self.b.is_finite()) {
            out.push(format!("need B >= delta > 0 (got B = {}, delta = {})", self.b, self.delta));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            out.push(format!("alpha must be positive (got {})", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            out.push(format!("beta must be positive (got {})", self.beta));
        }
        if !(self.rho >= 1.0 && self.rho.is_finite()) {
            out.push(format!("rho must be >= 1 (got {})", self.rho));
        }
        if !(self.n_weight >= 2.0) {
            out.push(format!("N must be at least the dimension 2 (got {})", self.n_weight));
        }
        if self.beta.fract() != 0.0 && self.delta < 1.0 {
            out.push(format!("non-integer beta = {} needs delta >= 1 (got {})", self.beta, self.delta));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Parameter(p.join("; ")))
        }
    }
}

/// `D~_i = max{|(log delta)^(beta - i)|, |(log B)^(beta - i)|}`, `i` in {0, 1}.
pub fn dtilde(i: usize, inputs: &BoundInputs) -> Result<f64> {
    if i > 1 {
        return Err(Error::Parameter(format!("D~ index must be 0 or 1 (got {i})")));
    }
    let e = inputs.beta - i as f64;
    let a = signed_power(inputs.delta.ln(), e)?.abs();
    let b = signed_power(inputs.b.ln(), e)?.abs();
    let v = a.max(b);
    if !v.is_finite() {
        return Err(Error::Domain(format!("D~_{i} is not finite (beta = {})", inputs.beta)));
    }
    Ok(v)
}

/// `D^_j = max{delta^(alpha - 1 + j), B^(alpha - 1 + j)}`, `j` in {0, 1, 2}.
pub fn dhat(j: usize, inputs: &BoundInputs) -> Result<f64> {
    if j > 2 {
        return Err(Error::Parameter(format!("D^ index must be 0, 1 or 2 (got {j})")));
    }
    let e = inputs.alpha - 1.0 + j as f64;
    Ok(signed_power(inputs.delta, e)?.max(signed_power(inputs.b, e)?))
}

/// `M0`, `M1` and `G = M0^2 / 4 + M1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiConstants {
    pub m0: f64,
    pub m1: f64,
    pub gcal: f64,
}

pub fn shi_constants(inputs: &BoundInputs) -> Result<ShiConstants> {
    let (b, s1, s2) = (inputs.b, inputs.sigma1, inputs.sigma2);
    let (dt0, dt1) = (dtilde(0, inputs)?, dtilde(1, inputs)?);
    let (dh0, dh1, dh2) = (dhat(0, inputs)?, dhat(1, inputs)?, dhat(2, inputs)?);
    let m0 = 2.0 * b * b
        + inputs.k.max(0.0)
        + inputs.l1.max(0.0)
        + s1
        + inputs.alpha.abs() * s1 * dh0
        + s1 * (dt0 + inputs.beta * dt1);
    let m1 = b * s2 + dh1 * s2 + b * dt0 * s2 + 2.0 * s1 * b * b + 2.0 * s1 * dh2 + 2.0 * s1 * b * b * dt0;
    Ok(ShiConstants { m0, m1, gcal: 0.25 * m0 * m0 + m1 })
}

/// `B^2 - delta^2 + sqrt(G)`.
pub fn shi_bound(inputs: &BoundInputs) -> Result<f64> {
    Ok(shi_bound_from(inputs.b, inputs.delta, shi_constants(inputs)?.gcal))
}

/// `B^2 - delta^2 + sqrt(G)` for a given `G`.
pub fn shi_bound_from(b: f64, delta: f64, gcal: f64) -> f64 {
    b * b - delta * delta + gcal.sqrt()
}

/// Minimizer of `1/e1 + w2/e2 + w3/e3` on `e1 + e2 + e3 = 3`: `e_i = 3 sqrt(w_i) / sum sqrt(w)`,
/// with `w1 = 1`. A zero weight gets `e_i = 0` and drops out of `C1`.
pub fn epsilons_from_weights(dhat0: f64, dtilde0: f64) -> [f64; 3] {
    let r = [1.0, dhat0.max(0.0).sqrt(), dtilde0.max(0.0).sqrt()];
    let total: f64 = r.iter().sum();
    r.map(|ri| 3.0 * ri / total)
}

pub fn optimize_epsilons(inputs: &BoundInputs) -> Result<[f64; 3]> {
    Ok(epsilons_from_weights(dhat(0, inputs)?, dtilde(0, inputs)?))
}

/// `(sigma2 / 3)(1/e1 + D^0/e2 + D~0/e3)`, terms with zero weight omitted.
pub fn c1_value(sigma2: f64, eps: [f64; 3], dhat0: f64, dtilde0: f64) -> f64 {
    let terms = [1.0, dhat0, dtilde0]
        .iter()
        .zip(eps)
        .map(|(&w, e)| if w == 0.0 { 0.0 } else { w / e })
        .sum::<f64>();
    sigma2 / 3.0 * terms
}

/// `(C1, C2)` of the Hamilton-type estimate for the splitting `eps`.
pub fn hamilton_constants(inputs: &BoundInputs, eps: [f64; 3]) -> Result<(f64, f64)> {
    let (dh0, dt0, dt1) = (dhat(0, inputs)?, dtilde(0, inputs)?, dtilde(1, inputs)?);
    let weights = [1.0, dh0, dt0];
    let sum: f64 = eps.iter().sum();
    let bad = eps.iter().zip(weights).any(|(&e, w)| !e.is_finite() || e < 0.0 || (e == 0.0 && w != 0.0));
    if bad || (sum - 3.0).abs() > 1e-12 {
        return Err(Error::Parameter(format!("epsilons {eps:?} must be positive and sum to 3")));
    }
    let c1 = c1_value(inputs.sigma2, eps, dh0, dt0);
    let s1 = inputs.sigma1;
    let radicand = inputs.rho * inputs.rho * (inputs.k + inputs.l1)
        + ((inputs.alpha - 1.0).abs() * s1 * dh0 + inputs.beta * s1 * dt1 + s1 / 3.0 * (1.0 + dh0 + dt0));
    if !(radicand >= 0.0) {
        return Err(Error::Internal(format!("C2 radicand is negative ({radicand})")));
    }
    Ok((c1, radicand.sqrt()))
}

/// `2 rho sqrt((1 + log(B/delta))(C1 + C2))`.
pub fn hamilton_bound(inputs: &BoundInputs, c1: f64, c2: f64) -> f64 {
    2.0 * inputs.rho * ((1.0 + (inputs.b / inputs.delta).ln()) * (c1 + c2)).sqrt()
}

/// `C3 = (B^2 - delta^2 + sqrt(G)) / delta` and `C4 = 2 sqrt((1 + log(B/delta))(C1 + C2))`.
pub fn harnack_constants(inputs: &BoundInputs, gcal: f64, c1: f64, c2: f64) -> (f64, f64) {
    let c3 = (inputs.b * inputs.b - inputs.delta * inputs.delta + gcal.sqrt()) / inputs.delta;
    let c4 = 2.0 * ((1.0 + (inputs.b / inputs.delta).ln()) * (c1 + c2)).sqrt();
    (c3, c4)
}

/// Every derived constant and bound for one input set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub dtilde0: f64,
    pub dtilde1: f64,
    pub dhat0: f64,
    pub dhat1: f64,
    pub dhat2: f64,
    pub m0: f64,
    pub m1: f64,
    pub gcal: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub eps: [f64; 3],
    pub shi_bound: f64,
    pub hamilton_bound: f64,
}

impl BoundConstants {
    pub fn compute(inputs: &BoundInputs) -> Result<Self> {
        inputs.validate()?;
        let shi = shi_constants(inputs)?;
        let eps = optimize_epsilons(inputs)?;
        let (c1, c2) = hamilton_constants(inputs, eps)?;
        let (c3, c4) = harnack_constants(inputs, shi.gcal, c1, c2);
        let out = BoundConstants {
            dtilde0: dtilde(0, inputs)?,
            dtilde1: dtilde(1, inputs)?,
            dhat0: dhat(0, inputs)?,
            dhat1: dhat(1, inputs)?,
            dhat2: dhat(2, inputs)?,
            m0: shi.m0,
            m1: shi.m1,
            gcal: shi.gcal,
            c1,
            c2,
            c3,
            c4,
            eps,
            shi_bound: shi_bound(inputs)?,
            hamilton_bound: hamilton_bound(inputs, c1, c2),
        };
        let all = [out.m0, out.m1, out.gcal, out.c1, out.c2, out.c3, out.c4, out.shi_bound, out.hamilton_bound];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite bound constants from {inputs:?}")));
        }
        Ok(out)
    }

    /// Multiplier of `d_F` in the Harnack inequality.
    pub fn harnack_rate(&self) -> f64 {
        self.c3.min(self.c4)
    }
}

/// Pass threshold `(relative + discretization (dx^2 + dt)) |bound|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlackPolicy {
    #[serde(default = "default_relative")]
    pub relative: f64,
    #[serde(default = "default_discretization")]
    pub discretization: f64,
}

fn default_relative() -> f64 {
    1e-6
}

fn default_discretization() -> f64 {
    10.0
}

impl Default for SlackPolicy {
    fn default() -> Self {
        SlackPolicy { relative: default_relative(), discretization: default_discretization() }
    }
}

impl SlackPolicy {
    pub fn slack(&self, bound: f64, grid: &GridGeometry, dt: f64) -> f64 {
        let h = grid.spacing();
        let dx2 = h[0].max(h[1]).powi(2);
        (self.relative + self.discretization * (dx2 + dt)) * bound.abs()
    }
}

/// Which inequality a record checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Theorem {
    Shi,
    Hamilton,
    Harnack,
}

/// Where the measured extremum was attained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub t: f64,
    pub x: [f64; 2],
    /// Second point of a Harnack pair (`x` is `x1`, this is `x2`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partner: Option<[f64; 2]>,
    /// Forward distance from `partner` to `x`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance: Option<f64>,
}

/// One checked inequality `measured <= bound`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremRecord {
    pub theorem: Theorem,
    pub source: InputSource,
    pub measured: f64,
    pub bound: f64,
    pub margin: f64,
    pub slack: f64,
    pub pass: bool,
    pub witness: Witness,
}

impl TheoremRecord {
    fn new(theorem: Theorem, source: InputSource, measured: f64, bound: f64, slack: f64, witness: Witness) -> Self {
        let margin = bound - measured;
        TheoremRecord { theorem, source, measured, bound, margin, slack, pass: margin >= -slack, witness }
    }
}

/// Refuse inputs whose `delta`, `B` are tighter than the trajectory's own bounds.
pub fn check_solution_bounds(traj: &SolutionTrajectory, inputs: &BoundInputs) -> Result<()> {
    let tol = 1e-12;
    let mut bad = Vec::new();
    if inputs.delta > traj.delta_emp * (1.0 + tol) {
        bad.push(format!("delta = {} exceeds min u = {}", inputs.delta, traj.delta_emp));
    }
    if inputs.b < traj.b_emp * (1.0 - tol) {
        bad.push(format!("B = {} is below max u = {}", inputs.b, traj.b_emp));
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Inconsistent(bad.join("; ")))
    }
}

fn require_complete(traj: &SolutionTrajectory) -> Result<()> {
    match &traj.failure {
        None if !traj.snapshots.is_empty() => Ok(()),
        None => Err(Error::Parameter("trajectory has no saved levels".into())),
        Some(e) => Err(Error::Parameter(format!("trajectory is incomplete: {e}"))),
    }
}

fn level_time(traj: &SolutionTrajectory, k: usize) -> f64 {
    traj.snapshots[k].time.unwrap_or(traj.metrics[k].time)
}

/// `sup F(grad u)` over nodes and saved levels.
pub fn sup_gradient_norm(traj: &SolutionTrajectory) -> Result<(f64, Witness)> {
    let mut best = (0.0, Witness { t: level_time(traj, 0), x: [0.0; 2], partner: None, distance: None });
    for (k, (u, m)) in traj.snapshots.iter().zip(&traj.metrics).enumerate() {
        let grid = *m.grid();
        let grad = gradient_field(m, u)?;
        for idx in (0..grid.len()).filter(|&i| grad.mask[i]) {
            let (i, j) = grid.node(idx);
            let x = grid.point(i, j);
            let f = m.local(x)?.norm(&grad.vectors[idx]);
            if f > best.0 {
                best = (f, Witness { t: level_time(traj, k), x, partner: None, distance: None });
            }
        }
    }
    Ok(best)
}

/// `sup max{F(grad log u), F(grad(-log u))}` over nodes and saved levels.
pub fn sup_log_gradient_norm(traj: &SolutionTrajectory) -> Result<(f64, Witness)> {
    let mut best = (0.0, Witness { t: level_time(traj, 0), x: [0.0; 2], partner: None, distance: None });
    for (k, (u, m)) in traj.snapshots.iter().zip(&traj.metrics).enumerate() {
        if !(u.min() > 0.0) {
            return Err(Error::PositivityLoss { time: level_time(traj, k), min: u.min() });
        }
        let grid = *m.grid();
        let dlog = differential(&grid, &u.map(f64::ln));
        for (idx, xi) in dlog.iter().enumerate() {
            if xi.norm() == 0.0 {
                continue;
            }
            let (i, j) = grid.node(idx);
            let x = grid.point(i, j);
            let local = m.local(x)?;
            for s in [*xi, -xi] {
                let f = local.norm(&local.legendre(&s)?);
                if f > best.0 {
                    best = (f, Witness { t: level_time(traj, k), x, partner: None, distance: None });
                }
            }
        }
    }
    Ok(best)
}

pub fn verify_shi(
    traj: &SolutionTrajectory,
    inputs: &BoundInputs,
    slack: &SlackPolicy,
) -> Result<TheoremRecord> {
    require_complete(traj)?;
    check_solution_bounds(traj, inputs)?;
    let bound = shi_bound(inputs)?;
    let (measured, witness) = sup_gradient_norm(traj)?;
    let s = slack.slack(bound, traj.metrics[0].grid(), traj.time_grid.dt);
    Ok(TheoremRecord::new(Theorem::Shi, inputs.source, measured, bound, s, witness))
}

pub fn verify_hamilton(
    traj: &SolutionTrajectory,
    inputs: &BoundInputs,
    slack: &SlackPolicy,
) -> Result<TheoremRecord> {
    require_complete(traj)?;
    check_solution_bounds(traj, inputs)?;
    let c = BoundConstants::compute(inputs)?;
    let (measured, witness) = sup_log_gradient_norm(traj)?;
    let s = slack.slack(c.hamilton_bound, traj.metrics[0].grid(), traj.time_grid.dt);
    Ok(TheoremRecord::new(Theorem::Hamilton, inputs.source, measured, c.hamilton_bound, s, witness))
}

/// Grid-node pair `(x1, x2)` of a Harnack comparison.
pub type NodePair = ((usize, usize), (usize, usize));

/// Pairs on a `side x side` coarse subgrid: `x1` over the cells with even
/// `a + b`, `x2` over the odd cells, every combination.
pub fn harnack_pairs(grid: &GridGeometry, side: usize) -> Vec<NodePair> {
    let side = side.clamp(1, grid.nx.min(grid.ny));
    let mut even = Vec::new();
    let mut odd = Vec::new();
    for b in 0..side {
        for a in 0..side {
            let node = (a * grid.nx / side, b * grid.ny / side);
            if (a + b) % 2 == 0 {
                even.push(node);
            } else {
                odd.push(node);
            }
        }
    }
    if odd.is_empty() {
        return even.iter().map(|&p| (p, p)).collect();
    }
    even.iter().flat_map(|&p| odd.iter().map(move |&q| (p, q))).collect()
}

/// Distance diagnostics of the Harnack check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarnackSummary {
    /// Time of the level used.
    pub t0: f64,
    pub pairs: usize,
    pub stencil: NeighborStencil,
    /// `max |d(x2 -> x1) - d(x1 -> x2)|` over the pairs.
    pub max_asymmetry: f64,
    /// `min(C3, C4)`.
    pub rate: f64,
}

/// Saved level closest to `t0`.
pub fn level_near(traj: &SolutionTrajectory, t0: f64) -> Result<usize> {
    let (k, gap) = (0..traj.snapshots.len())
        .map(|k| (k, (level_time(traj, k) - t0).abs()))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| Error::Parameter("trajectory has no saved levels".into()))?;
    if gap > 0.5 * traj.time_grid.dt + 1e-12 {
        return Err(Error::Parameter(format!(
            "no saved level at t0 = {t0} (closest is {}); adjust save_every",
            level_time(traj, k)
        )));
    }
    Ok(k)
}

/// `log u(x1) - log u(x2) <= min(C3, C4) d(x2 -> x1)` at the saved level nearest `t0`.
pub fn verify_harnack(
    traj: &SolutionTrajectory,
    inputs: &BoundInputs,
    t0: f64,
    pairs: &[NodePair],
    stencil: NeighborStencil,
    slack: &SlackPolicy,
) -> Result<(TheoremRecord, HarnackSummary)> {
    require_complete(traj)?;
    check_solution_bounds(traj, inputs)?;
    if pairs.is_empty() {
        return Err(Error::Parameter("no Harnack pairs".into()));
    }
    let c = BoundConstants::compute(inputs)?;
    let rate = c.harnack_rate();
    let k = level_near(traj, t0)?;
    let (u, m) = (&traj.snapshots[k], &traj.metrics[k]);
    let grid = *m.grid();
    let graph = DistanceGraph::build(m, stencil)?;
    let mut maps: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for &(p, q) in pairs {
        for node in [p, q] {
            if node.0 >= grid.nx || node.1 >= grid.ny {
                return Err(Error::Parameter(format!("Harnack point {node:?} is not a grid node")));
            }
            maps.entry(node).or_insert_with(|| graph.from_node(node.1 * grid.nx + node.0));
        }
    }
    let flat = |n: (usize, usize)| n.1 * grid.nx + n.0;
    let mut worst: Option<(f64, f64, f64, Witness)> = None;
    let mut asym: f64 = 0.0;
    for &(p, q) in pairs {
        let d = maps[&q][flat(p)];
        asym = asym.max((d - maps[&p][flat(q)]).abs());
        let lhs = u.values[flat(p)].ln() - u.values[flat(q)].ln();
        let rhs = rate * d;
        let s = slack.slack(rhs, &grid, traj.time_grid.dt);
        let w = Witness { t: level_time(traj, k), x: grid.point(p.0, p.1), partner: Some(grid.point(q.0, q.1)), distance: Some(d) };
        let better = match &worst {
            None => true,
            Some((l, r, ws, _)) => (rhs - lhs + s) < (r - l + ws),
        };
        if better {
            worst = Some((lhs, rhs, s, w));
        }
    }
    let (lhs, rhs, s, w) = worst.expect("pairs are nonempty");
    let summary = HarnackSummary { t0: level_time(traj, k), pairs: pairs.len(), stencil, max_asymmetry: asym, rate };
    Ok((TheoremRecord::new(Theorem::Harnack, inputs.source, lhs, rhs, s, w), summary))
}

/// Where the measured `K` was attained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvatureWitness {
    pub t: f64,
    pub x: [f64; 2],
    pub y: [f64; 2],
    /// `min Ric^N` over the samples of that level.
    pub min_weighted: f64,
}

/// Measured inputs with a description of how each was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredInputs {
    pub inputs: BoundInputs,
    pub provenance: BTreeMap<String, String>,
    pub k_witness: CurvatureWitness,
}

/// Hypothesis constants of a completed trajectory: `K`, `rho` over saved
/// metric levels, `L1` over every step, the rest from the solution.
pub fn measure_inputs(
    traj: &SolutionTrajectory,
    measure_phi: &ScalarFn,
    params: &PdeParams,
    n_weight: f64,
) -> Result<MeasuredInputs> {
    require_complete(traj)?;
    let mut k_best: Option<CurvatureWitness> = None;
    let mut rho: f64 = 1.0;
    for (level, m) in traj.metrics.iter().enumerate() {
        let samples = sphere_bundle_samples(m.grid());
        let est = estimate_k(m, measure_phi, n_weight, &samples)?;
        if k_best.is_none_or(|w| est.min_weighted < w.min_weighted) {
            k_best = Some(CurvatureWitness {
                t: level_time(traj, level),
                x: est.argmin.x,
                y: [est.argmin.y[0], est.argmin.y[1]],
                min_weighted: est.min_weighted,
            });
        }
        rho = rho.max(reversibility_estimate(m, &samples)?);
    }
    let k_witness = k_best.expect("at least one level");
    let l1 = traj.steps.iter().map(|s| s.l1).fold(0.0, f64::max);
    let inputs = BoundInputs {
        k: (-k_witness.min_weighted).max(0.0),
        l1,
        sigma1: traj.sigma1_emp.max(0.0),
        sigma2: traj.sigma2_emp.max(0.0),
        b: traj.b_emp,
        delta: traj.delta_emp,
        alpha: params.alpha,
        beta: params.beta,
        rho,
        n_weight,
        source: InputSource::Measured,
    };
    let levels = traj.metrics.len();
    let mut provenance = BTreeMap::new();
    let n_text = if n_weight.is_infinite() { "inf".to_string() } else { format!("{n_weight}") };
    provenance.insert(
        "K".into(),
        format!("max(0, -min Ric^N) with N = {n_text} over the sphere bundle of {levels} saved metric levels"),
    );
    provenance.insert("L1".into(), format!("max |h/g| over the sphere bundle at all {} levels", traj.steps.len()));
    provenance.insert("sigma1".into(), "max(0, sup R_i) over nodes and all steps".into());
    provenance.insert(
        "sigma2".into(),
        format!("sup F_{{grad u}}(grad^{{grad u}} R_i) over nodes of {} saved levels", traj.snapshots.len()),
    );
    provenance.insert("B".into(), "max u over nodes and all steps".into());
    provenance.insert("delta".into(), "min u over nodes and all steps".into());
    provenance.insert("rho".into(), format!("max F(y)/F(-y) over the sphere bundle of {levels} saved metric levels"));
    provenance.insert("alpha".into(), "equation parameter".into());
    provenance.insert("beta".into(), "equation parameter".into());
    provenance.insert("N".into(), "checker setting".into());
    Ok(MeasuredInputs { inputs, provenance, k_witness })
}

/// Declared inputs tighter than measured ones, one message each.
pub fn declared_inconsistencies(declared: &BoundInputs, measured: &BoundInputs) -> Vec<String> {
    let tol = 1e-9;
    let mut out = Vec::new();
    let upper = [
        ("K", declared.k, measured.k),
        ("L1", declared.l1, measured.l1),
        ("sigma1", declared.sigma1, measured.sigma1),
        ("sigma2", declared.sigma2, measured.sigma2),
        ("B", declared.b, measured.b),
        ("rho", declared.rho, measured.rho),
    ];
    for (name, d, m) in upper {
        if d < m - tol * m.abs().max(1.0) {
            out.push(format!("declared {name} = {d} is below the measured {m}"));
        }
    }
    if declared.delta > measured.delta + tol * measured.delta.abs().max(1.0) {
        out.push(format!("declared delta = {} exceeds the measured {}", declared.delta, measured.delta));
    }
    for (name, d, m) in [("alpha", declared.alpha, measured.alpha), ("beta", declared.beta, measured.beta)] {
        if d != m {
            out.push(format!("declared {name} = {d} differs from the equation's {m}"));
        }
    }
    if declared.n_weight != measured.n_weight {
        out.push(format!("declared N = {} differs from the checker's {}", declared.n_weight, measured.n_weight));
    }
    out
}

/// Declared-input section of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeclaredCheck {
    pub inputs: BoundInputs,
    /// `declared - measured` for each constant.
    pub residuals: BTreeMap<String, f64>,
    pub inconsistencies: Vec<String>,
    pub constants: Option<BoundConstants>,
}

/// Resolution stamps of a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub nx: usize,
    pub ny: usize,
    pub ntheta: usize,
    pub dt: f64,
    pub steps: usize,
    pub t_end: f64,
    pub saved_levels: usize,
}

/// Checker settings.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckSettings {
    pub n_weight: f64,
    pub slack: SlackPolicy,
    pub stencil: NeighborStencil,
    /// Time of the Harnack comparison; the midpoint of the run if unset.
    pub harnack_time: Option<f64>,
    /// Side of the coarse subgrid carrying the Harnack points.
    pub harnack_side: usize,
    pub declared: Option<BoundInputs>,
}

impl Default for CheckSettings {
    fn default() -> Self {
        CheckSettings {
            n_weight: 4.0,
            slack: SlackPolicy::default(),
            stencil: NeighborStencil::Sixteen,
            harnack_time: None,
            harnack_side: 4,
            declared: None,
        }
    }
}

/// Full verification of a completed trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    /// All records pass and no declared input is inconsistent.
    pub pass: bool,
    pub records: Vec<TheoremRecord>,
    pub inputs: BoundInputs,
    pub constants: BoundConstants,
    pub provenance: BTreeMap<String, String>,
    pub k_witness: CurvatureWitness,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared: Option<DeclaredCheck>,
    pub harnack: HarnackSummary,
    pub slack: SlackPolicy,
    pub resolution: Resolution,
    pub notes: Vec<String>,
}

impl VerificationReport {
    /// Plain-text table of the records.
    pub fn summary_table(&self) -> String {
        let mut out = format!(
            "{:<9} {:<9} {:>14} {:>14} {:>14} {:>6}\n",
            "theorem", "inputs", "measured", "bound", "margin", "pass"
        );
        for r in &self.records {
            let theorem = serde_json::to_value(r.theorem).ok().and_then(|v| v.as_str().map(String::from));
            let source = serde_json::to_value(r.source).ok().and_then(|v| v.as_str().map(String::from));
            out.push_str(&format!(
                "{:<9} {:<9} {:>14.6e} {:>14.6e} {:>14.6e} {:>6}\n",
                theorem.unwrap_or_default(),
                source.unwrap_or_default(),
                r.measured,
                r.bound,
                r.margin,
                if r.pass { "yes" } else { "NO" }
            ));
        }
        if let Some(d) = &self.declared {
            for msg in &d.inconsistencies {
                out.push_str(&format!("inconsistent: {msg}\n"));
            }
        }
        out.push_str(&format!("overall: {}\n", if self.pass { "pass" } else { "FAIL" }));
        out
    }
}

fn input_residuals(d: &BoundInputs, m: &BoundInputs) -> BTreeMap<String, f64> {
    [
        ("K", d.k - m.k),
        ("L1", d.l1 - m.l1),
        ("sigma1", d.sigma1 - m.sigma1),
        ("sigma2", d.sigma2 - m.sigma2),
        ("B", d.b - m.b),
        ("delta", d.delta - m.delta),
        ("rho", d.rho - m.rho),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn records_for(
    traj: &SolutionTrajectory,
    inputs: &BoundInputs,
    settings: &CheckSettings,
    t0: f64,
    pairs: &[NodePair],
) -> Result<(Vec<TheoremRecord>, HarnackSummary)> {
    let shi = verify_shi(traj, inputs, &settings.slack)?;
    let ham = verify_hamilton(traj, inputs, &settings.slack)?;
    let (har, summary) = verify_harnack(traj, inputs, t0, pairs, settings.stencil, &settings.slack)?;
    Ok((vec![shi, ham, har], summary))
}

/// Measure the inputs, compute both bound sets and check every inequality.
pub fn verify(
    traj: &SolutionTrajectory,
    measure_phi: &ScalarFn,
    params: &PdeParams,
    settings: &CheckSettings,
) -> Result<VerificationReport> {
    require_complete(traj)?;
    let measured = measure_inputs(traj, measure_phi, params, settings.n_weight)?;
    let constants = BoundConstants::compute(&measured.inputs)?;
    let tg = traj.time_grid;
    let t0 = settings.harnack_time.unwrap_or(0.5 * (tg.t0 + tg.t_end));
    let grid = *traj.metrics[0].grid();
    let pairs = harnack_pairs(&grid, settings.harnack_side);
    let (mut records, harnack) = records_for(traj, &measured.inputs, settings, t0, &pairs)?;
    let mut pass = records.iter().all(|r| r.pass);
    let declared = match &settings.declared {
        None => None,
        Some(d) => {
            let d = BoundInputs { source: InputSource::Declared, ..*d };
            let mut inconsistencies: Vec<String> = d.problems();
            inconsistencies.extend(declared_inconsistencies(&d, &measured.inputs));
            let constants = BoundConstants::compute(&d).ok();
            if constants.is_some() {
                match records_for(traj, &d, settings, t0, &pairs) {
                    Ok((r, _)) => records.extend(r),
                    Err(Error::Inconsistent(msg)) => inconsistencies.push(msg),
                    Err(e) => return Err(e),
                }
            }
            pass &= inconsistencies.is_empty() && records.iter().all(|r| r.pass);
            Some(DeclaredCheck { inputs: d, residuals: input_residuals(&d, &measured.inputs), inconsistencies, constants })
        }
    };
    let notes = vec![
        "d_F(x1, x2) is the global forward distance from x2 to x1 on the lattice graph of the metric at t0".to_string(),
        "K+ and L1+ enter M0; C2 uses K + L1 as printed".to_string(),
        "a zero weight in the epsilon splitting drops its term from C1".to_string(),
    ];
    Ok(VerificationReport {
        pass,
        records,
        inputs: measured.inputs,
        constants,
        provenance: measured.provenance,
        k_witness: measured.k_witness,
        declared,
        harnack,
        slack: settings.slack,
        resolution: Resolution {
            nx: grid.nx,
            ny: grid.ny,
            ntheta: grid.ntheta,
            dt: tg.dt,
            steps: tg.steps,
            t_end: tg.t_end,
            saved_levels: traj.snapshots.len(),
        },
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn inputs() -> BoundInputs {
        BoundInputs {
            k: 0.0,
            l1: 0.0,
            sigma1: 0.0,
            sigma2: 0.0,
            b: 1.0,
            delta: 1.0,
            alpha: 2.0,
            beta: 1.0,
            rho: 1.0,
            n_weight: 4.0,
            source: InputSource::Declared,
        }
    }

    #[test]
    fn dtilde_and_dhat_examples() {
        let p = BoundInputs { delta: 1.0, b: E, beta: 2.0, ..inputs() };
        assert_eq!(dtilde(0, &p).unwrap(), 1.0);
        assert_eq!(dtilde(1, &p).unwrap(), 1.0);
        let p = BoundInputs { delta: 0.5, b: 2.0, alpha: 3.0, ..inputs() };
        assert_eq!(dhat(0, &p).unwrap(), 4.0);
        for alpha in [0.3, 1.0, 2.5] {
            for j in 0..3 {
                assert_eq!(dhat(j, &BoundInputs { alpha, ..inputs() }).unwrap(), 1.0);
            }
        }
        assert!(dtilde(2, &p).is_err());
    }

    #[test]
    fn degenerate_shi_constants() {
        let c = shi_constants(&inputs()).unwrap();
        assert_eq!((c.m0, c.m1, c.gcal), (2.0, 0.0, 1.0));
        assert_eq!(shi_bound(&inputs()).unwrap(), 1.0);
        assert_eq!(shi_bound_from(2.0, 1.0, 0.0), 3.0);
        assert!(shi_bound_from(2.0, 1.0, 0.5) >= shi_bound_from(2.0, 1.0, 0.4));
    }

    #[test]
    fn sigma2_is_linear_in_m1() {
        let p = BoundInputs { sigma2: 0.7, b: 1.5, ..inputs() };
        let q = BoundInputs { sigma2: 1.4, ..p };
        let (a, b) = (shi_constants(&p).unwrap(), shi_constants(&q).unwrap());
        assert_eq!(a.m0, b.m0);
        assert!((b.m1 - 2.0 * a.m1).abs() < 1e-15);
    }

    #[test]
    fn epsilon_examples() {
        assert_eq!(epsilons_from_weights(1.0, 1.0), [1.0, 1.0, 1.0]);
        assert_eq!(epsilons_from_weights(4.0, 0.0), [1.0, 2.0, 0.0]);
    }

    #[test]
    fn hamilton_examples() {
        assert_eq!(hamilton_constants(&inputs(), optimize_epsilons(&inputs()).unwrap()).unwrap(), (0.0, 0.0));
        let p = BoundInputs { k: 1.0, b: E, ..inputs() };
        let (c1, c2) = hamilton_constants(&p, optimize_epsilons(&p).unwrap()).unwrap();
        assert_eq!((c1, c2), (0.0, 1.0));
        assert_eq!(hamilton_bound(&p, c1, c2), 2.0 * 2f64.sqrt());
        let q = BoundInputs { rho: 2.0, ..p };
        assert_eq!(hamilton_bound(&q, c1, c2), 2.0 * hamilton_bound(&p, c1, c2));
        assert_eq!(c1_value(3.0, [1.0, 1.0, 1.0], 1.0, 1.0), 3.0);
        assert!(hamilton_constants(&p, [1.0, 1.0, 0.5]).is_err());
    }

    #[test]
    fn harnack_examples() {
        let (c3, c4) = harnack_constants(&inputs(), 1.0, 0.0, 0.0);
        assert_eq!((c3, c4), (1.0, 0.0));
        let p = BoundInputs { k: 1.0, b: E, rho: 1.7, ..inputs() };
        let c = BoundConstants::compute(&p).unwrap();
        assert!((c.c4 * p.rho - c.hamilton_bound).abs() <= 1e-15 * c.hamilton_bound);
    }

    #[test]
    fn input_validation() {
        assert!(inputs().problems().is_empty());
        let bad = BoundInputs { delta: 0.5, beta: 1.5, rho: 0.5, k: -1.0, ..inputs() };
        assert_eq!(bad.problems().len(), 3);
        assert!(BoundConstants::compute(&bad).is_err());
    }

    #[test]
    fn infinite_weight_round_trips() {
        let p = BoundInputs { n_weight: f64::INFINITY, ..inputs() };
        let text = serde_json::to_string(&p).unwrap();
        assert!(text.contains("\"N\":\"inf\""));
        let back: BoundInputs = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn pair_layout() {
        let g = GridGeometry::torus(48, 8).unwrap();
        let pairs = harnack_pairs(&g, 4);
        assert_eq!(pairs.len(), 64);
        assert!(pairs.iter().all(|(p, q)| p != q));
        assert_eq!(pairs[0], ((0, 0), (12, 0)));
    }
}
