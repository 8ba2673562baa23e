//! Scenario files: the JSON description of one experiment and its validation.
//!
//! Every cross-field rule is checked at load time and all violations are
//! reported together.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checker::{extended_real, BoundInputs, CheckSettings, SlackPolicy};
use crate::error::{Error, Result};
use crate::expr::{Expr, ScalarFn, Var, Vars};
use crate::finsler::MetricState;
use crate::flow::{FlowSpec, TimeGrid};
use crate::geodesic::NeighborStencil;
use crate::grid::{GridGeometry, ScalarField};
use crate::pde::{check_cfl, PdeParams};

fn tau2() -> [f64; 2] {
    [std::f64::consts::TAU; 2]
}

fn zero() -> Expr {
    Expr::constant(0.0)
}

fn one() -> Expr {
    Expr::constant(1.0)
}

/// Grid section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    /// Nodes per direction `[nx, ny]`.
    pub n: [usize; 2],
    #[serde(default = "tau2")]
    pub lengths: [f64; 2],
    pub ntheta: usize,
}

/// Initial metric section, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MetricFile {
    Euclidean {
        #[serde(default)]
        sampled: bool,
    },
    Riemannian {
        a11: Expr,
        #[serde(default = "zero")]
        a12: Expr,
        a22: Expr,
        #[serde(default)]
        sampled: bool,
    },
    Randers {
        #[serde(default = "one")]
        a11: Expr,
        #[serde(default = "zero")]
        a12: Expr,
        #[serde(default = "one")]
        a22: Expr,
        #[serde(default = "zero")]
        b1: Expr,
        #[serde(default = "zero")]
        b2: Expr,
        /// Store the metric as samples on the sphere bundle (needed by
        /// Ricci and custom flows).
        #[serde(default)]
        sampled: bool,
    },
    /// `F(x, (cos theta, sin theta))` given directly.
    Sampled { f: Expr },
}

/// Flow section, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FlowFile {
    Conformal { lambda: Expr },
    Ricci,
    Custom { h11: Expr, h12: Expr, h22: Expr },
}

/// Equation section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeFile {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "zero")]
    pub r1: Expr,
    #[serde(default = "zero")]
    pub r2: Expr,
    #[serde(default = "zero")]
    pub r3: Expr,
    /// Initial condition `u0(x1, x2)`.
    pub u0: Expr,
}

/// Time section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeFile {
    #[serde(default)]
    pub t0: f64,
    pub t_end: f64,
    /// Largest allowed step; the run uses equal steps no larger than this.
    pub dt: f64,
    #[serde(default = "default_save_every")]
    pub save_every: usize,
}

fn default_save_every() -> usize {
    1
}

fn default_n_weight() -> f64 {
    4.0
}

fn default_side() -> usize {
    4
}

/// Checker section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckerFile {
    #[serde(rename = "N", with = "extended_real", default = "default_n_weight")]
    pub n_weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub declared: Option<BoundInputs>,
    #[serde(default)]
    pub slack: SlackPolicy,
    #[serde(default)]
    pub stencil: NeighborStencil,
    /// Time of the Harnack comparison (midpoint of the run if absent).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub harnack_time: Option<f64>,
    #[serde(default = "default_side")]
    pub harnack_side: usize,
}

impl Default for CheckerFile {
    fn default() -> Self {
        CheckerFile {
            n_weight: default_n_weight(),
            declared: None,
            slack: SlackPolicy::default(),
            stencil: NeighborStencil::default(),
            harnack_time: None,
            harnack_side: default_side(),
        }
    }
}

/// A scenario file as written on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub grid: GridFile,
    pub metric: MetricFile,
    /// Measure density `Phi(x)` with `dmu = e^Phi dx`.
    #[serde(default = "zero")]
    pub measure: Expr,
    pub flow: FlowFile,
    pub pde: PdeFile,
    pub time: TimeFile,
    #[serde(default)]
    pub checker: CheckerFile,
}

/// A validated scenario with every object constructed.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub grid: GridGeometry,
    pub metric: MetricState,
    pub measure: ScalarFn,
    pub flow: FlowSpec,
    pub params: PdeParams,
    pub u0: ScalarField,
    pub time_grid: TimeGrid,
    pub save_every: usize,
    pub checker: CheckSettings,
}

fn forbid(problems: &mut Vec<String>, what: &str, e: &Expr, vars: &[(Var, &str)]) {
    for (v, name) in vars {
        if e.uses(*v) {
            problems.push(format!("{what} may not use '{name}' (got \"{e}\")"));
        }
    }
}

const T: (Var, &str) = (Var::T, "t");
const THETA: (Var, &str) = (Var::Theta, "theta");

fn sf(e: &Expr) -> ScalarFn {
    ScalarFn::Expr(e.clone())
}

/// Construct the initial metric described by `spec` on `grid`.
pub fn build_metric(grid: GridGeometry, spec: &MetricFile) -> Result<MetricState> {
    let (m, sampled) = match spec {
        MetricFile::Euclidean { sampled } => (MetricState::euclidean(grid), *sampled),
        MetricFile::Riemannian { a11, a12, a22, sampled } => {
            (MetricState::riemannian(grid, sf(a11), sf(a12), sf(a22))?, *sampled)
        }
        MetricFile::Randers { a11, a12, a22, b1, b2, sampled } => {
            (MetricState::randers(grid, sf(a11), sf(a12), sf(a22), sf(b1), sf(b2))?, *sampled)
        }
        MetricFile::Sampled { f } => {
            let m = MetricState::sampled(grid, |x, theta| f.eval(&Vars { x1: x[0], x2: x[1], t: 0.0, theta }))?;
            (m, false)
        }
    };
    if sampled {
        m.to_sampled()
    } else {
        Ok(m)
    }
}

fn metric_expr_problems(spec: &MetricFile, problems: &mut Vec<String>) {
    match spec {
        MetricFile::Euclidean { .. } => {}
        MetricFile::Riemannian { a11, a12, a22, .. } => {
            for (n, e) in [("a11", a11), ("a12", a12), ("a22", a22)] {
                forbid(problems, &format!("metric.{n}"), e, &[T, THETA]);
            }
        }
        MetricFile::Randers { a11, a12, a22, b1, b2, .. } => {
            for (n, e) in [("a11", a11), ("a12", a12), ("a22", a22), ("b1", b1), ("b2", b2)] {
                forbid(problems, &format!("metric.{n}"), e, &[T, THETA]);
            }
        }
        MetricFile::Sampled { f } => forbid(problems, "metric.f", f, &[T]),
    }
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Scenario(vec![format!("schema: {e}")]))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Construct and validate every part, collecting all violations.
    pub fn build(&self) -> Result<Scenario> {
        let mut problems = Vec::new();

        let grid = match GridGeometry::new(self.grid.n[0], self.grid.n[1], self.grid.lengths, self.grid.ntheta) {
            Ok(g) => Some(g),
            Err(e) => {
                problems.push(format!("grid: {e}"));
                None
            }
        };

        metric_expr_problems(&self.metric, &mut problems);
        forbid(&mut problems, "measure", &self.measure, &[T, THETA]);
        forbid(&mut problems, "pde.u0", &self.pde.u0, &[T, THETA]);
        for (n, e) in [("r1", &self.pde.r1), ("r2", &self.pde.r2), ("r3", &self.pde.r3)] {
            forbid(&mut problems, &format!("pde.{n}"), e, &[THETA]);
        }
        let flow = match &self.flow {
            FlowFile::Conformal { lambda } => FlowSpec::Conformal { lambda: sf(lambda) },
            FlowFile::Ricci => FlowSpec::Ricci,
            FlowFile::Custom { h11, h12, h22 } => FlowSpec::Custom { h11: sf(h11), h12: sf(h12), h22: sf(h22) },
        };

        let params = PdeParams { alpha: self.pde.alpha, beta: self.pde.beta, r1: sf(&self.pde.r1), r2: sf(&self.pde.r2), r3: sf(&self.pde.r3) };
        problems.extend(params.problems().into_iter().map(|p| format!("pde: {p}")));

        let time_grid = match TimeGrid::new(self.time.t0, self.time.t_end, self.time.dt) {
            Ok(tg) => Some(tg),
            Err(e) => {
                problems.push(format!("time: {e}"));
                None
            }
        };
        if self.time.save_every == 0 {
            problems.push("time.save_every must be at least 1".into());
        }

        let c = &self.checker;
        if !(c.n_weight >= 2.0) {
            problems.push(format!("checker.N must be at least the dimension 2 (got {})", c.n_weight));
        }
        if let Some(d) = &c.declared {
            problems.extend(d.problems().into_iter().map(|p| format!("checker.declared: {p}")));
        }
        if !(c.slack.relative >= 0.0 && c.slack.discretization >= 0.0) {
            problems.push("checker.slack entries must be nonnegative".into());
        }
        if c.harnack_side < 2 {
            problems.push("checker.harnack_side must be at least 2".into());
        }
        if let Some(tg) = time_grid {
            let t0 = c.harnack_time.unwrap_or(0.5 * (tg.t0 + tg.t_end));
            let k = ((t0 - tg.t0) / tg.dt).round();
            let every = self.time.save_every.max(1) as f64;
            let on_level = (tg.time(k.max(0.0) as usize) - t0).abs() <= 1e-9 * tg.dt.max(1.0);
            let saved = k >= 0.0 && k as usize <= tg.steps && (k % every == 0.0 || k as usize == tg.steps);
            if !(on_level && saved) {
                problems.push(format!(
                    "Harnack time {t0} is not a saved level (dt = {}, save_every = {})",
                    tg.dt, self.time.save_every
                ));
            }
        }

        let metric = match grid.map(|g| build_metric(g, &self.metric)) {
            Some(Ok(m)) => {
                problems.extend(flow.problems(m.mode()).into_iter().map(|p| format!("flow: {p}")));
                Some(m)
            }
            Some(Err(e)) => {
                problems.push(format!("metric: {e}"));
                None
            }
            None => None,
        };

        let mut u0 = None;
        if let Some(g) = grid {
            let field = ScalarField::sample(&g, &sf(&self.pde.u0), self.time.t0);
            if !field.is_finite() || !(field.min() > 0.0) {
                problems.push(format!("pde.u0 must be positive and finite on the grid (min {})", field.min()));
            } else if self.pde.beta.fract() != 0.0 && field.min() < 1.0 {
                problems.push(format!(
                    "beta-domain: non-integer beta = {} needs u0 >= 1 (min u0 = {})",
                    self.pde.beta,
                    field.min()
                ));
            }
            u0 = Some(field);
        }

        if let (Some(m), Some(tg)) = (&metric, time_grid) {
            match check_cfl(m, &flow, &tg) {
                Err(Error::Cfl { dt, limit }) => {
                    problems.push(format!("CFL: dt = {dt} exceeds the stability limit {limit}"))
                }
                Err(e) => problems.push(format!("CFL: {e}")),
                Ok(_) => {}
            }
        }

        if !problems.is_empty() {
            return Err(Error::Scenario(problems));
        }
        let (grid, metric, u0, time_grid) = (grid.unwrap(), metric.unwrap(), u0.unwrap(), time_grid.unwrap());
        Ok(Scenario {
            file: self.clone(),
            grid,
            metric,
            measure: sf(&self.measure),
            flow,
            params,
            u0,
            time_grid,
            save_every: self.time.save_every,
            checker: CheckSettings {
                n_weight: c.n_weight,
                slack: c.slack,
                stencil: c.stencil,
                harnack_time: c.harnack_time,
                harnack_side: c.harnack_side,
                declared: c.declared,
            },
        })
    }
}

/// Read, parse and validate a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    ScenarioFile::from_json(&text)?.build()
}

/// The canonical Randers scenario of the acceptance suite.
pub fn canonical() -> ScenarioFile {
    ScenarioFile::from_json(CANONICAL).expect("canonical scenario parses")
}

/// Source text of [`canonical`].
pub const CANONICAL: &str = r#"{
  "name": "canonical-randers",
  "grid": { "n": [48, 48], "ntheta": 32 },
  "metric": { "kind": "randers", "a11": "1", "a12": "0", "a22": "1", "b1": "0.1*sin(x2)", "b2": "0" },
  "measure": "0",
  "flow": { "kind": "conformal", "lambda": "0.2" },
  "pde": { "alpha": 2, "beta": 1, "r1": "0.1", "r2": "0.05", "r3": "0.05", "u0": "2 + 0.2*sin(x1)" },
  "time": { "t_end": 0.5, "dt": 0.0025, "save_every": 20 },
  "checker": { "N": 4 }
}"#;

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
      "name": "heat",
      "grid": { "n": [16, 16], "ntheta": 8 },
      "metric": { "kind": "euclidean" },
      "flow": { "kind": "conformal", "lambda": 0 },
      "pde": { "alpha": 1, "beta": 1, "u0": "2 + sin(x1)" },
      "time": { "t_end": 0.1, "dt": 0.01, "save_every": 5 }
    }"#;

    #[test]
    fn minimal_scenario_loads() {
        let s = ScenarioFile::from_json(MINIMAL).unwrap().build().unwrap();
        assert_eq!(s.time_grid.steps, 10);
        assert_eq!(s.checker.n_weight, 4.0);
        assert_eq!(s.checker.stencil, NeighborStencil::Sixteen);
    }

    #[test]
    fn canonical_scenario_is_valid() {
        let s = canonical().build().unwrap();
        assert_eq!(s.time_grid.steps, 200);
        assert_eq!((s.grid.nx, s.grid.ntheta), (48, 32));
    }

    #[test]
    fn beta_domain_is_rejected() {
        let text = MINIMAL.replace("\"beta\": 1", "\"beta\": 1.5").replace("2 + sin(x1)", "1.5 + sin(x1)");
        let Err(Error::Scenario(list)) = ScenarioFile::from_json(&text).unwrap().build() else { panic!() };
        assert!(list.iter().any(|m| m.contains("beta-domain")), "{list:?}");
    }

    #[test]
    fn cfl_violation_names_limit() {
        let text = MINIMAL.replace("\"dt\": 0.01", "\"dt\": 0.05");
        let Err(Error::Scenario(list)) = ScenarioFile::from_json(&text).unwrap().build() else { panic!() };
        let h = std::f64::consts::TAU / 16.0;
        let limit = 0.9 * h * h / 4.0;
        assert!(list.iter().any(|m| m.contains("CFL") && m.contains(&format!("{limit}"))), "{list:?}");
    }

    #[test]
    fn violations_are_collected() {
        let text = MINIMAL
            .replace("\"n\": [16, 16]", "\"n\": [4, 16]")
            .replace("\"alpha\": 1", "\"alpha\": -1")
            .replace("\"lambda\": 0", "\"lambda\": \"sin(x1)\"");
        let Err(Error::Scenario(list)) = ScenarioFile::from_json(&text).unwrap().build() else { panic!() };
        assert!(list.len() >= 2, "{list:?}");
        assert!(ScenarioFile::from_json("{\"name\": 1}").is_err());
    }

    #[test]
    fn ricci_flow_needs_sampled_metric() {
        let text = MINIMAL.replace("{ \"kind\": \"conformal\", \"lambda\": 0 }", "{ \"kind\": \"ricci\" }");
        assert!(ScenarioFile::from_json(&text).unwrap().build().is_err());
        let text = text.replace("{ \"kind\": \"euclidean\" }", "{ \"kind\": \"euclidean\", \"sampled\": true }");
        assert!(ScenarioFile::from_json(&text).unwrap().build().is_ok());
    }

    #[test]
    fn round_trips_through_json() {
        let f = canonical();
        assert_eq!(ScenarioFile::from_json(&f.to_json()).unwrap(), f);
    }
}
