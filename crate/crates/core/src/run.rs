//! Run orchestration and artifact emission.
//!
//! A run directory holds `manifest.json`, `fields/u_NNNN.csv`,
//! `metrics.csv`, `trajectory.json` and `report.json`. A failed run keeps
//! whatever was written and adds an `ERROR` file with the diagnostic.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checker::{verify, NodePair, VerificationReport};
use crate::connection::{curvature_in_frame, CurvatureFrame};
use crate::error::{Error, Result};
use crate::expr::ScalarFn;
use crate::finsler::{cartan_tensor, reversibility_estimate, sphere_bundle_samples};
use crate::flow::{estimate_l1_grid, step_metric, TimeGrid};
use crate::geodesic::{DistanceGraph, NeighborStencil};
use crate::grid::ScalarField;
use crate::laplacian::bochner_residual;
use crate::pde::{convexity_margin, solve, SolutionTrajectory, SolveSetup, StepDiagnostics};
use crate::scenario::{build_metric, Scenario, ScenarioFile};

/// Identifier written into every manifest.
pub const FORMAT: &str = "flowlab-run/1";

/// File name of the failure marker.
pub const ERROR_MARKER: &str = "ERROR";

/// Contents of `manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: String,
    pub scenario: ScenarioFile,
}

/// One saved level in `trajectory.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedLevel {
    pub level: usize,
    pub step: usize,
    pub time: f64,
    pub file: String,
}

/// Contents of `trajectory.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub time_grid: TimeGrid,
    pub save_every: usize,
    pub levels: Vec<SavedLevel>,
    pub delta_emp: f64,
    pub b_emp: f64,
    pub sigma1_emp: f64,
    pub sigma2_emp: f64,
    pub steps: Vec<StepDiagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("artifact serializes");
    s.push('\n');
    s
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Field snapshot as CSV with columns `i,j,x1,x2,u`.
pub fn field_csv(scenario: &Scenario, u: &ScalarField) -> String {
    let g = &scenario.grid;
    let mut out = String::from("i,j,x1,x2,u\n");
    for j in 0..g.ny {
        for i in 0..g.nx {
            let x = g.point(i, j);
            let _ = writeln!(out, "{i},{j},{:.16e},{:.16e},{:.16e}", x[0], x[1], u.values[j * g.nx + i]);
        }
    }
    out
}

fn parse_field_csv(scenario: &Scenario, text: &str, path: &Path) -> Result<ScalarField> {
    let g = &scenario.grid;
    let mut u = ScalarField::zeros(g);
    let bad = |line: usize| Error::Io(format!("{}: malformed row {line}", path.display()));
    let mut rows = 0;
    for (n, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(bad(n + 1));
        }
        let i: usize = cols[0].parse().map_err(|_| bad(n + 1))?;
        let j: usize = cols[1].parse().map_err(|_| bad(n + 1))?;
        let v: f64 = cols[4].parse().map_err(|_| bad(n + 1))?;
        if i >= g.nx || j >= g.ny {
            return Err(bad(n + 1));
        }
        u.values[j * g.nx + i] = v;
        rows += 1;
    }
    if rows != g.len() {
        return Err(Error::Io(format!("{}: expected {} rows, found {rows}", path.display(), g.len())));
    }
    Ok(u)
}

/// Per-step diagnostics as CSV.
pub fn metrics_csv(steps: &[StepDiagnostics]) -> String {
    let mut out = String::from("step,time,u_min,u_max,convexity_margin,lambda_max,l1,mask_fraction\n");
    for s in steps {
        let _ = writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            s.step, s.time, s.u_min, s.u_max, s.convexity_margin, s.lambda_max, s.l1, s.mask_fraction
        );
    }
    out
}

fn level_steps(tg: &TimeGrid, save_every: usize, count: usize) -> Vec<usize> {
    (0..count).map(|l| (l * save_every).min(tg.steps)).collect()
}

fn trajectory_record(scenario: &Scenario, traj: &SolutionTrajectory) -> TrajectoryRecord {
    let tg = traj.time_grid;
    let levels = level_steps(&tg, scenario.save_every, traj.snapshots.len())
        .into_iter()
        .enumerate()
        .map(|(level, step)| SavedLevel { level, step, time: tg.time(step), file: format!("fields/u_{level:04}.csv") })
        .collect();
    TrajectoryRecord {
        time_grid: tg,
        save_every: scenario.save_every,
        levels,
        delta_emp: traj.delta_emp,
        b_emp: traj.b_emp,
        sigma1_emp: traj.sigma1_emp,
        sigma2_emp: traj.sigma2_emp,
        steps: traj.steps.clone(),
        failure: traj.failure.as_ref().map(|e| e.to_string()),
    }
}

fn fail(out: &Path, e: Error) -> Error {
    let _ = fs::write(out.join(ERROR_MARKER), format!("{e}\n"));
    e
}

/// Solve the scenario without writing anything.
pub fn simulate(scenario: &Scenario) -> Result<SolutionTrajectory> {
    solve(&SolveSetup {
        u0: &scenario.u0,
        metric: &scenario.metric,
        measure_phi: &scenario.measure,
        params: &scenario.params,
        flow: &scenario.flow,
        time_grid: scenario.time_grid,
        save_every: scenario.save_every,
    })
}

/// Solve, check and write every artifact into `out`.
pub fn run(scenario: &Scenario, out: &Path) -> Result<VerificationReport> {
    fs::create_dir_all(out.join("fields")).map_err(|e| io(out, e))?;
    for stale in [ERROR_MARKER, "report.json", "trajectory.json", "metrics.csv"] {
        let _ = fs::remove_file(out.join(stale));
    }
    if let Ok(entries) = fs::read_dir(out.join("fields")) {
        for e in entries.flatten() {
            let _ = fs::remove_file(e.path());
        }
    }
    let manifest =
        Manifest { format: FORMAT.into(), version: env!("CARGO_PKG_VERSION").into(), scenario: scenario.file.clone() };
    write(&out.join("manifest.json"), &to_json(&manifest))?;

    let traj = simulate(scenario).map_err(|e| fail(out, e))?;
    let record = trajectory_record(scenario, &traj);
    for (level, u) in record.levels.iter().zip(&traj.snapshots) {
        write(&out.join(&level.file), &field_csv(scenario, u)).map_err(|e| fail(out, e))?;
    }
    write(&out.join("metrics.csv"), &metrics_csv(&traj.steps)).map_err(|e| fail(out, e))?;
    write(&out.join("trajectory.json"), &to_json(&record)).map_err(|e| fail(out, e))?;
    if let Some(e) = traj.failure {
        let step = traj.steps.last().map_or(0, |s| s.step + 1);
        let time = traj.time_grid.time(step);
        return Err(fail(out, Error::Stopped { step, time, reason: e.to_string() }));
    }
    let report = verify(&traj, &scenario.measure, &scenario.params, &scenario.checker).map_err(|e| fail(out, e))?;
    write(&out.join("report.json"), &to_json(&report)).map_err(|e| fail(out, e))?;
    Ok(report)
}

/// Load the manifest of a run directory and rebuild its scenario.
pub fn load_run_scenario(dir: &Path) -> Result<Scenario> {
    let manifest: Manifest = from_json(&dir.join("manifest.json"))?;
    if manifest.format != FORMAT {
        return Err(Error::Io(format!("unsupported run format '{}'", manifest.format)));
    }
    manifest.scenario.build()
}

/// Rebuild the trajectory of a completed run from its artifacts. The metric
/// levels are replayed from the scenario.
pub fn load_trajectory(dir: &Path, scenario: &Scenario) -> Result<SolutionTrajectory> {
    if dir.join(ERROR_MARKER).exists() {
        let msg = read(&dir.join(ERROR_MARKER)).unwrap_or_default();
        return Err(Error::Parameter(format!("run did not complete: {}", msg.trim())));
    }
    let record: TrajectoryRecord = from_json(&dir.join("trajectory.json"))?;
    if let Some(f) = record.failure {
        return Err(Error::Parameter(format!("run did not complete: {f}")));
    }
    let tg = record.time_grid;
    let mut snapshots = Vec::with_capacity(record.levels.len());
    let mut metrics = Vec::with_capacity(record.levels.len());
    let mut m = scenario.metric.clone();
    m.time = tg.t0;
    let mut at = 0;
    for level in &record.levels {
        while at < level.step {
            m = step_metric(&m, &scenario.flow, tg.dt)?;
            at += 1;
            m.time = tg.time(at);
        }
        let path = dir.join(&level.file);
        let mut u = parse_field_csv(scenario, &read(&path)?, &path)?;
        u.time = Some(level.time);
        snapshots.push(u);
        metrics.push(m.clone());
    }
    Ok(SolutionTrajectory {
        time_grid: tg,
        snapshots,
        metrics,
        steps: record.steps,
        delta_emp: record.delta_emp,
        b_emp: record.b_emp,
        sigma1_emp: record.sigma1_emp,
        sigma2_emp: record.sigma2_emp,
        failure: None,
    })
}

/// Re-run the checker on a completed run directory and rewrite `report.json`
/// into `out`. `scenario` supplies the checker settings (possibly overridden);
/// it defaults to the one in the manifest.
pub fn verify_run(dir: &Path, scenario: Option<&Scenario>, out: &Path) -> Result<VerificationReport> {
    let stored;
    let scenario = match scenario {
        Some(s) => s,
        None => {
            stored = load_run_scenario(dir)?;
            &stored
        }
    };
    let traj = load_trajectory(dir, scenario)?;
    let report = verify(&traj, &scenario.measure, &scenario.params, &scenario.checker)?;
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    write(&out.join("report.json"), &to_json(&report))?;
    Ok(report)
}

/// Smallest and largest value of one quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extremes {
    pub min: f64,
    pub max: f64,
}

impl Extremes {
    fn new() -> Self {
        Extremes { min: f64::INFINITY, max: f64::NEG_INFINITY }
    }

    fn add(&mut self, v: f64) {
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    /// Largest absolute value.
    pub fn max_abs(&self) -> f64 {
        self.min.abs().max(self.max.abs())
    }
}

/// Curvature survey of the initial metric over the sphere bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub name: String,
    pub samples: usize,
    pub n_weight: f64,
    /// Flag curvature of the unique flag with pole `y`.
    pub flag: Extremes,
    /// `Ric(V)` at unit `V`.
    pub ricci: Extremes,
    /// `S(V)` at unit `V`.
    pub s_curvature: Extremes,
    /// `S'(V)` at unit `V`.
    pub s_dot: Extremes,
    pub weighted_ricci: Extremes,
    pub k: f64,
    pub cartan_max: f64,
    pub reversibility: f64,
    pub convexity_margin: f64,
    /// Flow deformation rate `L1` at the initial time.
    pub l1: f64,
}

/// Survey every curvature quantity of the initial metric.
pub fn curvature_report(scenario: &Scenario) -> Result<CurvatureReport> {
    let m = &scenario.metric;
    let phi = &scenario.measure;
    let n = scenario.checker.n_weight;
    let samples = sphere_bundle_samples(m.grid());
    let (mut flag, mut ricci, mut s, mut sd, mut w) =
        (Extremes::new(), Extremes::new(), Extremes::new(), Extremes::new(), Extremes::new());
    let mut cartan: f64 = 0.0;
    let mut frame: Option<([f64; 2], CurvatureFrame)> = None;
    for sample in &samples {
        if frame.as_ref().is_none_or(|(x, _)| *x != sample.x) {
            frame = Some((sample.x, CurvatureFrame::new(m, sample.x)?));
        }
        let fr = &frame.as_ref().expect("frame set").1;
        let c = curvature_in_frame(m, fr, phi, sample, n)?;
        let f = m.norm_at(sample.x, &sample.y)?;
        flag.add(c.flag);
        ricci.add(c.ricci / (f * f));
        s.add(c.s_curv / f);
        sd.add(c.s_dot / (f * f));
        w.add(c.weighted);
        cartan = cartan.max(cartan_tensor(m, sample)?.max_abs() * f);
    }
    Ok(CurvatureReport {
        name: scenario.file.name.clone(),
        samples: samples.len(),
        n_weight: n,
        flag,
        ricci,
        s_curvature: s,
        s_dot: sd,
        weighted_ricci: w,
        k: (-w.min).max(0.0),
        cartan_max: cartan,
        reversibility: reversibility_estimate(m, &samples)?,
        convexity_margin: convexity_margin(m)?,
        l1: estimate_l1_grid(&scenario.flow, m)?,
    })
}

/// Write `curvature.json` into `out`.
pub fn write_curvature_report(scenario: &Scenario, out: &Path) -> Result<CurvatureReport> {
    let report = curvature_report(scenario)?;
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    write(&out.join("curvature.json"), &to_json(&report))?;
    Ok(report)
}

/// One mesh of a Bochner refinement study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BochnerRow {
    pub n: usize,
    pub max_residual: f64,
    /// `log2` of the residual ratio to the previous mesh.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<f64>,
}

/// Refinement study of the Bochner-Weitzenbock residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BochnerStudy {
    pub name: String,
    pub rows: Vec<BochnerRow>,
    /// Smallest observed order.
    pub min_order: f64,
}

impl BochnerStudy {
    /// Plain-text order table.
    pub fn table(&self) -> String {
        let mut out = format!("{:>6} {:>14} {:>8}\n", "n", "max residual", "order");
        for r in &self.rows {
            let order = r.order.map(|o| format!("{o:.3}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(out, "{:>6} {:>14.6e} {:>8}", r.n, r.max_residual, order);
        }
        let _ = writeln!(out, "min order: {:.3}", self.min_order);
        out
    }
}

/// Residual of the Bochner-Weitzenbock identity for the scenario's metric,
/// measure and initial condition on the `n x n` meshes.
pub fn bochner_study(scenario: &Scenario, meshes: &[usize]) -> Result<BochnerStudy> {
    if meshes.len() < 2 {
        return Err(Error::Parameter("a refinement study needs at least two meshes".into()));
    }
    let u0 = ScalarFn::Expr(scenario.file.pde.u0.clone());
    let mut rows: Vec<BochnerRow> = Vec::new();
    for &n in meshes {
        let m = build_metric(scenario.grid.with_resolution(n, n)?, &scenario.file.metric)?;
        let u = ScalarField::sample(m.grid(), &u0, scenario.time_grid.t0);
        let max_residual = bochner_residual(&m, &scenario.measure, &u)?.max_abs();
        let order = rows.last().map(|p| (p.max_residual / max_residual).ln() / (n as f64 / p.n as f64).ln());
        rows.push(BochnerRow { n, max_residual, order });
    }
    let min_order = rows.iter().filter_map(|r| r.order).fold(f64::INFINITY, f64::min);
    Ok(BochnerStudy { name: scenario.file.name.clone(), rows, min_order })
}

/// Forward and backward distance between two grid nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub from: (usize, usize),
    pub to: (usize, usize),
    pub forward: f64,
    pub backward: f64,
}

/// Graph distances of the initial metric between node pairs.
pub fn distance_table(
    scenario: &Scenario,
    pairs: &[NodePair],
    stencil: NeighborStencil,
) -> Result<Vec<DistanceRow>> {
    let g = scenario.grid;
    for &(p, q) in pairs {
        if p.0 >= g.nx || p.1 >= g.ny || q.0 >= g.nx || q.1 >= g.ny {
            return Err(Error::Parameter(format!("points {p:?}, {q:?} are not grid nodes")));
        }
    }
    let graph = DistanceGraph::build(&scenario.metric, stencil)?;
    let mut cache: std::collections::BTreeMap<(usize, usize), Vec<f64>> = Default::default();
    let mut dist = |a: (usize, usize), b: (usize, usize)| {
        cache.entry(a).or_insert_with(|| graph.from_node(a.1 * g.nx + a.0))[b.1 * g.nx + b.0]
    };
    Ok(pairs.iter().map(|&(p, q)| DistanceRow { from: p, to: q, forward: dist(p, q), backward: dist(q, p) }).collect())
}

/// Distance rows as CSV.
pub fn distance_csv(scenario: &Scenario, rows: &[DistanceRow]) -> String {
    let g = &scenario.grid;
    let mut out = String::from("from_i,from_j,to_i,to_j,from_x1,from_x2,to_x1,to_x2,forward,backward\n");
    for r in rows {
        let (a, b) = (g.point(r.from.0, r.from.1), g.point(r.to.0, r.to.1));
        let _ = writeln!(
            out,
            "{},{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.from.0, r.from.1, r.to.0, r.to.1, a[0], a[1], b[0], b[1], r.forward, r.backward
        );
    }
    out
}

/// Paths of the standard artifacts of a run directory.
pub fn artifact_paths(dir: &Path) -> Vec<PathBuf> {
    ["manifest.json", "metrics.csv", "trajectory.json", "report.json"].iter().map(|f| dir.join(f)).collect()
}
