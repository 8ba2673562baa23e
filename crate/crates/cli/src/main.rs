//! Command-line front end of the flow laboratory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowlab::checker::{harnack_pairs, NodePair};
use flowlab::geodesic::NeighborStencil;
use flowlab::run::{
    bochner_study, distance_csv, distance_table, load_run_scenario, run, verify_run, write_curvature_report,
};
use flowlab::scenario::{load_scenario, Scenario};
use flowlab::{Error, Result};

/// Exit status when every check ran but at least one theorem failed.
const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "flowlab", version, about = "Finsler geometric-flow laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CheckerOverrides {
    /// Relative slack of every inequality.
    #[arg(long)]
    slack: Option<f64>,
    /// Neighbour stencil of the distance graph.
    #[arg(long, value_parser = ["16", "32"])]
    stencil: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a scenario, check the estimates and write a run directory.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: CheckerOverrides,
    },
    /// Re-run the checker on a completed run directory.
    Verify {
        /// Run directory written by `simulate`.
        #[arg(long)]
        run: PathBuf,
        /// Directory for the regenerated report (the run directory by default).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: CheckerOverrides,
    },
    /// Survey the curvature of a scenario's initial metric.
    CurvatureReport {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mesh refinement study of the Bochner-Weitzenbock residual.
    BochnerTest {
        #[arg(long)]
        scenario: PathBuf,
        /// Comma-separated mesh sizes.
        #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 64])]
        meshes: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forward and backward distances between grid nodes, as CSV.
    Distance {
        #[arg(long)]
        scenario: PathBuf,
        /// Pairs `i,j:k,l` separated by `;` (the Harnack pairs by default).
        #[arg(long)]
        pairs: Option<String>,
        /// Output file (standard output by default).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_parser = ["16", "32"])]
        stencil: Option<String>,
    },
}

fn stencil(s: &Option<String>) -> Option<NeighborStencil> {
    s.as_deref().map(|s| if s == "32" { NeighborStencil::ThirtyTwo } else { NeighborStencil::Sixteen })
}

fn apply(mut scenario: Scenario, o: &CheckerOverrides) -> Result<Scenario> {
    if o.slack.is_none() && o.stencil.is_none() {
        return Ok(scenario);
    }
    let c = &mut scenario.file.checker;
    if let Some(r) = o.slack {
        c.slack.relative = r;
    }
    if let Some(s) = stencil(&o.stencil) {
        c.stencil = s;
    }
    scenario = scenario.file.build()?;
    Ok(scenario)
}

fn parse_pairs(text: &str) -> Result<Vec<NodePair>> {
    let node = |s: &str| -> Option<(usize, usize)> {
        let (i, j) = s.trim().split_once(',')?;
        Some((i.trim().parse().ok()?, j.trim().parse().ok()?))
    };
    text.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.split_once(':')
                .and_then(|(a, b)| Some((node(a)?, node(b)?)))
                .ok_or_else(|| Error::Parameter(format!("malformed pair '{p}' (expected i,j:k,l)")))
        })
        .collect()
}

fn write_out(path: &Option<PathBuf>, name: &str, text: &str) -> Result<()> {
    if let Some(dir) = path {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(name), text)?;
    }
    Ok(())
}

fn execute(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Simulate { scenario, out, overrides } => {
            let s = apply(load_scenario(&scenario)?, &overrides)?;
            let report = run(&s, &out)?;
            print!("{}", report.summary_table());
            Ok(report.pass)
        }
        Command::Verify { run: dir, out, overrides } => {
            let s = apply(load_run_scenario(&dir)?, &overrides)?;
            let report = verify_run(&dir, Some(&s), out.as_ref().unwrap_or(&dir))?;
            print!("{}", report.summary_table());
            Ok(report.pass)
        }
        Command::CurvatureReport { scenario, out } => {
            let r = write_curvature_report(&load_scenario(&scenario)?, &out)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(true)
        }
        Command::BochnerTest { scenario, meshes, out } => {
            let study = bochner_study(&load_scenario(&scenario)?, &meshes)?;
            print!("{}", study.table());
            write_out(&out, "bochner.json", &(serde_json::to_string_pretty(&study)? + "\n"))?;
            Ok(true)
        }
        Command::Distance { scenario, pairs, out, stencil: st } => {
            let s = load_scenario(&scenario)?;
            let pairs = match pairs {
                Some(p) => parse_pairs(&p)?,
                None => harnack_pairs(&s.grid, s.checker.harnack_side),
            };
            let rows = distance_table(&s, &pairs, stencil(&st).unwrap_or(s.checker.stencil))?;
            let csv = distance_csv(&s, &rows);
            match out {
                Some(path) => std::fs::write(path, csv)?,
                None => print!("{csv}"),
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_CHECK_FAILED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
