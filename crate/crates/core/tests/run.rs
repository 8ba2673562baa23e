use std::fs;
use std::path::Path;

use flowlab::checker::Theorem;
use flowlab::geodesic::NeighborStencil;
use flowlab::run::{bochner_study, curvature_report, distance_table, run, verify_run, ERROR_MARKER};
use flowlab::scenario::{Scenario, ScenarioFile};
use flowlab::Error;

fn scenario(text: &str) -> Scenario {
    ScenarioFile::from_json(text).unwrap().build().unwrap()
}

const STATIONARY: &str = r#"{
  "name": "stationary",
  "grid": { "n": [16, 16], "ntheta": 8 },
  "metric": { "kind": "euclidean" },
  "flow": { "kind": "conformal", "lambda": 0 },
  "pde": { "alpha": 1, "beta": 1, "u0": 1 },
  "time": { "t_end": 0.1, "dt": 0.01, "save_every": 5 }
}"#;

const SMALL_RANDERS: &str = r#"{
  "name": "small-randers",
  "grid": { "n": [16, 16], "ntheta": 16 },
  "metric": { "kind": "randers", "b1": "0.1*sin(x2)" },
  "flow": { "kind": "conformal", "lambda": "0.2" },
  "pde": { "alpha": 2, "beta": 1, "r1": "0.1", "r2": "0.05", "r3": "0.05", "u0": "2 + 0.2*sin(x1)" },
  "time": { "t_end": 0.1, "dt": 0.01, "save_every": 5 }
}"#;

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for sub in [dir.to_path_buf(), dir.join("fields")] {
        let mut entries: Vec<_> = fs::read_dir(&sub).unwrap().flatten().filter(|e| e.path().is_file()).collect();
        entries.sort_by_key(|e| e.path());
        for e in entries {
            files.push((e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()));
        }
    }
    files
}

#[test]
fn stationary_run_passes_with_zero_suprema() {
    let dir = tempfile::tempdir().unwrap();
    let report = run(&scenario(STATIONARY), dir.path()).unwrap();
    assert!(report.pass, "{}", report.summary_table());
    assert!(report.records.iter().all(|r| r.measured == 0.0));
    assert_eq!(report.records.iter().map(|r| r.theorem).collect::<Vec<_>>(), [Theorem::Shi, Theorem::Hamilton, Theorem::Harnack]);
    for f in ["manifest.json", "metrics.csv", "trajectory.json", "report.json", "fields/u_0000.csv", "fields/u_0002.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert!(!dir.path().join(ERROR_MARKER).exists());
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 12);
}

#[test]
fn runs_are_byte_identical_and_verify_reproduces_the_report() {
    let s = scenario(SMALL_RANDERS);
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(&s, a.path()).unwrap();
    run(&s, b.path()).unwrap();
    assert_eq!(read_all(a.path()), read_all(b.path()));
    verify_run(a.path(), None, c.path()).unwrap();
    assert_eq!(fs::read(a.path().join("report.json")).unwrap(), fs::read(c.path().join("report.json")).unwrap());
}

#[test]
fn convexity_loss_stops_with_marker_naming_the_time() {
    let text = r#"{
      "name": "collapse",
      "grid": { "n": [16, 16], "ntheta": 8 },
      "metric": { "kind": "euclidean", "sampled": true },
      "flow": { "kind": "custom", "h11": "3", "h12": "0", "h22": "0.5" },
      "pde": { "alpha": 1, "beta": 1, "u0": "2 + sin(x1)" },
      "time": { "t_end": 0.5, "dt": 0.01, "save_every": 25 }
    }"#;
    let dir = tempfile::tempdir().unwrap();
    let err = run(&scenario(text), dir.path()).unwrap_err();
    let Error::Stopped { time, .. } = err else { panic!("{err}") };
    assert!(time > 0.0 && time < 1.0 / 6.0 + 1e-9, "{time}");
    let marker = fs::read_to_string(dir.path().join(ERROR_MARKER)).unwrap();
    assert!(marker.contains(&format!("t = {time}")), "{marker}");
    assert!(dir.path().join("manifest.json").exists() && !dir.path().join("report.json").exists());
    assert!(verify_run(dir.path(), None, dir.path()).is_err());
}

#[test]
fn euclidean_curvature_report_is_flat() {
    let r = curvature_report(&scenario(STATIONARY)).unwrap();
    for e in [r.flag, r.ricci, r.s_curvature, r.s_dot, r.weighted_ricci] {
        assert_eq!(e.max_abs(), 0.0, "{r:?}");
    }
    assert_eq!((r.k, r.cartan_max, r.reversibility, r.l1), (0.0, 0.0, 1.0, 0.0));
}

#[test]
fn bochner_study_on_conformal_metric() {
    let text = r#"{
      "name": "bochner",
      "grid": { "n": [16, 16], "ntheta": 16 },
      "metric": { "kind": "riemannian", "a11": "exp(0.2*sin(x1))", "a22": "exp(0.2*sin(x1))" },
      "flow": { "kind": "conformal", "lambda": 0 },
      "pde": { "alpha": 1, "beta": 1, "u0": "2 + 0.3*sin(x1)*cos(x2)" },
      "time": { "t_end": 0.02, "dt": 0.01 }
    }"#;
    let study = bochner_study(&scenario(text), &[16, 32, 64]).unwrap();
    assert_eq!(study.rows.len(), 3);
    assert!(study.min_order >= 1.5, "{}", study.table());
}

#[test]
fn distances_are_asymmetric_only_with_a_drift() {
    let pairs = [((0, 0), (8, 4)), ((3, 5), (12, 9))];
    let randers = distance_table(&scenario(SMALL_RANDERS), &pairs, NeighborStencil::Sixteen).unwrap();
    assert!(randers.iter().any(|r| (r.forward - r.backward).abs() > 1e-3), "{randers:?}");
    let flat = SMALL_RANDERS.replace("\"b1\": \"0.1*sin(x2)\"", "\"b1\": \"0\"");
    for r in distance_table(&scenario(&flat), &pairs, NeighborStencil::ThirtyTwo).unwrap() {
        assert!((r.forward - r.backward).abs() <= 1e-10, "{r:?}");
    }
    assert!(distance_table(&scenario(&flat), &[((0, 0), (16, 0))], NeighborStencil::Sixteen).is_err());
}
