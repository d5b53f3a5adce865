use vstab_core::controllers::{ControllerConfig, ControllerKind};
use vstab_core::harness::*;
use vstab_core::stochastic::SlowDrift;
use vstab_core::Execution;

fn short_threebus(horizon: f64, seeds: Vec<u64>) -> Scenario {
    let mut sc = Scenario::bundled("threebus_reference").unwrap();
    sc.horizon = horizon;
    sc.seeds = seeds;
    sc
}

fn quiet(mut sc: Scenario) -> Scenario {
    sc.drift = SlowDrift::Fixed { s: 0.0 };
    sc.ou.std = 0.0;
    sc
}

#[test]
fn bundled_scenarios_parse() {
    let names: Vec<&str> = Scenario::bundled_names().collect();
    assert_eq!(names, ["threebus_reference", "ieee39_pocket"]);
    for n in names {
        let sc = Scenario::bundled(n).unwrap();
        assert_eq!(sc.controllers.len(), 3);
        let back = Scenario::from_json(&sc.to_json()).unwrap();
        assert_eq!(back, sc);
    }
    let sc = Scenario::bundled("threebus_reference").unwrap();
    assert_eq!(sc.seeds.len(), 10);
    assert_eq!(sc.drift, SlowDrift::Ramp { rate: 0.0005 });
    assert!(Scenario::bundled("nope").is_err());
}

#[test]
fn scenario_schema_is_strict() {
    let text = Scenario::bundled("threebus_reference").unwrap().to_json();
    let extra = text.replacen('{', "{\"colour\": 1,", 1);
    let err = Scenario::from_json(&extra).unwrap_err();
    assert_eq!(err.class(), "schema");
    let mut sc = Scenario::bundled("threebus_reference").unwrap();
    sc.seeds.clear();
    assert!(sc.validate().is_err());
}

#[test]
fn quiet_system_never_collapses() {
    let sc = quiet(short_threebus(60.0, vec![1]));
    for kind in [ControllerKind::Rbc, ControllerKind::Mbc, ControllerKind::Vbc] {
        let r = run_kind(&sc, kind, 1).unwrap();
        assert_eq!(r.collapse_time, None, "{kind}");
        assert_eq!(r.survival, 60.0);
        assert!(r.load_increase.abs() < 1e-12);
    }
}

#[test]
fn runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = short_threebus(1500.0, vec![3]);
    sc.output = Some(dir.path().to_path_buf());
    let a = run_kind(&sc, ControllerKind::Rbc, 3).unwrap();
    let first = std::fs::read(dir.path().join("trajectory_rbc_3.csv")).unwrap();
    let b = run_kind(&sc, ControllerKind::Rbc, 3).unwrap();
    let second = std::fs::read(dir.path().join("trajectory_rbc_3.csv")).unwrap();
    assert!(a.collapse_time.is_some());
    assert_eq!(a, b);
    assert_eq!(first, second);
    assert!(dir.path().join("controller_rbc_3.csv").exists());
}

#[test]
fn controllers_see_the_same_demand() {
    let sc = short_threebus(700.0, vec![5]);
    let report = compare_controllers(&sc, Execution::Sequential).unwrap();
    let row = &report.results[0];
    let n = row.iter().map(|r| r.trajectory.samples.len()).min().unwrap();
    for r in &row[1..] {
        for (a, b) in row[0].trajectory.samples[..n].iter().zip(&r.trajectory.samples[..n]) {
            assert_eq!(a.p_load.to_bits(), b.p_load.to_bits());
            assert_eq!(a.q_load.to_bits(), b.q_load.to_bits());
            assert_eq!(a.s.to_bits(), b.s.to_bits());
        }
    }
}

#[test]
fn duplicated_configs_give_zero_deltas() {
    let mut sc = short_threebus(700.0, vec![1, 2]);
    let c = sc.controllers[1].clone();
    sc.controllers = vec![c.clone(), c];
    let report = compare_controllers(&sc, Execution::Sequential).unwrap();
    assert_eq!(report.labels, ["mbc#0", "mbc#1"]);
    for d in report.deltas() {
        assert_eq!(d.deltas.len(), 1);
        assert_eq!(d.deltas[0].2, 0.0);
    }
}

#[test]
fn comparison_needs_two_controllers() {
    let mut sc = short_threebus(30.0, vec![1]);
    sc.controllers.truncate(1);
    assert!(compare_controllers(&sc, Execution::Sequential).is_err());
}

#[test]
fn parallel_and_sequential_reports_agree() {
    let sc = short_threebus(400.0, vec![1, 2, 3]);
    let a = compare_controllers(&sc, Execution::Sequential).unwrap();
    let b = compare_controllers(&sc, Execution::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_report_exports_headers_only() {
    let dir = tempfile::tempdir().unwrap();
    let report = ComparisonReport {
        scenario: "empty".into(),
        labels: vec![],
        kinds: vec![],
        seeds: vec![],
        results: vec![],
    };
    export_report(&report, dir.path(), ReportFormat::Full).unwrap();
    let results = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(results, format!("{RESULTS_HEADER}\n"));
    let series = std::fs::read_to_string(dir.path().join("series.csv")).unwrap();
    assert_eq!(series, format!("{SERIES_HEADER}\n"));
    let summary = read_summary(dir.path()).unwrap();
    assert!(summary.mean_survival.is_empty());
    assert_eq!(summary.ordering_verdict, 0.0);
}

#[test]
fn exported_results_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let sc = short_threebus(700.0, vec![1, 2]);
    let report = compare_controllers(&sc, Execution::Parallel).unwrap();
    let files = export_report(&report, dir.path(), ReportFormat::Full).unwrap();
    assert!(files.iter().any(|p| p.ends_with("trajectory_vbc_2.csv")));
    assert!(files.iter().any(|p| p.ends_with("controller_mbc_1.csv")));

    let text = std::fs::read_to_string(dir.path().join("results.csv")).unwrap();
    let rows = parse_results_csv(&text).unwrap();
    let flat: Vec<&RunResult> = report.results.iter().flatten().collect();
    assert_eq!(rows.len(), flat.len());
    for (row, r) in rows.iter().zip(flat) {
        assert_eq!(row.seed, r.seed);
        assert_eq!(row.controller, r.label);
        assert_eq!(row.collapse_time.map(f64::to_bits), r.collapse_time.map(f64::to_bits));
        assert_eq!(row.survival.to_bits(), r.survival.to_bits());
        assert_eq!(row.load_increase.to_bits(), r.load_increase.to_bits());
        assert_eq!(row.final_b_svc.to_bits(), r.final_b_svc.to_bits());
    }

    let summary = read_summary(dir.path()).unwrap();
    assert_eq!(summary, vstab_core::harness::summary(&report));
    assert_eq!(summary.deltas.len(), 2 * 3);

    let series = std::fs::read_to_string(dir.path().join("series.csv")).unwrap();
    let mut lines = series.lines();
    assert_eq!(lines.next(), Some(SERIES_HEADER));
    let kinds: std::collections::BTreeSet<&str> = lines.map(|l| l.split(',').nth(3).unwrap()).collect();
    let want: std::collections::BTreeSet<&str> = ["p_load", "q_load", "b_svc", "v_1", "v_2", "v_3"].into();
    assert_eq!(kinds, want);
}

#[test]
fn results_parser_rejects_foreign_files() {
    assert!(parse_results_csv("a,b\n1,2\n").is_err());
    let bad = format!("{RESULTS_HEADER}\n1,rbc,,x,0,0\n");
    assert!(parse_results_csv(&bad).is_err());
}

#[test]
fn unknown_controller_index_is_rejected() {
    let sc = short_threebus(30.0, vec![1]);
    assert!(run_scenario(&sc, 7, 1).is_err());
    let mut only_rbc = sc.clone();
    only_rbc.controllers = vec![ControllerConfig::of_kind(ControllerKind::Rbc)];
    assert!(run_kind(&only_rbc, ControllerKind::Vbc, 1).is_err());
}
