use std::process::{Command, Output};

fn vstab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vstab")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn powerflow_prints_solution_table() {
    let o = vstab(&["powerflow", "threebus"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("bus,v,theta,p,q"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn cpf_reports_collapse_loading_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let curve = dir.path().join("curve.csv");
    let o = vstab(&["cpf", "threebus", "--points", "4", "--validate", "--out", curve.to_str().unwrap()]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("s_c = 0.22239"), "{text}");
    assert!(text.contains("s,max_error"));
    let csv = std::fs::read_to_string(curve).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 3);
}

#[test]
fn kfile_changes_the_direction() {
    let dir = tempfile::tempdir().unwrap();
    let k = dir.path().join("k.csv");
    std::fs::write(&k, "bus,k\n2,2.0\n").unwrap();
    let o = vstab(&["margin", "threebus", "--kfile", k.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    // twice the rate halves the collapse loading
    assert!(text.starts_with("s_c = 0.11119"), "{text}");
    assert!(text.contains("bus,critical_variance\n2,"));
}

#[test]
fn noise_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("noise.csv");
    let f = f.to_str().unwrap();
    assert!(vstab(&["noise", "gen", "threebus", "--steps", "50", "--drift", "ramp:0.01", "--out", f]).status.success());
    let o = vstab(&["noise", "inspect", f]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.starts_with("seed 1 dt 0.01 steps 50 buses [2]"), "{text}");
    assert!(text.contains("slow loading in [0, 0.005"));
}

#[test]
fn compare_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = vstab(&["compare", "threebus_reference", "--seeds", "1", "--horizon", "60", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = vstab(&["report", out]);
    assert!(r.status.success());
    let text = stdout(&r);
    assert!(text.contains("1,vbc,60,"), "{text}");
}

#[test]
fn errors_carry_their_class() {
    let o = vstab(&["powerflow", "no_such_case.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[io]"));
    let o = vstab(&["simulate", "ieee39_pocket", "--controller", "vbc", "--horizon=-1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[config]"));
    let o = vstab(&["covariance", "threebus", "--scale", "0.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error[dynamics]"));
}
