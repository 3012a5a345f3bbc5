use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dmpc(args: &[&str], out_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dmpc"));
    cmd.args(args).env_remove("DMPC_OUT_DIR");
    if let Some(d) = out_dir {
        cmd.env("DMPC_OUT_DIR", d);
    }
    cmd.output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn rectangle_variant(dir: &Path, from: &str, to: &str) -> String {
    let base = dmpc::sim::scenario::RECTANGLE;
    assert!(base.contains(from), "pattern `{from}` missing");
    let p = dir.join("variant.toml");
    fs::write(&p, base.replacen(from, to, 1)).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn validate_rectangle_passes() {
    let o = dmpc(&["validate", "rectangle"], None);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(text(&o).contains("[20.0, 300.0, 4000.0, 10000.0]"), "{}", text(&o));
}

#[test]
fn validate_names_indefinite_block() {
    let dir = tempfile::tempdir().unwrap();
    let path = rectangle_variant(dir.path(), "matrix = [[10.0, 0.0], [0.0, 10.0]]", "matrix = [[-1.0, 0.0], [0.0, -1.0]]");
    let o = dmpc(&["validate", &path], None);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("Q_44"), "{}", text(&o));
}

#[test]
fn validate_reports_schedule_gap() {
    let dir = tempfile::tempdir().unwrap();
    let path = rectangle_variant(dir.path(), "start = 20.0", "start = 25.0");
    let o = dmpc(&["validate", &path], None);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("[FAIL] schedule coverage"), "{}", text(&o));
}

#[test]
fn parse_error_has_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = rectangle_variant(dir.path(), "horizon = 7", "horizon = \"seven\"");
    let o = dmpc(&["validate", &path], None);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("line 10, column 11"), "{}", text(&o));
}

#[test]
fn unknown_override_exits_2_naming_key() {
    let o = dmpc(&["run", "--scenario", "rectangle", "--override", "gamma=3"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("`gamma`"), "{}", text(&o));
    let o = dmpc(&["run", "--scenario", "rectangle", "--override", "q_max=3"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("q_max"), "{}", text(&o));
}

#[test]
fn run_writes_artifacts_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["run", "--scenario", "rectangle", "--transport", "inproc", "--seed", "7", "--max-steps", "30"];
    let oa = dmpc(&args, Some(a.path()));
    assert_eq!(oa.status.code(), Some(0), "{}", text(&oa));
    let out = text(&oa);
    for needle in ["final tracking error", "max residual", "min pairwise distance", "qp_solve_step3"] {
        assert!(out.contains(needle), "missing `{needle}` in\n{out}");
    }
    let ob = dmpc(&args, Some(b.path()));
    assert_eq!(ob.status.code(), Some(0));
    for f in ["trajectory.csv", "residual.csv"] {
        let x = fs::read(a.path().join(f)).unwrap();
        let y = fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
    assert!(a.path().join("timing.csv").exists());
    assert!(a.path().join("timing_report.csv").exists());
}

#[test]
fn out_flag_beats_environment() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    let flag = flag_dir.path().to_string_lossy().into_owned();
    let o = dmpc(&["run", "--scenario", "rectangle", "--max-steps", "2", "--no-oracle", "--out", &flag], Some(env_dir.path()));
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(flag_dir.path().join("trajectory.csv").exists());
    assert!(!env_dir.path().join("trajectory.csv").exists());
}

#[test]
fn formation_change_uses_dsqp() {
    let d = tempfile::tempdir().unwrap();
    let o = dmpc(
        &["run", "--scenario", "formation_change", "--override", "l_max=3", "q_max=5", "--max-steps", "5"],
        Some(d.path()),
    );
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(text(&o).contains("(dsqp)"));
    assert!(text(&o).contains("dsqp_iteration"));
}

#[test]
fn udp_transport_runs() {
    let d = tempfile::tempdir().unwrap();
    let o = dmpc(
        &["run", "--scenario", "rectangle", "--transport", "udp", "--loss", "0.1", "--max-steps", "10", "--no-oracle"],
        Some(d.path()),
    );
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
}

#[test]
fn persistent_transport_failure_exits_1() {
    let d = tempfile::tempdir().unwrap();
    let o = dmpc(
        &[
            "run", "--scenario", "rectangle", "--transport", "udp", "--loss", "0.999", "--timeout-ms", "2", "--max-steps", "40",
            "--no-oracle",
        ],
        Some(d.path()),
    );
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(text(&o).contains("aborted"), "{}", text(&o));
    assert!(d.path().join("trajectory.csv").exists(), "partial artifacts");
}

#[test]
fn empty_bench_suite_exits_0() {
    for suite in ["convex", "qcqp"] {
        let o = dmpc(&["bench", suite, "--instances", "0"], None);
        assert_eq!(o.status.code(), Some(0), "{}", text(&o));
        assert!(text(&o).contains("empty suite"));
    }
}

#[test]
fn convex_bench_reports_equivalence() {
    let o = dmpc(&["bench", "convex", "--instances", "3", "--l-max", "100"], None);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(text(&o).contains("max |u_admm - u_dsqp(q=1)|"), "{}", text(&o));
}
