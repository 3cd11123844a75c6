use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn file(name: &str) -> String {
    scenarios().join(name).display().to_string()
}

fn rulenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rulenet")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn json_lines(text: &str) -> Vec<serde_json::Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn scenario_writes_metrics_to_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = rulenet(&["--scenario", &file("chain.toml"), "--output", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = json_lines(&std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap());
    assert_eq!(lines[0]["record"], "header");
    assert_eq!(lines[0]["schema"], 1);
    assert_eq!(lines.last().unwrap()["record"], "global");
    assert!(lines.iter().all(|v| v.get("wall_clock_s").is_none()));
    assert!(stderr(&o).contains("wall_clock_s"));
    assert!(stdout(&o).is_empty());
    assert!(!dir.path().join("trace.log").exists());
}

#[test]
fn metrics_go_to_stdout_without_output_dir() {
    let o = rulenet(&["--scenario", &file("chain.toml"), "--duration", "0.05"]);
    assert!(o.status.success());
    let lines = json_lines(&stdout(&o));
    assert_eq!(lines[0]["duration_s"], 0.05);
}

#[test]
fn topology_and_scenario_files_merge() {
    let o = rulenet(&[
        "--topology",
        &file("nested_topology.toml"),
        "--scenario",
        &file("nested_scenario.toml"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = json_lines(&stdout(&o));
    let conns: Vec<_> = lines.iter().filter(|v| v["record"] == "connection").collect();
    assert_eq!(conns.len(), 3);
    assert_eq!(conns[0]["status"], "torndown");
    assert!(conns.iter().any(|c| c["parent"] == 1));
}

#[test]
fn topology_alone_runs_without_connections() {
    let o = rulenet(&["--topology", &file("nested_topology.toml"), "--duration", "0.01"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json_lines(&stdout(&o))[0]["connections"], 0);
}

#[test]
fn seed_is_applied_and_runs_repeat_exactly() {
    let run = |seed: &str| {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let o = rulenet(&["--scenario", &file("chain.toml"), "--seed", seed, "--trace", "--output", out]);
        assert!(o.status.success());
        let m = std::fs::read(dir.path().join("metrics.jsonl")).unwrap();
        let t = std::fs::read(dir.path().join("trace.log")).unwrap();
        (m, t)
    };
    let a = run("5");
    assert_eq!(a, run("5"));
    assert_ne!(a.0, run("6").0);
    assert_eq!(json_lines(std::str::from_utf8(&a.0).unwrap())[0]["seed"], 5);
}

#[test]
fn duration_is_applied() {
    let o = rulenet(&["--scenario", &file("chain.toml"), "--duration", "0.02"]);
    let g = json_lines(&stdout(&o)).pop().unwrap();
    assert_eq!(g["end_time_s"], 0.02);
    let bad = rulenet(&["--scenario", &file("chain.toml"), "--duration", "-1"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn trace_lines_have_time_kind_and_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = rulenet(&["--scenario", &file("chain.toml"), "--duration", "0.01", "--trace", "--output", out]);
    assert!(o.status.success());
    let t = std::fs::read_to_string(dir.path().join("trace.log")).unwrap();
    assert!(t.lines().next().unwrap().starts_with("0 START n0 n3 c1"));
    assert!(t.lines().any(|l| l.split(' ').nth(1) == Some("INSTALL")));
    for l in t.lines() {
        assert!(l.split(' ').count() >= 4, "{l}");
        l.split(' ').next().unwrap().parse::<u64>().unwrap();
    }
}

#[test]
fn verify_only_reports_without_running() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = rulenet(&[
        "--topology",
        &file("nested_topology.toml"),
        "--scenario",
        &file("nested_scenario.toml"),
        "--verify-only",
        "--output",
        out,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!dir.path().join("metrics.jsonl").exists());
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("verifier.json")).unwrap()).unwrap();
    let checks = v.as_array().unwrap();
    assert_eq!(checks.len(), 3);
    for c in checks {
        assert_eq!(c["report"]["findings"].as_array().unwrap().len(), 0);
        assert_eq!(c["report"]["delivered"], true);
    }
    assert_eq!(checks[1]["segment"], "west");
}

fn unreachable() -> tempfile::NamedTempFile {
    let text = std::fs::read_to_string(scenarios().join("chain.toml"))
        .unwrap()
        .replace("min_fidelity = 0.9", "min_fidelity = 0.995");
    let f = tempfile::Builder::new().suffix(".toml").tempfile().unwrap();
    std::fs::write(f.path(), text).unwrap();
    f
}

#[test]
fn verify_only_fails_on_findings_unless_allowed() {
    let f = unreachable();
    let path = f.path().to_str().unwrap();
    let o = rulenet(&["--scenario", path, "--verify-only"]);
    assert_eq!(o.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v[0]["error"].as_str().unwrap().contains("no route"));
    let o = rulenet(&["--scenario", path, "--verify-only", "--allow-faults"]);
    assert!(o.status.success());
}

#[test]
fn runtime_faults_set_exit_code_unless_allowed() {
    let text = std::fs::read_to_string(scenarios().join("chain.toml"))
        .unwrap()
        .replace("duration_s = 0.5", "duration_s = 0.05\nmax_firings = 1");
    let f = tempfile::Builder::new().suffix(".toml").tempfile().unwrap();
    std::fs::write(f.path(), text).unwrap();
    let path = f.path().to_str().unwrap();
    let o = rulenet(&["--scenario", path]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let lines = json_lines(&stdout(&o));
    assert!(lines.iter().any(|v| v["record"] == "fault" && v["kind"] == "Nontermination"));
    let o = rulenet(&["--scenario", path, "--allow-faults"]);
    assert!(o.status.success());
}

#[test]
fn route_prints_path_and_costs() {
    let o = rulenet(&["--scenario", &file("chain.toml"), "--route", "alice", "bob", "--index-fidelity", "0.9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "network root");
    assert_eq!(lines[2], "path alice r1 r2 bob");
    let hops: Vec<f64> = lines
        .iter()
        .filter(|l| l.starts_with("hop "))
        .map(|l| l.rsplit(' ').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(hops.len(), 3);
    let total: f64 = lines.last().unwrap().strip_prefix("total ").unwrap().parse().unwrap();
    assert!((hops.iter().sum::<f64>() - total).abs() < 1e-8);
}

#[test]
fn route_hides_networks_and_reports_unreachable() {
    let args = ["--topology", &file("nested_topology.toml")];
    let o = rulenet(&[&args[..], &["--route", "e1", "e2", "--index-fidelity", "0.7"]].concat());
    assert!(stdout(&o).contains("path e1 b1 b2 b3 b4 e2"), "{}", stdout(&o));
    assert!(stdout(&o).contains("network:west"));
    let o = rulenet(&[&args[..], &["--route", "e1", "e2", "--index-fidelity", "0.999"]].concat());
    assert_eq!(o.status.code(), Some(2));
    let o = rulenet(&[&args[..], &["--route", "e1", "nope", "--index-fidelity", "0.7"]].concat());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown node"));
}

#[test]
fn route_requires_index_fidelity() {
    let o = rulenet(&["--scenario", &file("chain.toml"), "--route", "alice", "bob"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--index-fidelity"));
}

#[test]
fn bad_config_reports_location_and_exits_2() {
    let o = rulenet(&["--scenario", &file("broken.toml")]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("broken.toml") && e.contains("link[0].b"), "{e}");
    let o = rulenet(&[]);
    assert_eq!(o.status.code(), Some(2));
}
