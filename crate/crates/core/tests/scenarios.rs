use std::path::{Path, PathBuf};

use rulenet_core::metrics::TraceSink;
use rulenet_core::routing::MuxDiscipline;
use rulenet_core::scenario::Scenario;
use rulenet_core::sim::{ConnStatus, SimOptions, Simulation};
use rulenet_core::{ConnectionId, NodeAddr};

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn load(files: &[&str]) -> Scenario {
    let paths: Vec<PathBuf> = files.iter().map(|f| scenarios().join(f)).collect();
    let refs: Vec<&Path> = paths.iter().map(|p| p.as_path()).collect();
    Scenario::load(&refs).unwrap()
}

fn nested() -> Scenario {
    load(&["nested_topology.toml", "nested_scenario.toml"])
}

#[test]
fn split_files_merge_into_one_scenario() {
    let s = nested();
    assert_eq!(s.topology.nodes.len(), 8);
    assert_eq!(s.internet.networks.len(), 3);
    assert_eq!(s.connections.len(), 1);
    assert_eq!(s.settings.seed, 21);
}

#[test]
fn layered_teardown_cascades_and_leaves_nothing() {
    let mut sim = Simulation::new(nested());
    sim.run();
    let root = ConnectionId(1);
    assert_eq!(sim.status(root), Some(ConnStatus::TornDown));
    let kids = sim.children(root);
    assert_eq!(kids.len(), 2);
    for k in &kids {
        assert_eq!(sim.status(*k), Some(ConnStatus::TornDown), "{k}");
        assert!(sim.layer(*k).unwrap() < sim.layer(root).unwrap());
    }
    assert!(sim.drain(5_000_000));
    assert_eq!(sim.fault_count(), 0, "{:?}", sim.faults());
    assert_eq!(sim.live_pairs(), 0);
    for u in 0..sim.topology().nodes.len() {
        assert_eq!(sim.used_qubits(NodeAddr(u as u32)), 0, "n{u}");
        assert!(sim.programs()[u].connections.is_empty(), "n{u} keeps rules");
    }
    let m = sim.metrics();
    assert!(m.global().unwrap().accounting_balanced);
    assert!(m.connection(1).unwrap().delivered > 0);
}

#[test]
fn chain_meets_fidelity_and_reports_schema() {
    let mut sim = Simulation::with_options(
        load(&["chain.toml"]),
        SimOptions {
            record_deliveries: true,
            ..SimOptions::default()
        },
    );
    let m = sim.run();
    assert!(sim.deliveries().iter().all(|d| d.fidelity >= 0.9 - 0.005));
    let text = m.to_jsonl();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["record"], "header");
    assert_eq!(lines[0]["schema"], rulenet_core::metrics::SCHEMA_VERSION);
    assert_eq!(lines.last().unwrap()["record"], "global");
    let conn = lines.iter().find(|v| v["record"] == "connection").unwrap();
    assert_eq!(conn["status"], "established");
    assert_eq!(conn["initiator"], "alice");
    assert_eq!(lines.iter().filter(|v| v["record"] == "link").count(), 3);
    assert_eq!(lines.iter().filter(|v| v["record"] == "node").count(), 4);
}

fn traced(s: Scenario) -> (String, Vec<u8>) {
    let mut sim = Simulation::with_options(
        s,
        SimOptions {
            trace: Some(TraceSink::Memory(vec![])),
            ..SimOptions::default()
        },
    );
    let m = sim.run().to_jsonl();
    (m, sim.trace().unwrap().to_vec())
}

#[test]
fn same_seed_is_byte_identical() {
    assert_eq!(traced(nested()), traced(nested()));
    let mut other = nested();
    other.settings.seed += 1;
    assert_ne!(traced(nested()).1, traced(other).1);
}

#[test]
fn circuit_switching_refuses_a_shared_link() {
    let text = r#"
[simulation]
duration_s = 0.2
discipline = "circuit"

[[node]]
name = "a"
type = "COMP"
[[node]]
name = "b"
type = "COMP"
[[node]]
name = "r"
type = "RTR"
[[node]]
name = "s"
type = "RTR"
[[node]]
name = "c"
type = "COMP"
[[node]]
name = "d"
type = "COMP"

[[link]]
a = "a"
b = "r"
length_km = 5
base_fidelity = 0.98
[[link]]
a = "b"
b = "r"
length_km = 5
base_fidelity = 0.98
[[link]]
a = "r"
b = "s"
length_km = 5
base_fidelity = 0.98
[[link]]
a = "s"
b = "c"
length_km = 5
base_fidelity = 0.98
[[link]]
a = "s"
b = "d"
length_km = 5
base_fidelity = 0.98

[[connection]]
id = 1
initiator = "a"
responder = "c"
min_fidelity = 0.8
[[connection]]
id = 2
initiator = "b"
responder = "d"
min_fidelity = 0.8
start_s = 0.01
"#;
    let s = Scenario::from_toml(text).unwrap();
    assert_eq!(s.settings.discipline, MuxDiscipline::Circuit);
    let mut sim = Simulation::new(s);
    let m = sim.run();
    assert_eq!(m.connection(1).unwrap().status, "established");
    let second = m.connection(2).unwrap();
    assert_eq!(second.status, "failed");
    assert!(second.failure.as_deref().unwrap().contains("refused"), "{second:?}");
}

#[test]
fn config_errors_name_file_and_field() {
    let bad = scenarios().join("broken.toml");
    let e = Scenario::load(&[bad.as_path()]).unwrap_err();
    let text = e.to_string();
    assert!(text.contains("broken.toml"), "{text}");
    assert!(text.contains("link[0].b") && text.contains("nowhere"), "{text}");
    let missing = scenarios().join("absent.toml");
    let e = Scenario::load(&[missing.as_path()]).unwrap_err();
    assert!(e.to_string().contains("cannot read"));
}

#[test]
fn unknown_keys_are_rejected() {
    let e = Scenario::from_toml("[simulation]\nseed = 1\nspeed = 3\n").unwrap_err();
    assert!(e.to_string().contains("speed"), "{e}");
}
