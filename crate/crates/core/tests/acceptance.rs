//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rulenet_core::connection::verifier::mutate;
use rulenet_core::connection::{verify_rulesets, FindingKind, VerifierOptions};
use rulenet_core::internet::{Internet, NetworkId};
use rulenet_core::link::{attempt_success_probability, LinkSpec, NodeCapability, NodeType};
use rulenet_core::quantum::oracle::{oracle_two_pair, TwoPairCircuit};
use rulenet_core::quantum::{purify_outcome, swap_fidelity};
use rulenet_core::routing::{physical_graph, qdijkstra, MuxDiscipline};
use rulenet_core::ruleset::validate_ruleset;
use rulenet_core::scenario::{ConnectionSpec, Scenario, Settings};
use rulenet_core::sim::{SimOptions, Simulation};
use rulenet_core::topology::{random_topology, RandomTopologyParams, Topology};
use rulenet_core::{ConnectionId, Fidelity, NodeAddr, SimTime};
use statrs::distribution::{ContinuousCDF, StudentsT};

type Outcome = Result<String, String>;

fn fid(v: f64) -> Fidelity {
    Fidelity::new(v).unwrap()
}

fn chain(types: &[NodeType], f: f64, km: f64, t_mem: f64) -> Topology {
    let mut t = Topology::new();
    let ids: Vec<NodeAddr> = types
        .iter()
        .enumerate()
        .map(|(i, ty)| {
            t.add_node(
                &format!("n{i}"),
                NodeCapability {
                    t_mem_s: t_mem,
                    ..NodeCapability::new(*ty)
                },
            )
        })
        .collect();
    for w in ids.windows(2) {
        let mut l = LinkSpec::new(w[0], w[1], km, fid(f));
        l.attempt_rate_hz = 10_000.0;
        t.add_link(l);
    }
    t
}

fn settings(seed: u64, secs: f64) -> Settings {
    Settings {
        seed,
        duration: SimTime::from_secs(secs),
        ..Settings::default()
    }
}

fn recording() -> SimOptions {
    SimOptions {
        record_deliveries: true,
        record_control: true,
        ..SimOptions::default()
    }
}

fn a1() -> Outcome {
    let grid: Vec<f64> = (0..=15).map(|i| 0.25 + 0.05 * i as f64).collect();
    let mut worst: f64 = 0.0;
    for &x in &grid {
        for &y in &grid {
            let (f1, f2) = (fid(x.min(1.0)), fid(y.min(1.0)));
            let s = oracle_two_pair(f1, f2, TwoPairCircuit::Swap);
            let sf = swap_fidelity(f1, f2).value();
            for b in &s.branches {
                worst = worst.max((b.fidelity - sf).abs());
            }
            let p = oracle_two_pair(f1, f2, TwoPairCircuit::Purify);
            let po = purify_outcome(f1, f2);
            worst = worst.max((p.even_probability() - po.p_success).abs());
            worst = worst.max((p.even_fidelity() - po.fidelity.value()).abs());
        }
    }
    let msg = format!("{} grid points, max deviation {worst:.2e}", grid.len() * grid.len());
    if worst <= 1e-9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn link_frequency(arch: &str, km: f64, attenuation: f64, efficiency: f64) -> Result<(f64, f64, u64), String> {
    let mid = if arch == "direct" {
        String::new()
    } else {
        format!("midpoint = \"m\"\narchitecture = \"{arch}\"\n")
    };
    let mid_node = match arch {
        "bsa" => "[[node]]\nname = \"m\"\ntype = \"BSA\"\n",
        "epps" => "[[node]]\nname = \"m\"\ntype = \"EPPS\"\n",
        _ => "",
    };
    let text = format!(
        r#"
[simulation]
seed = 11
duration_s = 0.12

[[node]]
name = "a"
type = "COMP"

[[node]]
name = "b"
type = "COMP"

{mid_node}
[[link]]
a = "a"
b = "b"
{mid}length_km = {km}
attenuation_db_per_km = {attenuation}
detector_efficiency = {efficiency}
attempt_rate_hz = 1000000
base_fidelity = 0.95

[[connection]]
id = 1
initiator = "a"
responder = "b"
min_fidelity = 0.9
"#
    );
    let s = Scenario::from_toml(&text).map_err(|e| e.to_string())?;
    let p = attempt_success_probability(&s.topology.links[0]);
    let mut sim = Simulation::new(s);
    let m = sim.run();
    let l = m.links().next().unwrap();
    let heralded = l.successes + l.stalls;
    Ok((p, heralded as f64 / l.attempts as f64, l.attempts))
}

fn a2() -> Outcome {
    let cases = [
        ("direct", 10.0, 0.2, 0.9),
        ("bsa", 1.0, 0.0, 1.0),
        ("bsa", 20.0, 0.2, 0.8),
        ("epps", 5.0, 0.2, 0.95),
    ];
    let mut parts = vec![];
    let mut ok = true;
    for (arch, km, att, eta) in cases {
        let (p, freq, n) = link_frequency(arch, km, att, eta)?;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let z = (freq - p) / sigma;
        ok &= n >= 100_000 && z.abs() <= 3.0;
        parts.push(format!("{arch} p={p:.4} freq={freq:.4} n={n} z={z:+.2}"));
    }
    let msg = parts.join("; ");
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn a3() -> Outcome {
    let t = chain(&[NodeType::Meas, NodeType::Rtr, NodeType::Meas], 0.9, 2.0, f64::INFINITY);
    let mut s = Scenario::new(t, settings(3, 4.0));
    s.connections.push(ConnectionSpec::new(1, NodeAddr(0), NodeAddr(2), 0.8));
    let mut sim = Simulation::with_options(s, recording());
    sim.run();
    let d = sim.deliveries();
    let n = d.len() as f64;
    let mean = d.iter().map(|p| p.fidelity).sum::<f64>() / n;
    let w = (4.0 * 0.9 - 1.0) / 3.0;
    let expect = (1.0 + 3.0 * w * w) / 4.0;
    let measured: Vec<bool> = d.iter().filter_map(|p| p.mismatch).collect();
    let q_obs = measured.iter().filter(|m| **m).count() as f64 / measured.len().max(1) as f64;
    let q = 2.0 * (1.0 - expect) / 3.0;
    let sigma = (q * (1.0 - q) / measured.len().max(1) as f64).sqrt();
    let msg = format!(
        "pairs {}, mean F {mean:.4} (expect {expect:.4}), qber {q_obs:.4} vs {q:.4} ({} samples, {:+.2} sigma)",
        d.len(),
        measured.len(),
        (q_obs - q) / sigma
    );
    if d.len() >= 2000 && (mean - 0.8133).abs() <= 0.01 && measured.len() >= 2000 && (q_obs - q).abs() <= 3.0 * sigma {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn a4() -> Outcome {
    let mut rows = vec![];
    let mut bad = vec![];
    for hops in 2..=5 {
        for target in [0.85, 0.9, 0.95] {
            let mut types = vec![NodeType::Comp];
            types.extend(std::iter::repeat_n(NodeType::Rtr, hops - 1));
            types.push(NodeType::Comp);
            let t = chain(&types, 0.985, 2.0, 5.0);
            let last = NodeAddr(hops as u32);
            let mut s = Scenario::new(t, settings(40 + hops as u64, 2.0));
            s.connections.push(ConnectionSpec::new(1, NodeAddr(0), last, target));
            let mut sim = Simulation::with_options(s, recording());
            sim.run();
            let c = ConnectionId(1);
            let rs = sim.installed(c);
            let tag = format!("{hops}h@{target}");
            if rs.len() != hops + 1 {
                bad.push(format!("{tag}: {} rulesets, failure {:?}", rs.len(), sim.failure(c)));
                continue;
            }
            let invalid: usize = rs.iter().map(|r| validate_ruleset(r).len()).sum();
            let report = verify_rulesets(&rs, sim.setup_hops(c), &VerifierOptions::default());
            let d = sim.deliveries();
            let worst = d.iter().map(|p| p.fidelity).fold(f64::INFINITY, f64::min);
            if invalid > 0 || !report.findings.is_empty() || d.is_empty() || worst < target - 0.005 {
                bad.push(format!(
                    "{tag}: violations {invalid}, findings {:?}, delivered {}, worst {worst:.4}",
                    report.findings.iter().map(|f| f.kind).collect::<Vec<_>>(),
                    d.len()
                ));
            }
            rows.push(format!("{tag}:{}/{worst:.3}", d.len()));
        }
    }
    if bad.is_empty() {
        Ok(rows.join(" "))
    } else {
        Err(bad.join("; "))
    }
}

fn a5() -> Outcome {
    let t = chain(&[NodeType::Comp, NodeType::Rtr, NodeType::Rtr, NodeType::Comp], 0.98, 2.0, 0.5);
    let mut s = Scenario::new(t, settings(5, 0.05));
    s.connections.push(ConnectionSpec::new(1, NodeAddr(0), NodeAddr(3), 0.85));
    let mut sim = Simulation::new(s);
    sim.run();
    let c = ConnectionId(1);
    let rs = sim.installed(c);
    let hops = sim.setup_hops(c).to_vec();
    let path = sim.route(c).ok_or("no route")?.to_vec();
    let opts = VerifierOptions::default();
    let clean = verify_rulesets(&rs, &hops, &opts);
    let mut short = rs.clone();
    mutate::set_discard_timer(&mut short[0], SimTime::from_micros(1));
    let race = verify_rulesets(&short, &hops, &opts);
    let mut greedy = rs.clone();
    mutate::greedy_swaps(&mut greedy, &path);
    let leap = verify_rulesets(&greedy, &hops, &opts);
    let kinds = |r: &rulenet_core::connection::VerifierReport| r.findings.iter().map(|f| f.kind).collect::<BTreeSet<_>>();
    let msg = format!(
        "unmutated {:?}, short timer {:?}, greedy swaps {:?}",
        kinds(&clean),
        kinds(&race),
        kinds(&leap)
    );
    let race_hit = race.findings.iter().any(|f| f.kind == FindingKind::DiscardRace);
    let leap_hit = leap.findings.iter().any(|f| f.kind == FindingKind::Leapfrog);
    if rs.len() == 4 && clean.findings.is_empty() && race_hit && leap_hit {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn dumbbell(discipline: MuxDiscipline, seed: u64) -> u64 {
    let mut t = Topology::new();
    let cap = |ty| NodeCapability::new(ty);
    let names = ["l1", "l2", "r1", "r2", "s1", "s2"];
    let ty = [NodeType::Comp, NodeType::Comp, NodeType::Rtr, NodeType::Rtr, NodeType::Comp, NodeType::Comp];
    let n: Vec<NodeAddr> = names.iter().zip(ty).map(|(nm, ty)| t.add_node(nm, cap(ty))).collect();
    let mut link = |a: NodeAddr, b: NodeAddr, km: f64| {
        let mut l = LinkSpec::new(a, b, km, fid(0.98));
        l.attempt_rate_hz = 10_000.0;
        t.add_link(l);
    };
    link(n[0], n[2], 25.0);
    link(n[1], n[2], 25.0);
    link(n[2], n[3], 2.0);
    link(n[3], n[4], 25.0);
    link(n[3], n[5], 25.0);
    let mut s = Scenario::new(
        t,
        Settings {
            discipline,
            ..settings(seed, 1.0)
        },
    );
    s.connections.push(ConnectionSpec::new(1, n[0], n[4], 0.85));
    s.connections.push(ConnectionSpec::new(2, n[1], n[5], 0.85));
    let mut sim = Simulation::new(s);
    sim.run().connections().map(|c| c.delivered).sum()
}

fn a6() -> Outcome {
    let seeds = 20;
    let diffs: Vec<f64> = (0..seeds)
        .map(|s| dumbbell(MuxDiscipline::StatMux, 600 + s) as f64 - dumbbell(MuxDiscipline::Circuit, 600 + s) as f64)
        .collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = StudentsT::new(0.0, 1.0, n - 1.0).unwrap().inverse_cdf(0.95);
    let lower = mean - t * (var / n).sqrt();
    let msg = format!("{seeds} seeds, mean statmux-circuit {mean:.1} pairs, one-sided 95% lower bound {lower:.1}");
    if lower >= 0.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

const TWO_NETWORKS: &str = r#"
[simulation]
seed = 21
duration_s = 1.0

[[network]]
name = "west"
advertised_fidelity = 0.9

[[network]]
name = "east"
advertised_fidelity = 0.9

[[node]]
name = "e1"
type = "COMP"

[[node]]
name = "b1"
type = "RTR"
network = "west"
borders = ["root"]

[[node]]
name = "x1"
type = "RTR"
network = "west"

[[node]]
name = "b2"
type = "RTR"
network = "west"
borders = ["root"]

[[node]]
name = "b3"
type = "RTR"
network = "east"
borders = ["root"]

[[node]]
name = "x2"
type = "RTR"
network = "east"

[[node]]
name = "b4"
type = "RTR"
network = "east"
borders = ["root"]

[[node]]
name = "e2"
type = "COMP"

[[link]]
a = "e1"
b = "b1"
length_km = 5
base_fidelity = 0.98

[[link]]
a = "b1"
b = "x1"
length_km = 5
base_fidelity = 0.98

[[link]]
a = "x1"
b = "b2"
length_km = 5
base_fidelity = 0.98

[[link]]
a = "b2"
b = "b3"
length_km = 5
base_fidelity = 0.98

[[link]]
a = "b3"
b = "x2"
length_km = 5
base_fidelity = 0.98

[[link]]
a = "x2"
b = "b4"
length_km = 5
base_fidelity = 0.98

[[link]]
a = "b4"
b = "e2"
length_km = 5
base_fidelity = 0.98

[[connection]]
id = 1
initiator = "e1"
responder = "e2"
min_fidelity = 0.7
"#;

const THREE_DEEP: &str = r#"
[simulation]
seed = 22
duration_s = 1.0

[[network]]
name = "outer"
advertised_fidelity = 0.9

[[network]]
name = "inner"
parent = "outer"
advertised_fidelity = 0.93

[[node]]
name = "e1"
type = "COMP"

[[node]]
name = "a1"
type = "RTR"
network = "outer"
borders = ["root"]

[[node]]
name = "i1"
type = "RTR"
network = "inner"
borders = ["outer"]

[[node]]
name = "ix"
type = "RTR"
network = "inner"

[[node]]
name = "i2"
type = "RTR"
network = "inner"
borders = ["outer"]

[[node]]
name = "a2"
type = "RTR"
network = "outer"
borders = ["root"]

[[node]]
name = "e2"
type = "COMP"

[[link]]
a = "e1"
b = "a1"
length_km = 5
base_fidelity = 0.99

[[link]]
a = "a1"
b = "i1"
length_km = 5
base_fidelity = 0.99

[[link]]
a = "i1"
b = "ix"
length_km = 5
base_fidelity = 0.99

[[link]]
a = "ix"
b = "i2"
length_km = 5
base_fidelity = 0.99

[[link]]
a = "i2"
b = "a2"
length_km = 5
base_fidelity = 0.99

[[link]]
a = "a2"
b = "e2"
length_km = 5
base_fidelity = 0.99

[[connection]]
id = 1
initiator = "e1"
responder = "e2"
min_fidelity = 0.75
"#;

/// Nodes a message in network `n` may name: its own members and borders.
fn visible(net: &Internet, n: NetworkId) -> BTreeSet<NodeAddr> {
    (0..net.home.len())
        .filter(|&i| net.home[i] == n || net.borders[i].contains(&n))
        .map(|i| NodeAddr(i as u32))
        .collect()
}

fn nested(text: &str, depth: usize) -> Result<String, String> {
    let s = Scenario::from_toml(text).map_err(|e| e.to_string())?;
    let net = s.internet.clone();
    let min_f = s.connections[0].requirements.min_fidelity.value();
    let mut sim = Simulation::with_options(s, recording());
    sim.run();
    let root = ConnectionId(1);
    let mut family = vec![root];
    let mut i = 0;
    while i < family.len() {
        family.extend(sim.children(family[i]));
        i += 1;
    }
    let layers: BTreeSet<u32> = family.iter().filter_map(|c| sim.layer(*c)).collect();
    let mut leaks = 0;
    let mut kinds = BTreeSet::new();
    for r in sim.control_log() {
        let ok = visible(&net, r.network);
        leaks += r.addresses.iter().filter(|a| !ok.contains(a)).count();
        kinds.insert((r.layer, r.kind));
    }
    let d: Vec<_> = sim.deliveries().iter().filter(|p| p.connection == root).collect();
    let worst = d.iter().map(|p| p.fidelity).fold(f64::INFINITY, f64::min);
    let installs_per_layer = (0..=depth as u32).all(|l| kinds.contains(&(l, "INSTALL")) && kinds.contains(&(l, "REQ")));
    let msg = format!(
        "{} connections over layers {layers:?}, {} delivered, worst F {worst:.4} (min {min_f}), {leaks} foreign addresses, {} privacy faults",
        family.len(),
        d.len(),
        sim.privacy_violations()
    );
    if layers.len() == depth + 1
        && installs_per_layer
        && !d.is_empty()
        && worst >= min_f - 1e-9
        && leaks == 0
        && sim.privacy_violations() == 0
        && sim.fault_count() == 0
    {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn a7() -> Outcome {
    let two = nested(TWO_NETWORKS, 1);
    let three = nested(THREE_DEEP, 2);
    match (two, three) {
        (Ok(a), Ok(b)) => Ok(format!("two networks: {a}; three deep: {b}")),
        (a, b) => Err(format!("two networks: {a:?}; three deep: {b:?}")),
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn a8() -> Outcome {
    let params = RandomTopologyParams {
        nodes: 40,
        end_nodes: 16,
        length_km: (2.0, 80.0),
        ..RandomTopologyParams::default()
    };
    let topo = random_topology(&params, 8);
    let index = fid(0.8);
    let g = physical_graph(&topo.links, index);
    let ends: Vec<NodeAddr> = topo
        .nodes
        .iter()
        .filter(|n| n.capability.node_type == NodeType::Comp)
        .map(|n| n.addr)
        .collect();
    let mut picks = vec![];
    'outer: for (i, a) in ends.iter().enumerate() {
        for b in &ends[i + 1..] {
            let Some(r) = qdijkstra(&g, *a, *b) else { continue };
            if (3..=6).contains(&r.hops.len()) {
                picks.push((*a, *b, r.cost));
                if picks.len() == 12 {
                    break 'outer;
                }
            }
        }
    }
    let mut costs = vec![];
    let mut inverse = vec![];
    for (k, (a, b, cost)) in picks.iter().enumerate() {
        let secs = (cost * 5000.0).clamp(1.0, 30.0);
        let mut s = Scenario::new(topo.clone(), settings(80 + k as u64, secs));
        s.connections.push(ConnectionSpec::new(1, *a, *b, index.value()));
        let mut sim = Simulation::new(s);
        let m = sim.run();
        let c = m.connection(1).unwrap();
        if c.delivered == 0 {
            return Err(format!("{a}->{b} delivered nothing: {:?}", c.failure));
        }
        costs.push(*cost);
        inverse.push(1.0 / c.pairs_per_s);
    }
    let rho = spearman(&costs, &inverse);
    let msg = format!("{} paths, spearman {rho:.3}", costs.len());
    if costs.len() >= 10 && rho >= 0.9 {
        Ok(msg)
    } else {
        Err(format!("{msg}; cost {costs:.4?} inverse throughput {inverse:.4?}"))
    }
}

fn traced(text: &str) -> Result<(String, Vec<u8>), String> {
    let s = Scenario::from_toml(text).map_err(|e| e.to_string())?;
    let mut sim = Simulation::with_options(
        s,
        SimOptions {
            trace: Some(rulenet_core::metrics::TraceSink::Memory(vec![])),
            ..SimOptions::default()
        },
    );
    let m = sim.run().to_jsonl();
    Ok((m, sim.trace().unwrap_or_default().to_vec()))
}

fn a9() -> Outcome {
    let random = r#"
[simulation]
seed = 9
duration_s = 0.5
[random_topology]
nodes = 30
end_nodes = 12
seed = 4
t_mem_s = 0.5
[random_connections]
count = 8
min_fidelity = 0.85
"#;
    let mut parts = vec![];
    for (name, text) in [("nested", TWO_NETWORKS), ("random", random)] {
        let (m1, t1) = traced(text)?;
        let (m2, t2) = traced(text)?;
        let reseeded = text.replacen("seed = ", "seed = 1", 1);
        let (m3, _) = traced(&reseeded)?;
        if m1 != m2 || t1 != t2 || t1.is_empty() {
            return Err(format!("{name}: outputs differ between identical runs"));
        }
        if m1 == m3 {
            return Err(format!("{name}: a different seed gave identical metrics"));
        }
        parts.push(format!("{name}: {} metric bytes, {} trace bytes identical", m1.len(), t1.len()));
    }
    Ok(parts.join("; "))
}

fn a10() -> Outcome {
    let text = r#"
[simulation]
seed = 10
duration_s = 10.0
[random_topology]
nodes = 200
end_nodes = 100
seed = 3
t_mem_s = 1.0
[random_connections]
count = 100
min_fidelity = 0.8
"#;
    let s = Scenario::from_toml(text).map_err(|e| e.to_string())?;
    let started = Instant::now();
    let mut sim = Simulation::new(s);
    let m = sim.run();
    let wall = started.elapsed();
    let g = m.global().unwrap();
    let established = m.connections().filter(|c| c.status == "established").count();
    let delivered: u64 = m.connections().map(|c| c.delivered).sum();
    let msg = format!(
        "{} events, {established}/100 established, {delivered} pairs, {} faults, wall {:.1}s",
        g.events,
        g.faults,
        wall.as_secs_f64()
    );
    if wall < Duration::from_secs(300) && g.end_time_s >= 10.0 && g.accounting_balanced && g.faults == 0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn main() {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome, u64); 10] = [
        ("A1", a1, 10),
        ("A2", a2, 30),
        ("A3", a3, 60),
        ("A4", a4, 300),
        ("A5", a5, 60),
        ("A6", a6, 300),
        ("A7", a7, 120),
        ("A8", a8, 600),
        ("A9", a9, 60),
        ("A10", a10, 300),
    ];
    let mut failed = 0;
    for (name, f, budget) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == name) {
            continue;
        }
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        let r = match r {
            Ok(m) if secs > budget as f64 => Err(format!("{m}; over the {budget}s budget")),
            other => other,
        };
        match r {
            Ok(m) => println!("{name} PASS ({secs:.1}s) {m}"),
            Err(m) => {
                failed += 1;
                println!("{name} FAIL ({secs:.1}s) {m}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
