//! Fixtures shared by the benchmarks.

use rulenet_core::connection::{ConnectionRequest, HopKind, LinkInfo, Mode, Requirements};
use rulenet_core::link::{LinkSpec, NodeCapability, NodeType};
use rulenet_core::scenario::{ConnectionSpec, Scenario, Settings};
use rulenet_core::topology::{random_topology, RandomTopologyParams, Topology};
use rulenet_core::{ConnectionId, Fidelity, LinkId, NodeAddr, SimTime};

pub fn fid(v: f64) -> Fidelity {
    Fidelity::new(v).expect("fidelity in range")
}

/// Outbound-pass result for an `n`-node chain of identical links.
pub fn chain_request(n: usize, f: f64, t_mem_s: f64, target: f64) -> ConnectionRequest {
    let mut q = ConnectionRequest::new(
        ConnectionId(1),
        NodeAddr(0),
        NodeAddr(n as u32 - 1),
        Requirements {
            min_fidelity: fid(target),
            mode: Mode::Stream,
        },
    );
    q.path = (0..n as u32).map(NodeAddr).collect();
    q.accumulated = (0..n - 1)
        .map(|i| LinkInfo {
            a: NodeAddr(i as u32),
            b: NodeAddr(i as u32 + 1),
            kind: HopKind::Physical(LinkId(i as u32)),
            seconds_per_pair: 0.001,
            base_fidelity: fid(f),
            available_qubits: 4,
            latency: SimTime::from_micros(50),
            a_type: if i == 0 { NodeType::Comp } else { NodeType::Rtr },
            b_type: if i + 2 == n { NodeType::Comp } else { NodeType::Rtr },
            a_t_mem_s: t_mem_s,
            b_t_mem_s: t_mem_s,
        })
        .collect();
    q
}

pub fn chain_scenario(n: usize, secs: f64) -> Scenario {
    let mut t = Topology::new();
    let ids: Vec<NodeAddr> = (0..n)
        .map(|i| {
            let ty = if i == 0 || i + 1 == n { NodeType::Comp } else { NodeType::Rtr };
            t.add_node(
                &format!("n{i}"),
                NodeCapability {
                    t_mem_s: 1.0,
                    ..NodeCapability::new(ty)
                },
            )
        })
        .collect();
    for w in ids.windows(2) {
        let mut l = LinkSpec::new(w[0], w[1], 10.0, fid(0.98));
        l.attempt_rate_hz = 10_000.0;
        t.add_link(l);
    }
    let mut s = Scenario::new(
        t,
        Settings {
            seed: 1,
            duration: SimTime::from_secs(secs),
            ..Settings::default()
        },
    );
    s.connections.push(ConnectionSpec::new(1, ids[0], ids[n - 1], 0.9));
    s
}

pub fn random_network(nodes: usize) -> Topology {
    random_topology(
        &RandomTopologyParams {
            nodes,
            end_nodes: nodes / 2,
            t_mem_s: 1.0,
            ..RandomTopologyParams::default()
        },
        3,
    )
}

/// Random network with `connections` end-to-end requests.
pub fn random_scenario(nodes: usize, connections: usize, secs: f64) -> Scenario {
    let text = format!(
        "[simulation]\nseed = 1\nduration_s = {secs}\n\
         [random_topology]\nnodes = {nodes}\nend_nodes = {}\nseed = 3\nt_mem_s = 1.0\n\
         [random_connections]\ncount = {connections}\nmin_fidelity = 0.8\n",
        nodes / 2
    );
    Scenario::from_toml(&text).expect("generated scenario parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_consistent() {
        assert_eq!(chain_request(5, 0.97, 1.0, 0.9).hops(), 4);
        assert_eq!(chain_scenario(4, 0.1).topology.links.len(), 3);
        assert!(random_network(40).is_connected());
        assert_eq!(random_scenario(40, 5, 0.1).connections.len(), 5);
    }
}
