//! Static network description: nodes, quantum links, classical channels.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kernel::{ClassicalChannel, SimTime};
use crate::link::{LinkArchitecture, LinkSpec, NodeCapability, NodeType};
use crate::{Fidelity, LinkId, NodeAddr};

/// Fiber propagation speed.
pub const DEFAULT_VELOCITY_MPS: f64 = 2e8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub addr: NodeAddr,
    pub capability: NodeCapability,
    /// Classical-control delay added before a node reacts to a message.
    pub processing_delay: SimTime,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Topology {
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkSpec>,
    #[serde(skip)]
    by_name: BTreeMap<String, NodeAddr>,
    #[serde(skip)]
    adjacency: Vec<Vec<LinkId>>,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, name: &str, capability: NodeCapability) -> NodeAddr {
        let addr = NodeAddr(self.nodes.len() as u32);
        self.nodes.push(NodeSpec {
            name: name.to_string(),
            addr,
            capability,
            processing_delay: SimTime::ZERO,
        });
        self.by_name.insert(name.to_string(), addr);
        self.adjacency.push(vec![]);
        addr
    }

    pub fn add_link(&mut self, spec: LinkSpec) -> LinkId {
        let id = LinkId(self.links.len() as u32);
        self.adjacency[spec.a.index()].push(id);
        self.adjacency[spec.b.index()].push(id);
        self.links.push(spec);
        id
    }

    pub fn node(&self, a: NodeAddr) -> &NodeSpec {
        &self.nodes[a.index()]
    }

    pub fn link(&self, l: LinkId) -> &LinkSpec {
        &self.links[l.index()]
    }

    pub fn lookup(&self, name: &str) -> Option<NodeAddr> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, a: NodeAddr) -> &str {
        &self.nodes[a.index()].name
    }

    pub fn links_at(&self, n: NodeAddr) -> &[LinkId] {
        &self.adjacency[n.index()]
    }

    pub fn link_between(&self, a: NodeAddr, b: NodeAddr) -> Option<LinkId> {
        self.adjacency[a.index()]
            .iter()
            .copied()
            .filter(|l| self.links[l.index()].other_end(a) == b)
            .min_by(|x, y| {
                let (lx, ly) = (&self.links[x.index()], &self.links[y.index()]);
                lx.raw_seconds_per_pair()
                    .total_cmp(&ly.raw_seconds_per_pair())
                    .then(x.cmp(y))
            })
    }

    /// Classical channels mirroring the quantum links. Midpoint links get a
    /// channel from each end to the midpoint station, half the length each.
    pub fn default_classical_channels(&self, velocity_mps: f64) -> Vec<ClassicalChannel> {
        let mut out = vec![];
        for l in &self.links {
            let d = l.length_km * 1000.0;
            match l.architecture.midpoint() {
                None => out.push(ClassicalChannel {
                    a: l.a,
                    b: l.b,
                    distance_m: d,
                    velocity_mps,
                }),
                Some(m) => {
                    for end in [l.a, l.b] {
                        out.push(ClassicalChannel {
                            a: end,
                            b: m,
                            distance_m: d / 2.0,
                            velocity_mps,
                        });
                    }
                }
            }
        }
        out
    }

    /// Rebuild lookup tables after deserialization or manual edits.
    pub fn reindex(&mut self) {
        self.by_name = self.nodes.iter().map(|n| (n.name.clone(), n.addr)).collect();
        self.adjacency = vec![vec![]; self.nodes.len()];
        for (i, l) in self.links.iter().enumerate() {
            self.adjacency[l.a.index()].push(LinkId(i as u32));
            self.adjacency[l.b.index()].push(LinkId(i as u32));
        }
    }

    pub fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for l in &self.adjacency[u] {
                let v = self.links[l.index()].other_end(NodeAddr(u as u32)).index();
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.iter().all(|s| *s)
    }
}

/// Knobs for [`random_topology`].
#[derive(Debug, Clone)]
pub struct RandomTopologyParams {
    pub nodes: usize,
    /// Number of nodes that are end nodes (COMP); the rest are routers.
    pub end_nodes: usize,
    pub extra_links_per_node: f64,
    pub length_km: (f64, f64),
    pub base_fidelity: (f64, f64),
    pub attempt_rate_hz: f64,
    pub qubit_capacity: u32,
    /// Memory coherence time of every node.
    pub t_mem_s: f64,
}

impl Default for RandomTopologyParams {
    fn default() -> Self {
        RandomTopologyParams {
            nodes: 200,
            end_nodes: 100,
            extra_links_per_node: 0.5,
            length_km: (5.0, 30.0),
            base_fidelity: (0.95, 0.99),
            attempt_rate_hz: 10_000.0,
            qubit_capacity: 4,
            t_mem_s: f64::INFINITY,
        }
    }
}

/// Connected random graph: a random spanning tree plus extra chords between
/// routers. End nodes are leaves hanging off routers.
pub fn random_topology(p: &RandomTopologyParams, seed: u64) -> Topology {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Topology::new();
    let routers = p.nodes - p.end_nodes;
    assert!(routers >= 1, "need at least one router");
    let cap = |ty| NodeCapability {
        t_mem_s: p.t_mem_s,
        ..NodeCapability::new(ty)
    };
    for i in 0..routers {
        t.add_node(&format!("r{i}"), cap(NodeType::Rtr));
    }
    for i in 0..p.end_nodes {
        t.add_node(&format!("e{i}"), cap(NodeType::Comp));
    }
    let mk = |rng: &mut ChaCha8Rng, a: usize, b: usize| {
        let len = rng.random_range(p.length_km.0..=p.length_km.1);
        let f = rng.random_range(p.base_fidelity.0..=p.base_fidelity.1);
        let mut l = LinkSpec::new(
            NodeAddr(a as u32),
            NodeAddr(b as u32),
            len,
            Fidelity::new(f).unwrap(),
        );
        l.attempt_rate_hz = p.attempt_rate_hz;
        l.qubit_capacity = p.qubit_capacity;
        l.architecture = LinkArchitecture::Direct;
        l
    };
    let mut present = std::collections::BTreeSet::new();
    for i in 1..routers {
        let j = rng.random_range(0..i);
        present.insert((j, i));
        let l = mk(&mut rng, j, i);
        t.add_link(l);
    }
    let extra = (p.extra_links_per_node * routers as f64) as usize;
    let mut tries = 0;
    let mut added = 0;
    while added < extra && tries < extra * 20 && routers > 2 {
        tries += 1;
        let a = rng.random_range(0..routers);
        let b = rng.random_range(0..routers);
        let key = (a.min(b), a.max(b));
        if a == b || present.contains(&key) {
            continue;
        }
        present.insert(key);
        let l = mk(&mut rng, key.0, key.1);
        t.add_link(l);
        added += 1;
    }
    for i in 0..p.end_nodes {
        let r = rng.random_range(0..routers);
        let l = mk(&mut rng, r, routers + i);
        t.add_link(l);
    }
    t
}
