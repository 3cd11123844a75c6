//! Recursive layering: networks nested inside networks, each routed on its
//! own. A child network appears to its parent as virtual links between its
//! border routers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::connection::generator::allocate_targets;
use crate::connection::{HopKind, LinkInfo};
use crate::kernel::{ClassicalFabric, SimTime};
use crate::link::NodeType;
use crate::routing::{link_cost, pumping_plan, qdijkstra_excluding, EdgeRef, Graph, Route};
use crate::topology::Topology;
use crate::{Fidelity, LinkId, NodeAddr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NetworkId(pub u32);

impl NetworkId {
    pub const ROOT: NetworkId = NetworkId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NetworkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "net{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub id: NetworkId,
    pub name: String,
    pub parent: Option<NetworkId>,
    /// Fidelity the network promises for pairs between its borders.
    pub advertised_fidelity: Fidelity,
}

/// A node's name as seen from the outermost layer down to its home network.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct LayeredAddress {
    /// Networks from the root down to the node's home network.
    pub networks: Vec<NetworkId>,
    pub node: NodeAddr,
    pub layer: u32,
}

impl LayeredAddress {
    /// Whether `other` sits inside the network this address names at `depth`.
    pub fn contains(&self, depth: usize, other: &LayeredAddress) -> bool {
        depth < self.networks.len() && other.networks.get(depth) == Some(&self.networks[depth])
    }
}

impl fmt::Display for LayeredAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for n in &self.networks {
            write!(f, "{n}/")?;
        }
        write!(f, "{}", self.node)
    }
}

/// Network tree plus node membership.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Internet {
    pub networks: Vec<NetworkSpec>,
    /// Deepest network each node belongs to.
    pub home: Vec<NetworkId>,
    /// Outer networks a border router also belongs to.
    pub borders: Vec<BTreeSet<NetworkId>>,
}

impl Internet {
    /// Single network holding every node.
    pub fn flat(nodes: usize) -> Self {
        Internet {
            networks: vec![NetworkSpec {
                id: NetworkId::ROOT,
                name: "root".into(),
                parent: None,
                advertised_fidelity: Fidelity::ONE,
            }],
            home: vec![NetworkId::ROOT; nodes],
            borders: vec![BTreeSet::new(); nodes],
        }
    }

    /// Check the tree shape and that borders only name ancestors.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = vec![];
        for (i, n) in self.networks.iter().enumerate() {
            if n.id.index() != i {
                errs.push(format!("network {} stored at index {i}", n.name));
            }
            match n.parent {
                None if i != 0 => errs.push(format!("network {} has no parent", n.name)),
                Some(p) if p.index() >= i => {
                    errs.push(format!("network {} must be declared after its parent", n.name))
                }
                _ => {}
            }
        }
        if !errs.is_empty() {
            return errs;
        }
        for (u, h) in self.home.iter().enumerate() {
            if h.index() >= self.networks.len() {
                errs.push(format!("node n{u} lives in unknown network {h}"));
                continue;
            }
            let up = self.ancestors(*h);
            for b in &self.borders[u] {
                if !up.contains(b) {
                    errs.push(format!(
                        "node n{u} borders {} which does not enclose its home {}",
                        self.networks.get(b.index()).map_or("?", |n| n.name.as_str()),
                        self.networks[h.index()].name
                    ));
                }
            }
        }
        errs
    }

    pub fn network(&self, id: NetworkId) -> &NetworkSpec {
        &self.networks[id.index()]
    }

    pub fn lookup(&self, name: &str) -> Option<NetworkId> {
        self.networks.iter().find(|n| n.name == name).map(|n| n.id)
    }

    /// Strict ancestors, nearest first.
    pub fn ancestors(&self, mut n: NetworkId) -> Vec<NetworkId> {
        let mut out = vec![];
        while let Some(p) = self.networks[n.index()].parent {
            out.push(p);
            n = p;
        }
        out
    }

    pub fn depth(&self, n: NetworkId) -> usize {
        self.ancestors(n).len()
    }

    pub fn max_depth(&self) -> usize {
        self.networks.iter().map(|n| self.depth(n.id)).max().unwrap_or(0)
    }

    /// Layer number: innermost networks are layer 0.
    pub fn layer(&self, n: NetworkId) -> u32 {
        (self.max_depth() - self.depth(n)) as u32
    }

    pub fn children(&self, n: NetworkId) -> Vec<NetworkId> {
        self.networks
            .iter()
            .filter(|c| c.parent == Some(n))
            .map(|c| c.id)
            .collect()
    }

    pub fn contains(&self, n: NetworkId, u: NodeAddr) -> bool {
        self.home[u.index()] == n || self.borders[u.index()].contains(&n)
    }

    pub fn members(&self, n: NetworkId) -> Vec<NodeAddr> {
        (0..self.home.len())
            .map(|i| NodeAddr(i as u32))
            .filter(|u| self.contains(n, *u))
            .collect()
    }

    /// Members of `child` that also belong to its parent.
    pub fn borders_of(&self, child: NetworkId) -> Vec<NodeAddr> {
        let Some(p) = self.network(child).parent else { return vec![] };
        self.members(child)
            .into_iter()
            .filter(|u| self.contains(p, *u))
            .collect()
    }

    /// Deepest network both nodes belong to.
    pub fn common_network(&self, a: NodeAddr, b: NodeAddr) -> Option<NetworkId> {
        let of = |u: NodeAddr| {
            let mut s: BTreeSet<NetworkId> = self.borders[u.index()].clone();
            s.insert(self.home[u.index()]);
            s
        };
        let (sa, sb) = (of(a), of(b));
        sa.intersection(&sb).copied().max_by_key(|n| (self.depth(*n), std::cmp::Reverse(*n)))
    }

    /// Network that routes over a physical link.
    pub fn link_owner(&self, topo: &Topology, link: LinkId) -> Option<NetworkId> {
        let l = topo.link(link);
        self.common_network(l.a, l.b)
    }

    pub fn address(&self, u: NodeAddr) -> LayeredAddress {
        let home = self.home[u.index()];
        let mut networks = self.ancestors(home);
        networks.reverse();
        networks.push(home);
        LayeredAddress {
            networks,
            node: u,
            layer: self.layer(home),
        }
    }
}

/// A child network crossed as one hop.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualLink {
    pub network: NetworkId,
    pub a: NodeAddr,
    pub b: NodeAddr,
    /// Seconds per pair along the internal path with its pumping.
    pub cost: f64,
    pub fidelity: Fidelity,
    pub route: Vec<NodeAddr>,
}

/// Per-layer routing with cached graphs and virtual-link advertisements.
pub struct Layers {
    pub topo: Arc<Topology>,
    pub net: Arc<Internet>,
    fabric: ClassicalFabric,
    graphs: BTreeMap<(NetworkId, u64), Rc<Graph>>,
    virtuals: BTreeMap<(NetworkId, NodeAddr, NodeAddr), Option<VirtualLink>>,
    owners: Vec<Option<NetworkId>>,
}

impl Layers {
    pub fn new(topo: Arc<Topology>, net: Arc<Internet>, fabric: ClassicalFabric) -> Self {
        let owners = (0..topo.links.len())
            .map(|i| net.link_owner(&topo, LinkId(i as u32)))
            .collect();
        Layers {
            topo,
            net,
            fabric,
            graphs: BTreeMap::new(),
            virtuals: BTreeMap::new(),
            owners,
        }
    }

    pub fn latency(&mut self, a: NodeAddr, b: NodeAddr) -> SimTime {
        self.fabric.latency(a, b).unwrap_or(SimTime::MAX)
    }

    pub fn fabric(&mut self) -> &mut ClassicalFabric {
        &mut self.fabric
    }

    /// Routing graph of network `n` at index fidelity `f`.
    pub fn graph(&mut self, n: NetworkId, f: Fidelity) -> Rc<Graph> {
        if let Some(g) = self.graphs.get(&(n, f.value().to_bits())) {
            return g.clone();
        }
        let mut g = Graph::new();
        for u in self.net.members(n) {
            if self.topo.node(u).capability.node_type.runs_rulesets() {
                g.add_node(u);
            }
        }
        for (i, l) in self.topo.links.iter().enumerate() {
            if self.owners[i] == Some(n) && g.contains(l.a) && g.contains(l.b) {
                g.add_edge(l.a, l.b, link_cost(l, f).0, EdgeRef::Physical(LinkId(i as u32)));
            }
        }
        for c in self.net.children(n) {
            let bs = self.net.borders_of(c);
            for (i, x) in bs.iter().enumerate() {
                for y in &bs[i + 1..] {
                    if !g.contains(*x) || !g.contains(*y) {
                        continue;
                    }
                    if let Some(v) = self.virtual_link(c, *x, *y) {
                        if v.fidelity >= f {
                            g.add_edge(*x, *y, v.cost, EdgeRef::Virtual { network: c.0 });
                        }
                    }
                }
            }
        }
        let g = Rc::new(g);
        self.graphs.insert((n, f.value().to_bits()), g.clone());
        g
    }

    /// Cheapest path inside network `n`. Measuring and storage-less nodes
    /// are never used as transit.
    pub fn route(&mut self, n: NetworkId, src: NodeAddr, dst: NodeAddr, f: Fidelity) -> Option<Route> {
        let g = self.graph(n, f);
        let excluded: BTreeSet<NodeAddr> = g
            .nodes()
            .filter(|u| *u != src && *u != dst)
            .filter(|u| {
                let t = self.topo.node(*u).capability.node_type;
                t == NodeType::Meas || !t.runs_rulesets()
            })
            .collect();
        qdijkstra_excluding(&g, src, dst, &excluded)
    }

    /// What the outbound pass records for one hop.
    pub fn hop_info(&mut self, a: NodeAddr, b: NodeAddr, edge: EdgeRef) -> LinkInfo {
        let (na, nb) = (self.topo.node(a).capability.clone(), self.topo.node(b).capability.clone());
        let latency = self.latency(a, b);
        let (kind, seconds_per_pair, base_fidelity, available_qubits) = match edge {
            EdgeRef::Physical(l) => {
                let s = self.topo.link(l);
                (HopKind::Physical(l), s.raw_seconds_per_pair(), s.base_fidelity, s.qubit_capacity)
            }
            EdgeRef::Virtual { network } => {
                let c = NetworkId(network);
                match self.virtual_link(c, a, b) {
                    Some(v) => (HopKind::Virtual { network }, v.cost, v.fidelity, 1),
                    None => (HopKind::Virtual { network }, f64::INFINITY, Fidelity::FLOOR, 0),
                }
            }
        };
        LinkInfo {
            a,
            b,
            kind,
            seconds_per_pair,
            base_fidelity,
            available_qubits,
            latency,
            a_type: na.node_type,
            b_type: nb.node_type,
            a_t_mem_s: na.t_mem_s,
            b_t_mem_s: nb.t_mem_s,
        }
    }

    /// Advertisement for crossing child network `c` between two borders:
    /// the internal path's cost with each hop pumped to its share of the
    /// advertised fidelity.
    pub fn virtual_link(&mut self, c: NetworkId, a: NodeAddr, b: NodeAddr) -> Option<VirtualLink> {
        let key = (c, a.min(b), a.max(b));
        if let Some(v) = self.virtuals.get(&key) {
            return v.clone().map(|mut v| {
                if v.a != a {
                    v.route.reverse();
                    std::mem::swap(&mut v.a, &mut v.b);
                }
                v
            });
        }
        // Break cycles while the entry is being computed.
        self.virtuals.insert(key, None);
        let adv = self.net.network(c).advertised_fidelity;
        let v = self.route(c, key.1, key.2, adv).and_then(|r| {
            let hops: Vec<LinkInfo> = r
                .nodes
                .windows(2)
                .zip(&r.hops)
                .map(|(w, e)| self.hop_info(w[0], w[1], e.edge))
                .collect();
            let plans = allocate_targets(&hops, adv, 1e-9).ok()?;
            let mut cost = 0.0;
            for (h, p) in hops.iter().zip(&plans) {
                let raw = match (h.kind, p.pump) {
                    (HopKind::Physical(_), Some(_)) => pumping_plan(h.base_fidelity, p.threshold)?.expected_raw,
                    _ => 1.0,
                };
                cost += h.seconds_per_pair * raw;
            }
            Some(VirtualLink {
                network: c,
                a: key.1,
                b: key.2,
                cost,
                fidelity: adv,
                route: r.nodes,
            })
        });
        self.virtuals.insert(key, v);
        self.virtual_link(c, a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::link::{LinkSpec, NodeCapability};
    use crate::topology::DEFAULT_VELOCITY_MPS;

    /// e0 - [b0 - i0 - b1] - e1 with the bracket a child network.
    fn nested() -> (Topology, Internet) {
        let mut t = Topology::new();
        let e0 = t.add_node("e0", NodeCapability::new(NodeType::Comp));
        let b0 = t.add_node("b0", NodeCapability::new(NodeType::Rtr));
        let i0 = t.add_node("i0", NodeCapability::new(NodeType::Rtr));
        let b1 = t.add_node("b1", NodeCapability::new(NodeType::Rtr));
        let e1 = t.add_node("e1", NodeCapability::new(NodeType::Comp));
        let f = Fidelity::new(0.97).unwrap();
        for (a, b) in [(e0, b0), (b0, i0), (i0, b1), (b1, e1)] {
            t.add_link(LinkSpec::new(a, b, 10.0, f));
        }
        let mut net = Internet::flat(5);
        net.networks.push(NetworkSpec {
            id: NetworkId(1),
            name: "inner".into(),
            parent: Some(NetworkId::ROOT),
            advertised_fidelity: Fidelity::new(0.9).unwrap(),
        });
        for u in [b0, i0, b1] {
            net.home[u.index()] = NetworkId(1);
        }
        net.borders[b0.index()].insert(NetworkId::ROOT);
        net.borders[b1.index()].insert(NetworkId::ROOT);
        (t, net)
    }

    #[test]
    fn membership_and_layers() {
        let (t, net) = nested();
        assert!(net.validate().is_empty());
        assert_eq!(net.members(NetworkId::ROOT), vec![NodeAddr(0), NodeAddr(1), NodeAddr(3), NodeAddr(4)]);
        assert_eq!(net.borders_of(NetworkId(1)), vec![NodeAddr(1), NodeAddr(3)]);
        assert_eq!(net.link_owner(&t, LinkId(0)), Some(NetworkId::ROOT));
        assert_eq!(net.link_owner(&t, LinkId(1)), Some(NetworkId(1)));
        assert_eq!(net.layer(NetworkId::ROOT), 1);
        assert_eq!(net.layer(NetworkId(1)), 0);
        assert_eq!(net.address(NodeAddr(2)).to_string(), "net0/net1/n2");
    }

    #[test]
    fn outer_route_uses_one_virtual_hop() {
        let (t, net) = nested();
        let fab = ClassicalFabric::new(5, &t.default_classical_channels(DEFAULT_VELOCITY_MPS), SimTime::from_micros(1));
        let mut layers = Layers::new(Arc::new(t.clone()), Arc::new(net), fab);
        let r = layers
            .route(NetworkId::ROOT, NodeAddr(0), NodeAddr(4), Fidelity::new(0.8).unwrap())
            .unwrap();
        assert_eq!(r.nodes, vec![NodeAddr(0), NodeAddr(1), NodeAddr(3), NodeAddr(4)]);
        assert_eq!(r.hops[1].edge, EdgeRef::Virtual { network: 1 });
        let v = layers.virtual_link(NetworkId(1), NodeAddr(3), NodeAddr(1)).unwrap();
        assert_eq!(v.route, vec![NodeAddr(3), NodeAddr(2), NodeAddr(1)]);
        let raw = t.links[1].raw_seconds_per_pair() + t.links[2].raw_seconds_per_pair();
        assert!((v.cost - raw).abs() < 1e-12, "no pumping needed at 0.97 per hop");
        // Above the advertisement the child cannot be crossed.
        assert!(layers
            .route(NetworkId::ROOT, NodeAddr(0), NodeAddr(4), Fidelity::new(0.95).unwrap())
            .is_none());
    }

    #[test]
    fn bad_border_rejected() {
        let (_, mut net) = nested();
        net.borders[0].insert(NetworkId(1));
        assert_eq!(net.validate().len(), 1);
    }
}
