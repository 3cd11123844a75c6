//! Path selection and multiplexing.
//!
//! Link cost is seconds per Bell pair at an index fidelity. A link whose raw
//! pairs fall short of the index is charged for entanglement pumping: each
//! round purifies the held pair against one fresh raw pair.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::kernel::SimRng;
use crate::link::LinkSpec;
use crate::quantum::purify_outcome;
use crate::{ConnectionId, Fidelity, LinkId, NodeAddr};

/// Pumping schedules longer than this are treated as unreachable.
pub const MAX_PUMP_ROUNDS: u32 = 24;

/// Seconds per Bell pair. Infinite when the index fidelity is unreachable.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct LinkCost(pub f64);

impl LinkCost {
    pub fn is_finite(self) -> bool {
        self.0.is_finite()
    }
}

impl fmt::Display for LinkCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_finite() {
            write!(f, "{:.6e}", self.0)
        } else {
            f.write_str("inf")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PumpPlan {
    pub rounds: u32,
    /// Expected raw pairs consumed per output pair.
    pub expected_raw: f64,
    /// Fidelity after the last round.
    pub fidelity: Fidelity,
}

/// Smallest pumping schedule lifting `base` to at least `target`.
pub fn pumping_plan(base: Fidelity, target: Fidelity) -> Option<PumpPlan> {
    let mut f = base;
    let mut e = 1.0;
    let mut rounds = 0;
    while f < target {
        if rounds == MAX_PUMP_ROUNDS {
            return None;
        }
        let o = purify_outcome(f, base);
        if o.fidelity.value() <= f.value() + 1e-15 {
            return None;
        }
        e = (e + 1.0) / o.p_success;
        f = o.fidelity;
        rounds += 1;
    }
    Some(PumpPlan {
        rounds,
        expected_raw: e,
        fidelity: f,
    })
}

/// Limit of the pumping recurrence for fresh pairs of fidelity `base`.
pub fn pumping_fixed_point(base: Fidelity) -> Fidelity {
    let mut f = base;
    for _ in 0..10_000 {
        let n = purify_outcome(f, base).fidelity;
        if (n.value() - f.value()).abs() < 1e-15 {
            return n;
        }
        f = n;
    }
    f
}

pub fn cost_from_raw(raw_seconds: f64, base: Fidelity, index: Fidelity) -> LinkCost {
    match pumping_plan(base, index) {
        Some(p) => LinkCost(raw_seconds * p.expected_raw),
        None => LinkCost(f64::INFINITY),
    }
}

pub fn link_cost(link: &LinkSpec, f_index: Fidelity) -> LinkCost {
    cost_from_raw(link.raw_seconds_per_pair(), link.base_fidelity, f_index)
}

/// Which edge a graph hop corresponds to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EdgeRef {
    Physical(LinkId),
    /// Hop through child network `network` between two of its borders.
    Virtual { network: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub to: NodeAddr,
    pub cost: f64,
    pub edge: EdgeRef,
}

/// Weighted undirected graph for one routing instance.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    adjacency: BTreeMap<NodeAddr, Vec<Edge>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, n: NodeAddr) {
        self.adjacency.entry(n).or_default();
    }

    /// Infinite-cost edges are dropped.
    pub fn add_edge(&mut self, a: NodeAddr, b: NodeAddr, cost: f64, edge: EdgeRef) {
        self.add_node(a);
        self.add_node(b);
        if !cost.is_finite() {
            return;
        }
        self.adjacency.get_mut(&a).unwrap().push(Edge { to: b, cost, edge });
        self.adjacency.get_mut(&b).unwrap().push(Edge { to: a, cost, edge });
    }

    pub fn contains(&self, n: NodeAddr) -> bool {
        self.adjacency.contains_key(&n)
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeAddr> + '_ {
        self.adjacency.keys().copied()
    }

    pub fn edges(&self, n: NodeAddr) -> &[Edge] {
        self.adjacency.get(&n).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Cheapest edge between two adjacent nodes.
    pub fn best_edge(&self, a: NodeAddr, b: NodeAddr) -> Option<Edge> {
        self.edges(a)
            .iter()
            .filter(|e| e.to == b)
            .min_by(|x, y| x.cost.total_cmp(&y.cost).then(x.edge.cmp(&y.edge)))
            .copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub nodes: Vec<NodeAddr>,
    pub hops: Vec<Edge>,
    pub cost: f64,
}

#[derive(PartialEq)]
struct Label {
    cost: f64,
    path: Vec<NodeAddr>,
}

impl Eq for Label {}

impl Ord for Label {
    // Reversed for the max-heap: cheaper first, then lexicographically smaller.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.path.cmp(&self.path))
    }
}

impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Minimum-cost path. Among equal costs the lexicographically smallest node
/// sequence wins. `excluded` nodes are never entered.
pub fn qdijkstra_excluding(
    g: &Graph,
    src: NodeAddr,
    dst: NodeAddr,
    excluded: &BTreeSet<NodeAddr>,
) -> Option<Route> {
    if src == dst || !g.contains(src) || !g.contains(dst) {
        return None;
    }
    let mut settled: BTreeSet<NodeAddr> = BTreeSet::new();
    let mut best: BTreeMap<NodeAddr, (f64, Vec<NodeAddr>)> = BTreeMap::new();
    let mut heap = BinaryHeap::new();
    heap.push(Label {
        cost: 0.0,
        path: vec![src],
    });
    while let Some(Label { cost, path }) = heap.pop() {
        let u = *path.last().unwrap();
        if !settled.insert(u) {
            continue;
        }
        if u == dst {
            let mut hops = vec![];
            for w in path.windows(2) {
                hops.push(g.best_edge(w[0], w[1]).unwrap());
            }
            return Some(Route {
                nodes: path,
                hops,
                cost,
            });
        }
        for e in g.edges(u) {
            if settled.contains(&e.to) || excluded.contains(&e.to) {
                continue;
            }
            let nc = cost + e.cost;
            let better = match best.get(&e.to) {
                None => true,
                Some((c, p)) => match nc.total_cmp(c) {
                    Ordering::Less => true,
                    Ordering::Equal => {
                        let mut np = path.clone();
                        np.push(e.to);
                        np < *p
                    }
                    Ordering::Greater => false,
                },
            };
            if better {
                let mut np = path.clone();
                np.push(e.to);
                best.insert(e.to, (nc, np.clone()));
                heap.push(Label { cost: nc, path: np });
            }
        }
    }
    None
}

pub fn qdijkstra(g: &Graph, src: NodeAddr, dst: NodeAddr) -> Option<Route> {
    qdijkstra_excluding(g, src, dst, &BTreeSet::new())
}

/// Routing graph over physical links at an index fidelity.
pub fn physical_graph(links: &[LinkSpec], f_index: Fidelity) -> Graph {
    let mut g = Graph::new();
    for (i, l) in links.iter().enumerate() {
        g.add_edge(l.a, l.b, link_cost(l, f_index).0, EdgeRef::Physical(LinkId(i as u32)));
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MuxDiscipline {
    Circuit,
    StatMux,
    BufferSpace,
}

impl FromStr for MuxDiscipline {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "circuit" => Ok(MuxDiscipline::Circuit),
            // Time-division is accepted and run as exclusive reservation.
            "tdm" => Ok(MuxDiscipline::Circuit),
            "statmux" | "statistical" => Ok(MuxDiscipline::StatMux),
            "bufferspace" | "buffer_space" | "buffer" => Ok(MuxDiscipline::BufferSpace),
            other => Err(format!("unknown multiplexing discipline {other:?}")),
        }
    }
}

impl fmt::Display for MuxDiscipline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MuxDiscipline::Circuit => "circuit",
            MuxDiscipline::StatMux => "statmux",
            MuxDiscipline::BufferSpace => "bufferspace",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Refusal {
    LinkReserved { link: LinkId, owner: ConnectionId },
    NoQubits { node: NodeAddr, requested: u32, available: u32 },
}

impl fmt::Display for Refusal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Refusal::LinkReserved { link, owner } => {
                write!(f, "link {link} reserved by {owner}")
            }
            Refusal::NoQubits {
                node,
                requested,
                available,
            } => write!(f, "node {node} has {available} qubits free, {requested} requested"),
        }
    }
}

/// Admission and per-arrival assignment state for one discipline.
#[derive(Debug, Clone)]
pub struct Multiplexer {
    pub discipline: MuxDiscipline,
    circuit_owner: BTreeMap<LinkId, ConnectionId>,
    node_capacity: BTreeMap<NodeAddr, u32>,
    node_quota: BTreeMap<NodeAddr, BTreeMap<ConnectionId, u32>>,
    /// Connections able to receive pairs on each link, with weights.
    active: BTreeMap<LinkId, BTreeMap<ConnectionId, f64>>,
    /// Arrivals since each active connection last received a pair.
    waiting: BTreeMap<(LinkId, ConnectionId), u64>,
    pub starvation: BTreeMap<ConnectionId, u64>,
}

impl Multiplexer {
    pub fn new(discipline: MuxDiscipline, node_capacity: BTreeMap<NodeAddr, u32>) -> Self {
        Multiplexer {
            discipline,
            circuit_owner: BTreeMap::new(),
            node_capacity,
            node_quota: BTreeMap::new(),
            active: BTreeMap::new(),
            waiting: BTreeMap::new(),
            starvation: BTreeMap::new(),
        }
    }

    /// Admission check for one hop of an outbound setup. On success the
    /// reservation is recorded; [`Multiplexer::release`] undoes it.
    pub fn admit_hop(
        &mut self,
        conn: ConnectionId,
        link: Option<LinkId>,
        nodes: [NodeAddr; 2],
        quota: u32,
    ) -> Result<(), Refusal> {
        match self.discipline {
            MuxDiscipline::StatMux => Ok(()),
            MuxDiscipline::Circuit => {
                let Some(link) = link else { return Ok(()) };
                match self.circuit_owner.get(&link) {
                    Some(o) if *o != conn => Err(Refusal::LinkReserved { link, owner: *o }),
                    _ => {
                        self.circuit_owner.insert(link, conn);
                        Ok(())
                    }
                }
            }
            MuxDiscipline::BufferSpace => {
                for n in nodes {
                    let cap = self.node_capacity.get(&n).copied().unwrap_or(0);
                    let q = self.node_quota.entry(n).or_default();
                    if q.contains_key(&conn) {
                        continue;
                    }
                    let used: u32 = q.values().sum();
                    if used + quota > cap {
                        return Err(Refusal::NoQubits {
                            node: n,
                            requested: quota,
                            available: cap.saturating_sub(used),
                        });
                    }
                }
                for n in nodes {
                    self.node_quota.entry(n).or_default().entry(conn).or_insert(quota);
                }
                Ok(())
            }
        }
    }

    pub fn quota(&self, node: NodeAddr, conn: ConnectionId) -> Option<u32> {
        self.node_quota.get(&node).and_then(|q| q.get(&conn)).copied()
    }

    pub fn circuit_owner(&self, link: LinkId) -> Option<ConnectionId> {
        self.circuit_owner.get(&link).copied()
    }

    /// Drop every reservation held by `conn`.
    pub fn release(&mut self, conn: ConnectionId) {
        self.circuit_owner.retain(|_, o| *o != conn);
        for q in self.node_quota.values_mut() {
            q.remove(&conn);
        }
        for a in self.active.values_mut() {
            a.remove(&conn);
        }
        self.waiting.retain(|(_, c), _| *c != conn);
    }

    pub fn activate(&mut self, link: LinkId, conn: ConnectionId, weight: f64) {
        self.active.entry(link).or_default().insert(conn, weight);
        self.waiting.insert((link, conn), 0);
    }

    pub fn active_on(&self, link: LinkId) -> impl Iterator<Item = (ConnectionId, f64)> + '_ {
        self.active
            .get(&link)
            .into_iter()
            .flat_map(|m| m.iter().map(|(c, w)| (*c, *w)))
    }

    pub fn has_active(&self, link: LinkId) -> bool {
        self.active.get(&link).is_some_and(|m| !m.is_empty())
    }

    /// Pick the connection that receives a fresh pair on `link`.
    /// `eligible` lets the caller veto candidates (buffer quotas).
    pub fn assign(
        &mut self,
        link: LinkId,
        rng: &mut SimRng,
        mut eligible: impl FnMut(ConnectionId) -> bool,
    ) -> Option<ConnectionId> {
        let cands: Vec<(ConnectionId, f64)> = self
            .active_on(link)
            .filter(|(c, w)| *w > 0.0 && eligible(*c))
            .collect();
        let chosen = match self.discipline {
            MuxDiscipline::Circuit => {
                let owner = self.circuit_owner.get(&link).copied();
                cands.iter().map(|(c, _)| *c).find(|c| Some(*c) == owner)
            }
            MuxDiscipline::StatMux | MuxDiscipline::BufferSpace => match cands.len() {
                0 => None,
                1 => Some(cands[0].0),
                _ => {
                    let w: Vec<f64> = cands.iter().map(|(_, w)| *w).collect();
                    Some(cands[rng.weighted(&w)].0)
                }
            },
        };
        for (c, _) in self.active_on(link).collect::<Vec<_>>() {
            let k = self.waiting.entry((link, c)).or_default();
            if Some(c) == chosen {
                *k = 0;
            } else {
                *k += 1;
                let s = self.starvation.entry(c).or_default();
                *s = (*s).max(*k);
            }
        }
        chosen
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantum::oracle::{oracle_two_pair, TwoPairCircuit};

    fn f(v: f64) -> Fidelity {
        Fidelity::new(v).unwrap()
    }

    fn link(rate: f64, base: f64) -> LinkSpec {
        let mut l = LinkSpec::new(NodeAddr(0), NodeAddr(1), 1e-9, f(base));
        l.attempt_rate_hz = rate;
        l.detector_efficiency = 1.0;
        l
    }

    #[test]
    fn no_pumping_needed() {
        let c = link_cost(&link(100.0, 0.9), f(0.9));
        assert!((c.0 - 0.01).abs() < 1e-9);
    }

    #[test]
    fn one_round_of_pumping() {
        let c = link_cost(&link(100.0, 0.9), f(0.92));
        // Oracle: one round keeps with probability p and yields F'.
        let o = oracle_two_pair(f(0.9), f(0.9), TwoPairCircuit::Purify);
        assert!(o.even_fidelity() >= 0.92);
        let expected = 0.01 * 2.0 / o.even_probability();
        assert!((c.0 - expected).abs() < 1e-9);
        assert!((c.0 - 0.022843).abs() < 1e-5);
    }

    #[test]
    fn unreachable_index_is_infinite() {
        assert!(!link_cost(&link(100.0, 0.6), f(0.99)).is_finite());
        assert!(pumping_fixed_point(f(0.6)).value() < 0.99);
    }

    #[test]
    fn pumping_sequence_from_point_nine() {
        let fp = pumping_fixed_point(f(0.9));
        assert!((fp.value() - 0.9434).abs() < 1e-3);
        let p = pumping_plan(f(0.9), f(0.94)).unwrap();
        assert_eq!(p.rounds, 3);
        assert!(pumping_plan(f(0.9), f(0.96658)).is_none());
    }

    fn diamond(fast_fid: f64) -> Graph {
        // s -> a -> t fast/noisy, s -> b -> t slow/clean
        let (s, a, b, t) = (NodeAddr(0), NodeAddr(1), NodeAddr(2), NodeAddr(3));
        let fast = link(200.0, fast_fid);
        let slow = link(50.0, 0.95);
        let idx = f(0.95);
        let mut g = Graph::new();
        for (u, v, l) in [(s, a, &fast), (a, t, &fast), (s, b, &slow), (b, t, &slow)] {
            g.add_edge(u, v, link_cost(l, idx).0, EdgeRef::Physical(LinkId(0)));
        }
        g
    }

    #[test]
    fn diamond_prefers_clean_path_when_pumping_is_expensive() {
        let fast = link(200.0, 0.86);
        let c = link_cost(&fast, f(0.95));
        let slow_path = 2.0 * 0.02;
        let r = qdijkstra(&diamond(0.86), NodeAddr(0), NodeAddr(3)).unwrap();
        if 2.0 * c.0 > slow_path {
            assert_eq!(r.nodes, vec![NodeAddr(0), NodeAddr(2), NodeAddr(3)]);
        } else {
            assert_eq!(r.nodes, vec![NodeAddr(0), NodeAddr(1), NodeAddr(3)]);
        }
        // With a nearly clean fast path pumping is cheap and the fast path wins.
        let r = qdijkstra(&diamond(0.949), NodeAddr(0), NodeAddr(3)).unwrap();
        assert_eq!(r.nodes, vec![NodeAddr(0), NodeAddr(1), NodeAddr(3)]);
    }

    #[test]
    fn equal_cost_tie_break_is_lexicographic() {
        let mut g = Graph::new();
        let e = EdgeRef::Physical(LinkId(0));
        g.add_edge(NodeAddr(0), NodeAddr(5), 1.0, e);
        g.add_edge(NodeAddr(5), NodeAddr(9), 1.0, e);
        g.add_edge(NodeAddr(0), NodeAddr(3), 1.0, e);
        g.add_edge(NodeAddr(3), NodeAddr(9), 1.0, e);
        let r = qdijkstra(&g, NodeAddr(0), NodeAddr(9)).unwrap();
        assert_eq!(r.nodes, vec![NodeAddr(0), NodeAddr(3), NodeAddr(9)]);
    }

    #[test]
    fn disconnected_and_single_edge() {
        let mut g = Graph::new();
        g.add_edge(NodeAddr(0), NodeAddr(1), 2.0, EdgeRef::Physical(LinkId(0)));
        g.add_node(NodeAddr(2));
        assert!(qdijkstra(&g, NodeAddr(0), NodeAddr(2)).is_none());
        let r = qdijkstra(&g, NodeAddr(0), NodeAddr(1)).unwrap();
        assert_eq!((r.nodes.len(), r.cost), (2, 2.0));
    }

    #[test]
    fn circuit_refuses_shared_link() {
        let mut m = Multiplexer::new(MuxDiscipline::Circuit, BTreeMap::new());
        let n = [NodeAddr(0), NodeAddr(1)];
        m.admit_hop(ConnectionId(1), Some(LinkId(0)), n, 0).unwrap();
        assert!(m.admit_hop(ConnectionId(2), Some(LinkId(0)), n, 0).is_err());
        m.release(ConnectionId(1));
        assert!(m.admit_hop(ConnectionId(2), Some(LinkId(0)), n, 0).is_ok());
    }

    #[test]
    fn buffer_space_capacity_arithmetic() {
        let caps = [(NodeAddr(0), 4), (NodeAddr(1), 4)].into_iter().collect();
        let mut m = Multiplexer::new(MuxDiscipline::BufferSpace, caps);
        let n = [NodeAddr(0), NodeAddr(1)];
        assert!(m.admit_hop(ConnectionId(1), None, n, 2).is_ok());
        assert!(m.admit_hop(ConnectionId(2), None, n, 2).is_ok());
        assert!(m.admit_hop(ConnectionId(3), None, n, 2).is_err());
    }

    #[test]
    fn statmux_admits_everyone_and_splits_evenly() {
        let mut m = Multiplexer::new(MuxDiscipline::StatMux, BTreeMap::new());
        for c in 0..10 {
            assert!(m
                .admit_hop(ConnectionId(c), Some(LinkId(0)), [NodeAddr(0), NodeAddr(1)], 1)
                .is_ok());
        }
        m.activate(LinkId(0), ConnectionId(1), 1.0);
        m.activate(LinkId(0), ConnectionId(2), 1.0);
        let mut rng = SimRng::seeded(11);
        let n = 10_000;
        let ones = (0..n)
            .filter(|_| m.assign(LinkId(0), &mut rng, |_| true) == Some(ConnectionId(1)))
            .count();
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((ones as f64 - 5000.0).abs() < 3.0 * sigma, "{ones}");
    }

    #[test]
    fn circuit_always_assigns_owner() {
        let mut m = Multiplexer::new(MuxDiscipline::Circuit, BTreeMap::new());
        m.admit_hop(ConnectionId(4), Some(LinkId(2)), [NodeAddr(0), NodeAddr(1)], 0)
            .unwrap();
        m.activate(LinkId(2), ConnectionId(4), 1.0);
        let mut rng = SimRng::seeded(1);
        for _ in 0..100 {
            assert_eq!(m.assign(LinkId(2), &mut rng, |_| true), Some(ConnectionId(4)));
        }
    }
}
