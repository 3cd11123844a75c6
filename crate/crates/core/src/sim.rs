//! The event loop. Links generate pairs, nodes run their RuleSets through
//! [`Env`], setup and teardown travel as classical messages, and a
//! ground-truth registry tracks the real fidelity of every pair.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::Serialize;

use crate::connection::{
    decode_install, decode_request, encode_install, encode_request, generate_rulesets, verify_rulesets,
    ConnectionRequest, GeneratorOptions, InstallBundle, LinkInfo, Mode, Requirements, SetupFailure, VerifierOptions,
};
use crate::engine::{
    Arrival, Delivery, Env, Fault, FaultKind, NodeState, Note, Program, QubitKey, Release, Splice, TimerToken,
};
use crate::internet::{Internet, Layers, NetworkId};
use crate::kernel::{ClassicalFabric, EventId, Scheduler, SimRng, SimTime};
use crate::link::{attempt_success_probability, ExternalName, LinkArchitecture, NameMinter};
use crate::metrics::{
    ConnectionMetrics, GlobalMetrics, LinkMetrics, Metrics, NodeMetrics, PairAccounting, Record, TraceSink,
    SCHEMA_VERSION,
};
use crate::quantum::{decohere_by_rate, purify_outcome, qber_z, swap_fidelity, DecayRate};
use crate::routing::{EdgeRef, Multiplexer, MuxDiscipline};
use crate::ruleset::{Basis, MessageBody, Pauli, ProtocolMessage, RuleSet};
use crate::scenario::{ConnectionSpec, Scenario, Settings};
use crate::topology::Topology;
use crate::{ConnectionId, Fidelity, LinkId, NodeAddr};

/// Ids handed to segment connections created at borders.
const CHILD_ID_BASE: u64 = 1 << 40;
const MAX_KEPT_FAULTS: usize = 10_000;

#[derive(Debug, Clone)]
enum Control {
    Request(Vec<u8>),
    Install(Vec<u8>),
    Reject { connection: ConnectionId, reason: SetupFailure },
    Teardown(ConnectionId),
}

#[derive(Debug, Clone)]
enum Event {
    Start(ConnectionId),
    Stop(ConnectionId),
    Attempt(LinkId),
    Arrive(NodeAddr, Arrival),
    Message(NodeAddr, ProtocolMessage),
    Control { src: NodeAddr, dst: NodeAddr, msg: Control },
    Timer(NodeAddr, TimerToken),
    AppRelease(NodeAddr, QubitKey),
    Teardown(NodeAddr, ConnectionId),
}

#[derive(Default)]
pub struct SimOptions {
    pub trace: Option<TraceSink>,
    pub record_deliveries: bool,
    pub record_control: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ConnStatus {
    Pending,
    Established,
    Failed,
    TornDown,
}

/// One end-to-end pair that reached the application at both ends.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeliveredPair {
    pub connection: ConnectionId,
    pub at: SimTime,
    pub fidelity: f64,
    pub est: f64,
    /// Outcome disagreement when both halves were measured in one basis.
    pub mismatch: Option<bool>,
}

/// A setup-plane message as seen on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlRecord {
    pub connection: ConnectionId,
    pub layer: u32,
    pub network: NetworkId,
    pub kind: &'static str,
    pub addresses: Vec<NodeAddr>,
}

struct Conn {
    spec: ConnectionSpec,
    parent: Option<ConnectionId>,
    children: Vec<ConnectionId>,
    network: NetworkId,
    layer: u32,
    route: Vec<NodeAddr>,
    edges: Vec<EdgeRef>,
    status: ConnStatus,
    failure: Option<String>,
    attempts: u32,
    requested_at: Option<SimTime>,
    established_at: Option<SimTime>,
    held_install: Option<InstallBundle>,
    hops: Vec<LinkInfo>,
    torn: BTreeSet<NodeAddr>,
    acct: PairAccounting,
    initiator_deliveries: u64,
    fid_sum: f64,
    est_sum: f64,
    fid_n: u64,
    qber_n: u64,
    qber_err: u64,
    request_messages: u64,
    install_messages: u64,
}

impl Conn {
    fn new(spec: ConnectionSpec, parent: Option<ConnectionId>) -> Self {
        Conn {
            spec,
            parent,
            children: vec![],
            network: NetworkId::ROOT,
            layer: 0,
            route: vec![],
            edges: vec![],
            status: ConnStatus::Pending,
            failure: None,
            attempts: 0,
            requested_at: None,
            established_at: None,
            held_install: None,
            hops: vec![],
            torn: BTreeSet::new(),
            acct: PairAccounting::default(),
            initiator_deliveries: 0,
            fid_sum: 0.0,
            est_sum: 0.0,
            fid_n: 0,
            qber_n: 0,
            qber_err: 0,
            request_messages: 0,
            install_messages: 0,
        }
    }

    fn position(&self, u: NodeAddr) -> Option<usize> {
        self.route.iter().position(|x| *x == u)
    }
}

struct NodeRt {
    stores: bool,
    capacity: u32,
    used: u32,
    peak: u32,
    rate: f64,
    processing: SimTime,
    minter: NameMinter,
    next_key: u64,
    firings: u64,
    faults: BTreeMap<FaultKind, u64>,
    notes: BTreeMap<Note, u64>,
    releases: BTreeMap<Release, u64>,
}

struct LinkRt {
    p: f64,
    period: SimTime,
    slot: Option<(SimTime, u8)>,
    cap: u32,
    used: [u32; 2],
    pending: Option<(EventId, u64)>,
    next_free: SimTime,
    attempts: u64,
    successes: u64,
    stalls: u64,
    installs: BTreeMap<ConnectionId, u8>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Half {
    Live(NodeAddr, QubitKey),
    Measured(NodeAddr, Basis),
    Held(NodeAddr),
    Gone,
}

impl Half {
    fn node(self) -> Option<NodeAddr> {
        match self {
            Half::Live(n, _) | Half::Measured(n, _) | Half::Held(n) => Some(n),
            Half::Gone => None,
        }
    }
}

/// Real state of one Bell pair. Fidelity decays lazily from `at`.
#[derive(Debug, Clone)]
struct Pair {
    halves: [Half; 2],
    f: Fidelity,
    at: SimTime,
    conn: Option<ConnectionId>,
    name: ExternalName,
    delivered: [bool; 2],
    est: [f64; 2],
    mismatch: Option<Option<bool>>,
}

enum Fate {
    Consumed,
    Swapped,
    Delivered,
    Freed,
}

struct Core {
    sched: Scheduler<Event>,
    rng: SimRng,
    topo: Arc<Topology>,
    net: Arc<Internet>,
    layers: Layers,
    settings: Settings,
    estimates: Vec<Fidelity>,
    mux: Multiplexer,
    nodes: Vec<NodeRt>,
    links: Vec<LinkRt>,
    key_link: HashMap<(NodeAddr, QubitKey), (LinkId, usize)>,
    pairs: HashMap<u64, Pair>,
    by_qubit: HashMap<(NodeAddr, QubitKey), u64>,
    by_name: HashMap<ExternalName, u64>,
    /// Far halves of pairs sacrificed at the other end: kept pair, success, bit.
    purify_rounds: HashMap<(NodeAddr, QubitKey), (bool, u8)>,
    next_pair: u64,
    conns: BTreeMap<ConnectionId, Conn>,
    next_child: u64,
    links_enabled: bool,
    faults: Vec<(SimTime, Fault)>,
    fault_count: u64,
    privacy_violations: u64,
    unassigned: PairAccounting,
    trace: Option<TraceSink>,
    deliveries: Option<Vec<DeliveredPair>>,
    control_log: Option<Vec<ControlRecord>>,
}

/// Time of the `k`-th attempt (1-based) at or after `start`, optionally
/// restricted to every other slot of length `slot.0` starting with color
/// `slot.1`.
pub fn nth_attempt(start: SimTime, k: u64, period: SimTime, slot: Option<(SimTime, u8)>) -> SimTime {
    let p = period.0.max(1);
    let k = k.max(1);
    let Some((s, color)) = slot else {
        return SimTime(start.0.saturating_add((k - 1).saturating_mul(p)));
    };
    let s = s.0.max(1);
    let cycle = 2 * s;
    let offset = color as u64 % 2 * s;
    let mut t = start.0;
    let mut m = if t < offset { 0 } else { (t - offset) / cycle };
    let mut wstart = m * cycle + offset;
    if t < wstart {
        t = wstart;
    }
    if t >= wstart + s {
        m += 1;
        wstart = m * cycle + offset;
        t = wstart;
    }
    let avail = (wstart + s - t).div_ceil(p);
    if k <= avail {
        return SimTime(t + (k - 1) * p);
    }
    let full = s.div_ceil(p);
    let rest = k - avail - 1;
    let w = rest / full;
    let idx = rest % full;
    SimTime((m + 1 + w) * cycle + offset + idx * p)
}

/// Two-color links that share a single-interface repeater.
fn slot_colors(topo: &Topology) -> Vec<Option<u8>> {
    let single = |n: NodeAddr| topo.node(n).capability.single_active_interface;
    let mut color: Vec<Option<u8>> = vec![None; topo.links.len()];
    for start in 0..topo.links.len() {
        let l = &topo.links[start];
        if color[start].is_some() || !(single(l.a) || single(l.b)) {
            continue;
        }
        color[start] = Some(0);
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let li = &topo.links[i];
            for n in [li.a, li.b] {
                if !single(n) {
                    continue;
                }
                for o in topo.links_at(n) {
                    if o.index() != i && color[o.index()].is_none() {
                        color[o.index()] = Some(1 - color[i].unwrap());
                        queue.push_back(o.index());
                    }
                }
            }
        }
    }
    color
}

impl Core {
    fn now(&self) -> SimTime {
        self.sched.now()
    }

    fn trace(&mut self, kind: &str, src: impl std::fmt::Display, dst: impl std::fmt::Display, detail: &str) {
        let now = self.sched.now();
        if let Some(t) = self.trace.as_mut() {
            t.line(now, kind, src, dst, detail);
        }
    }

    fn tracing(&self) -> bool {
        self.trace.is_some()
    }

    fn acct(&mut self, conn: Option<ConnectionId>) -> &mut PairAccounting {
        match conn.and_then(|c| self.conns.get_mut(&c)) {
            Some(c) => &mut c.acct,
            None => &mut self.unassigned,
        }
    }

    fn deliver_delay(&mut self, src: NodeAddr, dst: NodeAddr) -> SimTime {
        self.layers.latency(src, dst).saturating_add(self.nodes[dst.index()].processing)
    }

    fn settle(&mut self, pid: u64) {
        let now = self.now();
        let Some(p) = self.pairs.get(&pid) else { return };
        let rate: f64 = p
            .halves
            .iter()
            .filter_map(|h| match h {
                Half::Live(n, _) => Some(self.nodes[n.index()].rate),
                _ => None,
            })
            .sum();
        let p = self.pairs.get_mut(&pid).unwrap();
        p.f = decohere_by_rate(p.f, (now - p.at).as_secs(), rate);
        p.at = now;
    }

    fn new_pair(&mut self, halves: [Half; 2], f: Fidelity, conn: Option<ConnectionId>, name: ExternalName) -> u64 {
        let pid = self.next_pair;
        self.next_pair += 1;
        for h in halves {
            if let Half::Live(n, k) = h {
                self.by_qubit.insert((n, k), pid);
            }
        }
        self.by_name.insert(name, pid);
        self.pairs.insert(
            pid,
            Pair {
                halves,
                f,
                at: self.now(),
                conn,
                name,
                delivered: [false; 2],
                est: [0.0; 2],
                mismatch: None,
            },
        );
        pid
    }

    fn end_pair(&mut self, pid: u64, fate: Fate) -> Option<Pair> {
        let p = self.pairs.remove(&pid)?;
        for h in p.halves {
            if let Half::Live(n, k) = h {
                if self.by_qubit.get(&(n, k)) == Some(&pid) {
                    self.by_qubit.remove(&(n, k));
                }
            }
        }
        if self.by_name.get(&p.name) == Some(&pid) {
            self.by_name.remove(&p.name);
        }
        let a = self.acct(p.conn);
        match fate {
            Fate::Consumed => a.consumed += 1,
            Fate::Swapped => a.swapped += 1,
            Fate::Delivered => a.delivered += 1,
            Fate::Freed => a.freed += 1,
        }
        Some(p)
    }

    fn half_index(p: &Pair, node: NodeAddr) -> Option<usize> {
        p.halves.iter().position(|h| h.node() == Some(node))
    }

    fn maybe_sample_mismatch(&mut self, pid: u64) {
        let Some(p) = self.pairs.get(&pid) else { return };
        if p.mismatch.is_some() {
            return;
        }
        if let [Half::Measured(_, b1), Half::Measured(_, b2)] = p.halves {
            let m = if b1 == b2 {
                let q = qber_z(p.f);
                Some(self.rng.bernoulli(q))
            } else {
                None
            };
            self.pairs.get_mut(&pid).unwrap().mismatch = Some(m);
        }
    }

    fn free_qubit(&mut self, node: NodeAddr, key: QubitKey) {
        if let Some((l, end)) = self.key_link.remove(&(node, key)) {
            self.nodes[node.index()].used -= 1;
            self.links[l.index()].used[end] -= 1;
        }
    }

    fn kick(&mut self, l: LinkId) {
        let lr = &self.links[l.index()];
        if !self.links_enabled || lr.pending.is_some() || lr.p <= 0.0 || !self.mux.has_active(l) {
            return;
        }
        let p = lr.p;
        let k = if p >= 1.0 {
            1
        } else {
            let u = 1.0 - self.rng.uniform();
            1 + (u.ln() / (1.0 - p).ln()).floor().min(1e15) as u64
        };
        let lr = &self.links[l.index()];
        let start = self.sched.now().max(lr.next_free);
        let at = nth_attempt(start, k, lr.period, lr.slot);
        let id = self.sched.schedule(at, Event::Attempt(l)).expect("future attempt");
        self.links[l.index()].pending = Some((id, k));
    }

    fn idle_links(&mut self, route: &[NodeAddr], edges: &[EdgeRef]) {
        let _ = route;
        for e in edges {
            if let EdgeRef::Physical(l) = e {
                if !self.mux.has_active(*l) {
                    if let Some((id, _)) = self.links[l.index()].pending.take() {
                        self.sched.cancel(id);
                    }
                }
            }
        }
    }

    fn send_control(&mut self, src: NodeAddr, dst: NodeAddr, msg: Control) {
        if self.control_log.is_some() || self.tracing() {
            self.log_control(src, dst, &msg);
        }
        let d = self.deliver_delay(src, dst);
        self.sched.schedule_in(d, Event::Control { src, dst, msg });
    }

    fn log_control(&mut self, src: NodeAddr, dst: NodeAddr, msg: &Control) {
        let (kind, conn, addrs) = match msg {
            Control::Request(b) => match decode_request(b) {
                Ok(r) => ("REQ", r.id, r.addresses()),
                Err(_) => return,
            },
            Control::Install(b) => match decode_install(b) {
                Ok(x) => {
                    let mut a: Vec<NodeAddr> = x.rulesets.iter().flat_map(|r| r.referenced_nodes()).collect();
                    a.extend(x.rulesets.iter().map(|r| r.owner));
                    a.sort();
                    a.dedup();
                    ("INSTALL", x.connection, a)
                }
                Err(_) => return,
            },
            Control::Reject { connection, .. } => ("REJECT", *connection, vec![src, dst]),
            Control::Teardown(c) => ("TEARDOWN", *c, vec![src, dst]),
        };
        if self.tracing() {
            self.trace(kind, src, dst, &format!("{conn}"));
        }
        let (layer, network) = self.conns.get(&conn).map_or((0, NetworkId::ROOT), |c| (c.layer, c.network));
        if let Some(log) = self.control_log.as_mut() {
            log.push(ControlRecord {
                connection: conn,
                layer,
                network,
                kind,
                addresses: addrs,
            });
        }
    }

    /// Every address a request carries must belong to the network it is
    /// routed in; the suspended outer request is checked against its own.
    fn check_request_privacy(&mut self, req: &ConnectionRequest) {
        let mut r = Some(req);
        while let Some(q) = r {
            if let Some(c) = self.conns.get(&q.id) {
                let n = c.network;
                let bad = q.addresses().into_iter().filter(|a| !self.net.contains(n, *a)).count();
                self.privacy_violations += bad as u64;
            }
            r = q.parent.as_deref();
        }
    }

    fn check_bundle_privacy(&mut self, b: &InstallBundle) {
        let mut x = Some(b);
        while let Some(b) = x {
            if let Some(c) = self.conns.get(&b.connection) {
                let n = c.network;
                for rs in &b.rulesets {
                    let mut a = rs.referenced_nodes();
                    a.push(rs.owner);
                    self.privacy_violations += a.iter().filter(|u| !self.net.contains(n, **u)).count() as u64;
                }
            }
            x = b.resume.as_deref();
        }
    }

    fn check_message_privacy(&mut self, dst: NodeAddr, msg: &ProtocolMessage) {
        let Some(c) = self.conns.get(&msg.connection) else { return };
        let n = c.network;
        let mut a = vec![dst, msg.sender];
        if let MessageBody::Transfer { new_partner, .. } = msg.body {
            a.push(new_partner);
        }
        self.privacy_violations += a.iter().filter(|u| !self.net.contains(n, **u)).count() as u64;
    }
}

/// What a node's RuleSets see of the world.
struct Ctx<'a> {
    core: &'a mut Core,
    node: NodeAddr,
}

impl Env for Ctx<'_> {
    fn now(&self) -> SimTime {
        self.core.now()
    }

    fn mint_name(&mut self) -> ExternalName {
        let now = self.core.now();
        self.core.nodes[self.node.index()].minter.mint(self.node, now)
    }

    fn send(&mut self, dst: NodeAddr, msg: ProtocolMessage) {
        self.core.check_message_privacy(dst, &msg);
        let d = self.core.deliver_delay(self.node, dst);
        self.core.sched.schedule_in(d, Event::Message(dst, msg));
    }

    fn set_timer(&mut self, at: SimTime, token: TimerToken) {
        let at = at.max(self.core.now());
        self.core.sched.schedule(at, Event::Timer(self.node, token)).expect("timer in future");
    }

    fn swap(&mut self, connection: ConnectionId, left: QubitKey, right: QubitKey, new_name: ExternalName) -> Pauli {
        let c = &mut *self.core;
        let node = self.node;
        let pl = c.by_qubit.get(&(node, left)).copied();
        let pr = c.by_qubit.get(&(node, right)).copied();
        let mut others = [Half::Gone; 2];
        let mut fs = [None; 2];
        for (i, (pid, key)) in [(pl, left), (pr, right)].into_iter().enumerate() {
            let Some(pid) = pid else { continue };
            c.settle(pid);
            let p = &c.pairs[&pid];
            fs[i] = Some(p.f);
            others[i] = p
                .halves
                .iter()
                .copied()
                .find(|h| *h != Half::Live(node, key))
                .unwrap_or(Half::Gone);
        }
        let f = match fs {
            [Some(a), Some(b)] => swap_fidelity(a, b),
            _ => Fidelity::FLOOR,
        };
        for pid in [pl, pr].into_iter().flatten() {
            c.end_pair(pid, Fate::Swapped);
        }
        c.free_qubit(node, left);
        c.free_qubit(node, right);
        let pid = c.new_pair(others, f, Some(connection), new_name);
        c.acct(Some(connection)).swap_created += 1;
        if others == [Half::Gone; 2] {
            c.end_pair(pid, Fate::Freed);
        }
        c.maybe_sample_mismatch(pid);
        match c.rng.below(4) {
            0 => Pauli::I,
            1 => Pauli::X,
            2 => Pauli::Z,
            _ => Pauli::XZ,
        }
    }

    fn purify(&mut self, _connection: ConnectionId, kept: QubitKey, sacrificed: QubitKey) -> u8 {
        let c = &mut *self.core;
        let node = self.node;
        c.free_qubit(node, sacrificed);
        if let Some((success, bit)) = c.purify_rounds.remove(&(node, sacrificed)) {
            return bit ^ u8::from(!success);
        }
        let pk = c.by_qubit.get(&(node, kept)).copied();
        let ps = c.by_qubit.get(&(node, sacrificed)).copied();
        let bit = c.rng.below(2) as u8;
        let (Some(pk), Some(ps)) = (pk, ps) else {
            return bit;
        };
        c.settle(pk);
        c.settle(ps);
        let o = purify_outcome(c.pairs[&pk].f, c.pairs[&ps].f);
        let success = c.rng.bernoulli(o.p_success);
        if success {
            c.pairs.get_mut(&pk).unwrap().f = o.fidelity;
        }
        if let Some(p) = c.end_pair(ps, Fate::Consumed) {
            for h in p.halves {
                if let Half::Live(n, k) = h {
                    if n != node {
                        c.purify_rounds.insert((n, k), (success, bit));
                    }
                }
            }
        }
        bit
    }

    fn measure(&mut self, _connection: ConnectionId, key: QubitKey, basis: Basis) -> Basis {
        let c = &mut *self.core;
        let b = match basis {
            Basis::Random => {
                if c.rng.below(2) == 0 {
                    Basis::Z
                } else {
                    Basis::X
                }
            }
            b => b,
        };
        c.free_qubit(self.node, key);
        if let Some(pid) = c.by_qubit.remove(&(self.node, key)) {
            c.settle(pid);
            if let Some(p) = c.pairs.get_mut(&pid) {
                for h in p.halves.iter_mut() {
                    if *h == Half::Live(self.node, key) {
                        *h = Half::Measured(self.node, b);
                    }
                }
            }
            c.maybe_sample_mismatch(pid);
        }
        b
    }

    fn release(&mut self, key: QubitKey, why: Release) {
        let c = &mut *self.core;
        *c.nodes[self.node.index()].releases.entry(why).or_default() += 1;
        c.free_qubit(self.node, key);
        c.purify_rounds.remove(&(self.node, key));
        if let Some(pid) = c.by_qubit.get(&(self.node, key)).copied() {
            c.end_pair(pid, Fate::Freed);
        }
    }

    fn deliver(&mut self, d: Delivery) {
        let node = self.node;
        let c = &mut *self.core;
        if c.tracing() {
            c.trace("DELIVER", node, d.partner, &format!("{} {}", d.connection, d.name));
        }
        let pid = match d.key {
            Some(k) => {
                let hold = c.settings.app_hold;
                if hold == SimTime::ZERO {
                    c.free_qubit(node, k);
                } else {
                    c.sched.schedule_in(hold, Event::AppRelease(node, k));
                }
                c.by_qubit.remove(&(node, k))
            }
            None => c.by_name.get(&d.name).copied(),
        };
        if let Some(pid) = pid {
            c.settle(pid);
            let p = c.pairs.get_mut(&pid).unwrap();
            if let Some(i) = Core::half_index(p, node) {
                if let Half::Live(..) = p.halves[i] {
                    p.halves[i] = Half::Held(node);
                }
                p.delivered[i] = true;
                p.est[i] = d.est.value();
            }
            let orphan = p.halves.contains(&Half::Gone);
            if orphan {
                // The far half was released before the swap reached it.
                c.end_pair(pid, Fate::Freed);
            } else if p.delivered == [true, true] {
                let p = c.end_pair(pid, Fate::Delivered).unwrap();
                let est = (p.est[0] + p.est[1]) / 2.0;
                let mismatch = p.mismatch.flatten();
                if let Some(conn) = p.conn.and_then(|x| c.conns.get_mut(&x)) {
                    conn.fid_sum += p.f.value();
                    conn.est_sum += est;
                    conn.fid_n += 1;
                    if let Some(m) = mismatch {
                        conn.qber_n += 1;
                        conn.qber_err += u64::from(m);
                    }
                }
                let now = c.now();
                if let Some(log) = c.deliveries.as_mut() {
                    log.push(DeliveredPair {
                        connection: p.conn.unwrap_or(d.connection),
                        at: now,
                        fidelity: p.f.value(),
                        est,
                        mismatch,
                    });
                }
            }
        }
        if let Some(conn) = c.conns.get_mut(&d.connection) {
            if conn.parent.is_none() && node == conn.spec.initiator {
                conn.initiator_deliveries += 1;
                if let Mode::Count(n) = conn.spec.requirements.mode {
                    if conn.initiator_deliveries == n {
                        c.sched.schedule_in(SimTime::ZERO, Event::Teardown(node, d.connection));
                    }
                }
            }
        }
    }

    fn fault(&mut self, f: Fault) {
        let c = &mut *self.core;
        let now = c.now();
        if c.tracing() {
            c.trace("FAULT", f.location, self.node, &format!("{} {} {}", f.kind, f.connection, f.detail));
        }
        *c.nodes[f.location.index()].faults.entry(f.kind).or_default() += 1;
        c.fault_count += 1;
        if c.faults.len() < MAX_KEPT_FAULTS {
            c.faults.push((now, f));
        }
    }

    fn note(&mut self, n: Note, _connection: ConnectionId) {
        *self.core.nodes[self.node.index()].notes.entry(n).or_default() += 1;
    }

    fn fired(&mut self, _connection: ConnectionId, _stage: u16, _rule: u16) {
        self.core.nodes[self.node.index()].firings += 1;
    }

    fn spliced(&mut self, child: ConnectionId, parent: ConnectionId, key: QubitKey) {
        let c = &mut *self.core;
        let Some(pid) = c.by_qubit.get(&(self.node, key)).copied() else { return };
        if c.pairs[&pid].conn != Some(child) {
            return;
        }
        c.settle(pid);
        let f = c.pairs[&pid].f.value();
        c.pairs.get_mut(&pid).unwrap().conn = Some(parent);
        if let Some(ch) = c.conns.get_mut(&child) {
            ch.acct.delivered += 1;
            ch.fid_sum += f;
            ch.fid_n += 1;
        }
        c.acct(Some(parent)).raw += 1;
    }
}

pub struct Simulation {
    core: Core,
    states: Vec<NodeState>,
    programs: Vec<Program>,
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Self {
        Self::with_options(scenario, SimOptions::default())
    }

    pub fn with_options(scenario: Scenario, opts: SimOptions) -> Self {
        let Scenario {
            topology,
            internet,
            channels,
            estimates,
            connections,
            settings,
        } = scenario;
        let topo = Arc::new(topology);
        let net = Arc::new(internet);
        let n = topo.nodes.len();
        let fabric = ClassicalFabric::new(n, &channels, settings.loopback);
        let layers = Layers::new(topo.clone(), net.clone(), fabric);
        let colors = slot_colors(&topo);
        let links: Vec<LinkRt> = topo
            .links
            .iter()
            .enumerate()
            .map(|(i, l)| LinkRt {
                p: attempt_success_probability(l),
                period: l.attempt_period(),
                slot: colors[i].map(|c| (settings.slot, c)),
                cap: l.qubit_capacity,
                used: [0, 0],
                pending: None,
                next_free: SimTime::ZERO,
                attempts: 0,
                successes: 0,
                stalls: 0,
                installs: BTreeMap::new(),
            })
            .collect();
        let nodes: Vec<NodeRt> = topo
            .nodes
            .iter()
            .map(|s| NodeRt {
                stores: s.capability.stores_qubits(),
                capacity: s.capability.memory_qubits,
                used: 0,
                peak: 0,
                rate: s.capability.decoherence_rate(),
                processing: s.processing_delay,
                minter: NameMinter::default(),
                next_key: 0,
                firings: 0,
                faults: BTreeMap::new(),
                notes: BTreeMap::new(),
                releases: BTreeMap::new(),
            })
            .collect();
        let programs = topo
            .nodes
            .iter()
            .map(|s| {
                let mut p = Program::new(s.addr);
                p.decay = DecayRate(s.capability.decoherence_rate());
                p.measure_only = !s.capability.stores_qubits();
                p.tombstone_ttl = settings.tombstone_ttl;
                p.max_firings = settings.max_firings;
                let adj = topo.links_at(s.addr);
                if !adj.is_empty() {
                    let mean = adj.iter().map(|l| topo.link(*l).attempt_period().as_secs()).sum::<f64>() / adj.len() as f64;
                    p.stale_after = SimTime::from_secs(mean * settings.stale_factor);
                }
                p
            })
            .collect();
        let caps = topo.nodes.iter().map(|s| (s.addr, s.capability.memory_qubits)).collect();
        let estimates = topo
            .links
            .iter()
            .zip(estimates.iter().chain(std::iter::repeat(&None)))
            .map(|(l, e)| e.unwrap_or(l.base_fidelity))
            .collect();
        let mut core = Core {
            sched: Scheduler::new(),
            rng: SimRng::seeded(settings.seed),
            topo,
            net,
            layers,
            mux: Multiplexer::new(settings.discipline, caps),
            settings,
            estimates,
            nodes,
            links,
            key_link: HashMap::new(),
            pairs: HashMap::new(),
            by_qubit: HashMap::new(),
            by_name: HashMap::new(),
            purify_rounds: HashMap::new(),
            next_pair: 0,
            conns: BTreeMap::new(),
            next_child: CHILD_ID_BASE,
            links_enabled: true,
            faults: vec![],
            fault_count: 0,
            privacy_violations: 0,
            unassigned: PairAccounting::default(),
            trace: opts.trace,
            deliveries: opts.record_deliveries.then(Vec::new),
            control_log: opts.record_control.then(Vec::new),
        };
        for spec in connections {
            let id = spec.id;
            let (start, stop) = (spec.start, spec.stop);
            core.conns.insert(id, Conn::new(spec, None));
            core.sched.schedule(start, Event::Start(id)).expect("start time");
            if let Some(t) = stop {
                core.sched.schedule(t.max(start), Event::Stop(id)).expect("stop time");
            }
        }
        Simulation {
            core,
            states: vec![NodeState::new(); n],
            programs,
        }
    }

    pub fn now(&self) -> SimTime {
        self.core.now()
    }

    pub fn settings(&self) -> &Settings {
        &self.core.settings
    }

    pub fn topology(&self) -> &Topology {
        &self.core.topo
    }

    /// Run to the configured duration and report.
    pub fn run(&mut self) -> Metrics {
        let end = self.core.settings.duration;
        self.run_until(end);
        self.metrics()
    }

    pub fn run_until(&mut self, limit: SimTime) {
        while let Some((_, _, ev)) = self.core.sched.pop_until(limit) {
            self.handle(ev);
        }
        self.core.sched.advance_to(limit);
        if let Some(t) = self.core.trace.as_mut() {
            t.flush();
        }
    }

    /// Stop generating pairs and let in-flight messages and timers play out.
    /// Returns false if `max_events` ran out first.
    pub fn drain(&mut self, max_events: u64) -> bool {
        self.core.links_enabled = false;
        for l in 0..self.core.links.len() {
            if let Some((id, _)) = self.core.links[l].pending.take() {
                self.core.sched.cancel(id);
            }
        }
        for _ in 0..max_events {
            match self.core.sched.pop_until(SimTime::MAX) {
                Some((_, _, ev)) => self.handle(ev),
                None => return true,
            }
        }
        self.core.sched.peek_time().is_none()
    }

    /// Tear a connection down from its initiator now.
    pub fn teardown(&mut self, c: ConnectionId) {
        if let Some(conn) = self.core.conns.get(&c) {
            let i = conn.spec.initiator;
            self.core.sched.schedule_in(SimTime::ZERO, Event::Teardown(i, c));
        }
    }

    pub fn status(&self, c: ConnectionId) -> Option<ConnStatus> {
        self.core.conns.get(&c).map(|x| x.status)
    }

    pub fn failure(&self, c: ConnectionId) -> Option<&str> {
        self.core.conns.get(&c).and_then(|x| x.failure.as_deref())
    }

    pub fn route(&self, c: ConnectionId) -> Option<&[NodeAddr]> {
        self.core.conns.get(&c).map(|x| x.route.as_slice())
    }

    /// Hop list the responder generated RuleSets from.
    pub fn setup_hops(&self, c: ConnectionId) -> &[LinkInfo] {
        self.core.conns.get(&c).map_or(&[], |x| x.hops.as_slice())
    }

    pub fn children(&self, c: ConnectionId) -> Vec<ConnectionId> {
        self.core.conns.get(&c).map(|x| x.children.clone()).unwrap_or_default()
    }

    pub fn layer(&self, c: ConnectionId) -> Option<u32> {
        self.core.conns.get(&c).map(|x| x.layer)
    }

    pub fn connection_ids(&self) -> Vec<ConnectionId> {
        self.core.conns.keys().copied().collect()
    }

    pub fn deliveries(&self) -> &[DeliveredPair] {
        self.core.deliveries.as_deref().unwrap_or(&[])
    }

    pub fn control_log(&self) -> &[ControlRecord] {
        self.core.control_log.as_deref().unwrap_or(&[])
    }

    pub fn faults(&self) -> &[(SimTime, Fault)] {
        &self.core.faults
    }

    pub fn fault_count(&self) -> u64 {
        self.core.fault_count
    }

    pub fn privacy_violations(&self) -> u64 {
        self.core.privacy_violations
    }

    pub fn trace(&self) -> Option<&[u8]> {
        self.core.trace.as_ref().and_then(|t| t.contents())
    }

    pub fn take_trace(&mut self) -> Option<TraceSink> {
        self.core.trace.take()
    }

    pub fn states(&self) -> &[NodeState] {
        &self.states
    }

    pub fn programs(&self) -> &[Program] {
        &self.programs
    }

    /// Qubits currently occupied at a node.
    pub fn used_qubits(&self, n: NodeAddr) -> u32 {
        self.core.nodes[n.index()].used
    }

    pub fn live_pairs(&self) -> usize {
        self.core.pairs.len()
    }

    /// RuleSets currently installed for a connection, in route order.
    pub fn installed(&self, c: ConnectionId) -> Vec<RuleSet> {
        let Some(conn) = self.core.conns.get(&c) else { return vec![] };
        conn.route
            .iter()
            .filter_map(|n| self.programs[n.index()].connections.get(&c))
            .map(|i| (*i.ruleset).clone())
            .collect()
    }

    /// Cross-check node pools against the ground truth. Only meaningful once
    /// no messages are in flight.
    pub fn check_pairs(&self) -> Result<(), String> {
        for (u, st) in self.states.iter().enumerate() {
            let u = NodeAddr(u as u32);
            st.check_consistency()?;
            for r in st.resources() {
                let Some(pid) = self.core.by_qubit.get(&(u, r.key)) else {
                    continue;
                };
                let p = &self.core.pairs[pid];
                let Some(i) = Core::half_index(p, u) else {
                    return Err(format!("{u} holds {} but the pair has no half there", r.name));
                };
                if let Half::Live(v, k) = p.halves[1 - i] {
                    let Some(o) = self.states[v.index()].resource(k) else { continue };
                    if r.partner != v || o.partner != u || o.name != r.name {
                        return Err(format!(
                            "{u} holds {} with partner {}, {v} holds {} with partner {}",
                            r.name, r.partner, o.name, o.partner
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn ctx(&mut self, n: NodeAddr) -> (&mut NodeState, &Program, Ctx<'_>) {
        (
            &mut self.states[n.index()],
            &self.programs[n.index()],
            Ctx {
                core: &mut self.core,
                node: n,
            },
        )
    }

    fn handle(&mut self, ev: Event) {
        match ev {
            Event::Start(c) => self.start(c),
            Event::Stop(c) => {
                if let Some(conn) = self.core.conns.get(&c) {
                    let i = conn.spec.initiator;
                    self.teardown_at(i, c);
                }
            }
            Event::Teardown(n, c) => self.teardown_at(n, c),
            Event::Attempt(l) => self.attempt(l),
            Event::Arrive(n, a) => {
                let (st, prog, mut env) = self.ctx(n);
                st.on_arrival(prog, &mut env, a);
            }
            Event::Message(n, m) => {
                if self.core.tracing() {
                    let detail = format!("{} {:?} {}", m.connection, m.body.kind(), m.body.subject());
                    self.core.trace("MSG", m.sender, n, &detail);
                }
                let (st, prog, mut env) = self.ctx(n);
                st.on_message(prog, &mut env, m);
            }
            Event::Timer(n, t) => {
                let (st, prog, mut env) = self.ctx(n);
                st.on_timer(prog, &mut env, t);
            }
            Event::AppRelease(n, k) => self.core.free_qubit(n, k),
            Event::Control { src, dst, msg } => self.control(src, dst, msg),
        }
    }

    fn attempt(&mut self, l: LinkId) {
        let core = &mut self.core;
        let Some((_, k)) = core.links[l.index()].pending.take() else { return };
        let now = core.now();
        let lr = &mut core.links[l.index()];
        lr.attempts += k;
        lr.next_free = now + lr.period;
        if !core.mux.has_active(l) || !core.links_enabled {
            return;
        }
        let spec = core.topo.link(l).clone();
        let ends = [spec.a, spec.b];
        let room = ends.iter().enumerate().all(|(i, n)| {
            let nr = &core.nodes[n.index()];
            !nr.stores || (nr.used < nr.capacity && core.links[l.index()].used[i] < core.links[l.index()].cap)
        });
        if !room {
            core.links[l.index()].stalls += 1;
            core.kick(l);
            return;
        }
        core.links[l.index()].successes += 1;
        let states = &self.states;
        let buffer = core.mux.discipline == MuxDiscipline::BufferSpace;
        let quotas: Vec<(ConnectionId, [u32; 2])> = if buffer {
            core.mux
                .active_on(l)
                .map(|(c, _)| (c, ends.map(|n| core.mux.quota(n, c).unwrap_or(u32::MAX))))
                .collect()
        } else {
            vec![]
        };
        let conn = core.mux.assign(l, &mut core.rng, |c| {
            if !buffer {
                return true;
            }
            let q = quotas.iter().find(|x| x.0 == c).map_or([u32::MAX; 2], |x| x.1);
            ends.iter().zip(q).all(|(n, q)| (states[n.index()].held_by(c) as u32) < q)
        });
        let minter = spec.architecture.midpoint().unwrap_or(spec.a.min(spec.b));
        let name = core.nodes[minter.index()].minter.mint(minter, now);
        let mut halves = [Half::Gone; 2];
        let mut keys = [QubitKey(0); 2];
        for (i, n) in ends.iter().enumerate() {
            let nr = &mut core.nodes[n.index()];
            let key = QubitKey(nr.next_key);
            nr.next_key += 1;
            if nr.stores {
                nr.used += 1;
                nr.peak = nr.peak.max(nr.used);
                core.links[l.index()].used[i] += 1;
                core.key_link.insert((*n, key), (l, i));
            }
            keys[i] = key;
            halves[i] = Half::Live(*n, key);
        }
        core.new_pair(halves, spec.base_fidelity, conn, name);
        core.acct(conn).raw += 1;
        if core.tracing() {
            let c = conn.map_or("-".to_string(), |c| c.to_string());
            core.trace("PAIR", spec.a, spec.b, &format!("{l} {c} {name}"));
        }
        let rate = DecayRate(core.nodes[spec.a.index()].rate + core.nodes[spec.b.index()].rate);
        let est = core.estimates[l.index()];
        for i in 0..2 {
            let (me, other) = (ends[i], ends[1 - i]);
            let lat = match spec.architecture {
                LinkArchitecture::Direct => core.layers.latency(spec.a, spec.b),
                LinkArchitecture::BsaMidpoint(m) | LinkArchitecture::EppsMidpoint(m) => core.layers.latency(me, m),
            };
            let a = Arrival {
                key: keys[i],
                name,
                partner: other,
                link: Some(l),
                est,
                rate,
                connection: conn,
            };
            core.sched.schedule_in(lat, Event::Arrive(me, a));
        }
        core.kick(l);
    }

    fn start(&mut self, c: ConnectionId) {
        let now = self.core.now();
        let Some(conn) = self.core.conns.get_mut(&c) else { return };
        if matches!(conn.status, ConnStatus::Established | ConnStatus::TornDown) {
            return;
        }
        conn.status = ConnStatus::Pending;
        conn.failure = None;
        conn.attempts += 1;
        conn.torn.clear();
        conn.requested_at.get_or_insert(now);
        let (i, r, req) = (conn.spec.initiator, conn.spec.responder, conn.spec.requirements);
        if self.core.tracing() {
            self.core.trace("START", i, r, &format!("{c}"));
        }
        let Some(network) = self.core.net.common_network(i, r) else {
            self.fail(c, SetupFailure::NoRoute { at: i }, i);
            return;
        };
        let layer = self.core.net.layer(network);
        let route = self.core.layers.route(network, i, r, req.min_fidelity);
        let conn = self.core.conns.get_mut(&c).unwrap();
        conn.network = network;
        conn.layer = layer;
        let Some(route) = route else {
            self.fail(c, SetupFailure::NoRoute { at: i }, i);
            return;
        };
        conn.route = route.nodes;
        conn.edges = route.hops.iter().map(|h| h.edge).collect();
        let mut q = ConnectionRequest::new(c, i, r, req);
        q.layer = layer;
        self.advance_request(i, q);
    }

    /// Outbound pass at node `u`: admit the next hop and forward, or open a
    /// segment connection across a child network.
    fn advance_request(&mut self, u: NodeAddr, mut req: ConnectionRequest) {
        let c = req.id;
        let Some(conn) = self.core.conns.get(&c) else { return };
        if conn.status != ConnStatus::Pending {
            return;
        }
        let Some(idx) = conn.position(u) else {
            self.fail(c, SetupFailure::NoRoute { at: u }, u);
            return;
        };
        if u == conn.spec.responder {
            self.respond(u, req);
            return;
        }
        let next = conn.route[idx + 1];
        let edge = conn.edges[idx];
        let quota = conn.spec.quota;
        let link = match edge {
            EdgeRef::Physical(l) => Some(l),
            EdgeRef::Virtual { .. } => None,
        };
        if let Err(e) = self.core.mux.admit_hop(c, link, [u, next], quota) {
            self.fail(
                c,
                SetupFailure::Refused {
                    at: u,
                    reason: e.to_string(),
                },
                u,
            );
            return;
        }
        match edge {
            EdgeRef::Physical(_) => {
                let info = self.core.layers.hop_info(u, next, edge);
                req.accumulated.push(info);
                req.path.push(next);
                self.core.conns.get_mut(&c).unwrap().request_messages += 1;
                self.core.send_control(u, next, Control::Request(encode_request(&req)));
            }
            EdgeRef::Virtual { network } => {
                let cnet = NetworkId(network);
                let adv = self.core.net.network(cnet).advertised_fidelity;
                let Some(route) = self.core.layers.route(cnet, u, next, adv) else {
                    self.fail(c, SetupFailure::Child(format!("no route across {cnet} from {u}")), u);
                    return;
                };
                let child = ConnectionId(self.core.next_child);
                self.core.next_child += 1;
                let parent = &self.core.conns[&c];
                let mut spec = ConnectionSpec::new(child.0, u, next, adv.value());
                spec.requirements = Requirements {
                    min_fidelity: adv,
                    mode: Mode::Stream,
                };
                spec.weight = parent.spec.weight;
                spec.quota = parent.spec.quota;
                spec.start = self.core.now();
                let mut ch = Conn::new(spec, Some(c));
                ch.network = cnet;
                ch.layer = self.core.net.layer(cnet);
                ch.route = route.nodes;
                ch.edges = route.hops.iter().map(|h| h.edge).collect();
                ch.attempts = 1;
                ch.requested_at = Some(self.core.now());
                let layer = ch.layer;
                self.core.conns.insert(child, ch);
                self.core.conns.get_mut(&c).unwrap().children.push(child);
                let mut creq = ConnectionRequest::new(child, u, next, Requirements {
                    min_fidelity: adv,
                    mode: Mode::Stream,
                });
                creq.layer = layer;
                creq.parent = Some(Box::new(req));
                self.advance_request(u, creq);
            }
        }
    }

    /// Responder: build and check the RuleSets, then start the return pass
    /// or resume the outer request.
    fn respond(&mut self, r: NodeAddr, req: ConnectionRequest) {
        let c = req.id;
        let plan = match generate_rulesets(&req, &GeneratorOptions::default()) {
            Ok(p) => p,
            Err(e) => {
                self.fail(c, SetupFailure::Infeasible(e.to_string()), r);
                return;
            }
        };
        let ordered = plan.ordered();
        if self.core.settings.verify_setup {
            let opts = VerifierOptions {
                explore: false,
                ..VerifierOptions::default()
            };
            let report = verify_rulesets(&ordered, &req.accumulated, &opts);
            if !report.is_clean() {
                let f = &report.findings[0];
                let msg = format!("{:?} at {}: {}", f.kind, f.location, f.detail);
                self.fail(c, SetupFailure::Verification(msg), r);
                return;
            }
        }
        self.core.conns.get_mut(&c).unwrap().hops = req.accumulated.clone();
        let conn = &self.core.conns[&c];
        let bundle = InstallBundle {
            connection: c,
            layer: conn.layer,
            rulesets: ordered.into_iter().rev().collect(),
            resume: None,
        };
        match req.parent {
            Some(parent) => {
                let network = conn.network;
                let u = req.initiator;
                self.core.conns.get_mut(&c).unwrap().held_install = Some(bundle);
                let mut p = *parent;
                let info = self.core.layers.hop_info(u, r, EdgeRef::Virtual { network: network.0 });
                p.accumulated.push(info);
                p.path.push(r);
                if let Some(pc) = self.core.conns.get_mut(&p.id) {
                    pc.request_messages += 1;
                }
                self.advance_request(r, p);
            }
            None => self.core.send_control(r, r, Control::Install(encode_install(&bundle))),
        }
    }

    fn control(&mut self, src: NodeAddr, dst: NodeAddr, msg: Control) {
        match msg {
            Control::Request(b) => match decode_request(&b) {
                Ok(req) => {
                    self.core.check_request_privacy(&req);
                    self.advance_request(dst, req);
                }
                Err(e) => log::warn!("{dst}: undecodable request from {src}: {e}"),
            },
            Control::Install(b) => match decode_install(&b) {
                Ok(bundle) => {
                    self.core.check_bundle_privacy(&bundle);
                    self.install_step(dst, bundle);
                }
                Err(e) => log::warn!("{dst}: undecodable install from {src}: {e}"),
            },
            Control::Reject { connection, reason } => {
                let now = self.core.now();
                let end = self.core.settings.duration;
                let Some(conn) = self.core.conns.get(&connection) else { return };
                if conn.status != ConnStatus::Failed {
                    return;
                }
                if let Some(d) = conn.spec.retry {
                    if now + d < end {
                        self.core.sched.schedule_in(d, Event::Start(connection));
                    }
                }
                log::debug!("{connection} rejected: {reason}");
            }
            Control::Teardown(c) => self.teardown_at(dst, c),
        }
    }

    /// Return pass at node `x`: install the nearest RuleSet and pass the rest on.
    fn install_step(&mut self, x: NodeAddr, mut bundle: InstallBundle) {
        let c = bundle.connection;
        let Some(conn) = self.core.conns.get_mut(&c) else { return };
        if conn.status != ConnStatus::Pending || bundle.rulesets.is_empty() {
            return;
        }
        conn.install_messages += 1;
        let rs = bundle.rulesets.remove(0);
        let Some(idx) = conn.position(x).filter(|_| rs.owner == x) else {
            log::warn!("{x}: install for {c} names owner {}", rs.owner);
            return;
        };
        let (i, r) = (conn.spec.initiator, conn.spec.responder);
        let far_end = if x == i {
            Some(r)
        } else if x == r {
            Some(i)
        } else {
            None
        };
        let splice = conn.parent.filter(|_| x == i || x == r).map(|p| Splice {
            parent: p,
            advertised: conn.spec.requirements.min_fidelity,
        });
        let weight = conn.spec.weight;
        let mut adjacent = vec![];
        if idx > 0 {
            adjacent.push(conn.edges[idx - 1]);
        }
        if idx < conn.edges.len() {
            adjacent.push(conn.edges[idx]);
        }
        self.programs[x.index()].install(Arc::new(rs), far_end, splice);
        for e in adjacent {
            if let EdgeRef::Physical(l) = e {
                let n = self.core.links[l.index()].installs.entry(c).or_default();
                *n += 1;
                if *n == 2 {
                    self.core.mux.activate(l, c, weight);
                    self.core.kick(l);
                }
            }
        }
        if !bundle.rulesets.is_empty() {
            let conn = &self.core.conns[&c];
            let prev = conn.route[idx - 1];
            match conn.edges[idx - 1] {
                EdgeRef::Physical(_) => self.core.send_control(x, prev, Control::Install(encode_install(&bundle))),
                EdgeRef::Virtual { .. } => {
                    let child = conn.children.iter().copied().find(|ch| {
                        let s = &self.core.conns[ch].spec;
                        s.initiator == prev && s.responder == x
                    });
                    let held = child.and_then(|ch| self.core.conns.get_mut(&ch).unwrap().held_install.take());
                    match held {
                        Some(mut h) => {
                            h.resume = Some(Box::new(bundle));
                            self.core.send_control(x, x, Control::Install(encode_install(&h)));
                        }
                        None => self.fail(c, SetupFailure::Child(format!("no segment ready at {x}")), x),
                    }
                }
            }
            return;
        }
        let now = self.core.now();
        let conn = self.core.conns.get_mut(&c).unwrap();
        conn.status = ConnStatus::Established;
        conn.established_at = Some(now);
        if self.core.tracing() {
            self.core.trace("ESTABLISHED", x, x, &format!("{c}"));
        }
        if let Some(resume) = bundle.resume {
            self.core.send_control(x, x, Control::Install(encode_install(&resume)));
        }
    }

    /// Setup failure noticed at `at`: the whole family of connections gives
    /// up and the outermost initiator hears about it.
    fn fail(&mut self, c: ConnectionId, reason: SetupFailure, at: NodeAddr) {
        let mut root = c;
        while let Some(p) = self.core.conns.get(&root).and_then(|x| x.parent) {
            root = p;
        }
        let mut family = vec![root];
        let mut i = 0;
        while i < family.len() {
            family.extend(self.core.conns[&family[i]].children.clone());
            i += 1;
        }
        for f in &family {
            let conn = self.core.conns.get_mut(f).unwrap();
            if conn.status == ConnStatus::Established {
                let ini = conn.spec.initiator;
                self.teardown_at(ini, *f);
            }
            let conn = self.core.conns.get_mut(f).unwrap();
            conn.held_install = None;
            if conn.status == ConnStatus::Pending || *f == root {
                conn.status = ConnStatus::Failed;
            }
            let (route, edges) = (conn.route.clone(), conn.edges.clone());
            self.core.mux.release(*f);
            self.core.idle_links(&route, &edges);
        }
        let msg = if c == root {
            reason.clone()
        } else {
            SetupFailure::Child(reason.to_string())
        };
        let conn = self.core.conns.get_mut(&root).unwrap();
        conn.failure = Some(msg.to_string());
        let ini = conn.spec.initiator;
        self.core.send_control(
            at,
            ini,
            Control::Reject {
                connection: root,
                reason: msg,
            },
        );
    }

    /// Drop `c` at `x` and pass the teardown along the route. Segment
    /// connections starting here go down with it.
    fn teardown_at(&mut self, x: NodeAddr, c: ConnectionId) {
        let Some(conn) = self.core.conns.get_mut(&c) else {
            log::warn!("{x}: teardown for unknown {c}");
            return;
        };
        if !conn.torn.insert(x) {
            return;
        }
        let Some(idx) = conn.position(x) else { return };
        if x == conn.spec.initiator && conn.status != ConnStatus::Failed {
            conn.status = ConnStatus::TornDown;
            let (route, edges) = (conn.route.clone(), conn.edges.clone());
            self.core.mux.release(c);
            self.core.idle_links(&route, &edges);
            for e in edges {
                if let EdgeRef::Physical(l) = e {
                    self.core.links[l.index()].installs.remove(&c);
                }
            }
        }
        if self.programs[x.index()].connections.remove(&c).is_some() {
            let (st, _, mut env) = self.ctx(x);
            st.teardown(&mut env, c);
        }
        let conn = &self.core.conns[&c];
        let kids: Vec<ConnectionId> = conn
            .children
            .iter()
            .copied()
            .filter(|ch| self.core.conns[ch].spec.initiator == x)
            .collect();
        let next = conn.route.get(idx + 1).copied();
        if self.core.tracing() {
            self.core.trace("TEARDOWN", x, x, &format!("{c}"));
        }
        for ch in kids {
            self.teardown_at(x, ch);
        }
        if let Some(n) = next {
            self.core.send_control(x, n, Control::Teardown(c));
        }
    }

    pub fn metrics(&self) -> Metrics {
        let core = &self.core;
        let topo = &core.topo;
        let end = core.now();
        let mut records = vec![Record::Header {
            schema: SCHEMA_VERSION,
            seed: core.settings.seed,
            duration_s: core.settings.duration.as_secs(),
            discipline: core.settings.discipline.to_string(),
            nodes: topo.nodes.len(),
            links: topo.links.len(),
            connections: core.conns.values().filter(|c| c.parent.is_none()).count(),
        }];
        let mut live: BTreeMap<Option<ConnectionId>, u64> = BTreeMap::new();
        for p in core.pairs.values() {
            *live.entry(p.conn.filter(|c| core.conns.contains_key(c))).or_default() += 1;
        }
        let mut balanced = true;
        for (id, c) in &core.conns {
            let mut pairs = c.acct.clone();
            pairs.live = live.get(&Some(*id)).copied().unwrap_or(0);
            balanced &= pairs.balanced();
            let delivered = if c.parent.is_some() { pairs.delivered } else { c.fid_n };
            let pairs_per_s = match c.established_at {
                Some(t) if end > t => delivered as f64 / (end - t).as_secs(),
                _ => 0.0,
            };
            records.push(Record::Connection(ConnectionMetrics {
                id: id.0,
                layer: c.layer,
                parent: c.parent.map(|p| p.0),
                initiator: topo.name(c.spec.initiator).to_string(),
                responder: topo.name(c.spec.responder).to_string(),
                min_fidelity: c.spec.requirements.min_fidelity.value(),
                status: format!("{:?}", c.status).to_lowercase(),
                failure: c.failure.clone(),
                attempts: c.attempts,
                setup_latency_s: c
                    .established_at
                    .zip(c.requested_at)
                    .map(|(e, r)| (e - r).as_secs()),
                delivered,
                pairs_per_s,
                mean_true_fidelity: (c.fid_n > 0).then(|| c.fid_sum / c.fid_n as f64),
                mean_est_fidelity: (c.fid_n > 0 && c.parent.is_none()).then(|| c.est_sum / c.fid_n as f64),
                qber: (c.qber_n > 0).then(|| c.qber_err as f64 / c.qber_n as f64),
                qber_samples: c.qber_n,
                request_messages: c.request_messages,
                install_messages: c.install_messages,
                starvation: core.mux.starvation.get(id).copied().unwrap_or(0),
                pairs,
            }));
        }
        for (i, l) in core.links.iter().enumerate() {
            let s = &topo.links[i];
            records.push(Record::Link(LinkMetrics {
                id: i as u32,
                a: topo.name(s.a).to_string(),
                b: topo.name(s.b).to_string(),
                success_probability: l.p,
                attempts: l.attempts,
                successes: l.successes,
                stalls: l.stalls,
                seconds_per_pair: (l.successes > 0).then(|| l.attempts as f64 * l.period.as_secs() / l.successes as f64),
            }));
        }
        for (i, n) in core.nodes.iter().enumerate() {
            records.push(Record::Node(NodeMetrics {
                id: i as u32,
                name: topo.nodes[i].name.clone(),
                firings: n.firings,
                peak_qubits: n.peak,
                faults: n.faults.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
                notes: n.notes.iter().map(|(k, v)| (format!("{k:?}"), *v)).collect(),
                releases: n.releases.iter().map(|(k, v)| (format!("{k:?}"), *v)).collect(),
            }));
        }
        for (t, f) in &core.faults {
            records.push(Record::Fault {
                at_s: t.as_secs(),
                kind: f.kind.to_string(),
                location: topo.name(f.location).to_string(),
                connection: f.connection.0,
                detail: f.detail.clone(),
            });
        }
        let mut unassigned = core.unassigned.clone();
        unassigned.live = live.get(&None).copied().unwrap_or(0);
        balanced &= unassigned.balanced();
        records.push(Record::Global(GlobalMetrics {
            events: core.sched.executed(),
            end_time_s: end.as_secs(),
            rng_draws: core.rng.draws(),
            faults: core.fault_count,
            privacy_violations: core.privacy_violations,
            unassigned,
            accounting_balanced: balanced,
        }));
        Metrics { records }
    }
}
