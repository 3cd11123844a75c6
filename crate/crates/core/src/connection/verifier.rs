//! Static verification of a connection's RuleSets.
//!
//! Two layers. Structural checks look at the rules alone: validation,
//! matching purification partners, swap pairs that nobody downstream can
//! use, nodes that swap the same pair from both ends, and discard timers
//! that can expire before a TRANSFER could arrive. Then a bounded
//! explicit-state search runs the real engine over every interleaving of
//! pair creation, message delivery within `[0, latency]`, timer expiry and
//! purification outcome, collecting every fault the engine raises.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use serde::Serialize;

use super::LinkInfo;
use crate::engine::{Arrival, Delivery, Env, Fault, FaultKind, NodeState, Program, QubitKey, Release, TimerToken};
use crate::kernel::SimTime;
use crate::link::{ExternalName, NodeType};
use crate::quantum::DecayRate;
use crate::ruleset::{
    validate_ruleset, Action, Basis, Circuit, Condition, PartnerSpec, Pauli, ProtocolMessage, RuleSet,
};
use crate::{ConnectionId, LinkId, NodeAddr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum FindingKind {
    Invalid,
    UnpairedMessage,
    ResourceLeak,
    DiscardRace,
    Leapfrog,
    PurifyMismatch,
    VanishedResource,
    BadCircuit,
    Nontermination,
    FidelityShortfall,
    EngineInvariant,
}

impl From<FaultKind> for FindingKind {
    fn from(k: FaultKind) -> Self {
        match k {
            FaultKind::DiscardRace => FindingKind::DiscardRace,
            FaultKind::Leapfrog => FindingKind::Leapfrog,
            FaultKind::PurifyMismatch => FindingKind::PurifyMismatch,
            FaultKind::VanishedResource => FindingKind::VanishedResource,
            FaultKind::BadCircuit => FindingKind::BadCircuit,
            FaultKind::Nontermination => FindingKind::Nontermination,
            FaultKind::FidelityShortfall => FindingKind::FidelityShortfall,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub location: NodeAddr,
    pub detail: String,
    /// Schedule that reaches the fault, for findings from the search.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub witness: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct VerifierOptions {
    /// Run the explicit-state search after the structural checks.
    pub explore: bool,
    pub max_states: usize,
    /// Pairs each hop may create during the search.
    pub pairs_per_link: u32,
    /// Extra pairs for hops whose RuleSets pump.
    pub pairs_per_pumped_link: u32,
}

impl Default for VerifierOptions {
    fn default() -> Self {
        VerifierOptions {
            explore: true,
            max_states: 200_000,
            pairs_per_link: 1,
            pairs_per_pumped_link: 2,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct VerifierReport {
    pub findings: Vec<Finding>,
    pub states: usize,
    /// The search hit its state bound before exhausting the space.
    pub inconclusive: bool,
    /// Some explored schedule delivered an end-to-end pair.
    pub delivered: bool,
}

impl VerifierReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn has(&self, kind: FindingKind, at: NodeAddr) -> bool {
        self.findings.iter().any(|f| f.kind == kind && f.location == at)
    }

    fn push(&mut self, kind: FindingKind, location: NodeAddr, detail: String) {
        self.push_with(kind, location, detail, Vec::new);
    }

    fn push_with(&mut self, kind: FindingKind, location: NodeAddr, detail: String, witness: impl FnOnce() -> Vec<String>) {
        if !self.findings.iter().any(|f| f.kind == kind && f.location == location) {
            self.findings.push(Finding {
                kind,
                location,
                detail,
                witness: witness(),
            });
        }
    }
}

/// Verify the RuleSets of one connection laid over `hops` (in path order).
pub fn verify_rulesets(rulesets: &[RuleSet], hops: &[LinkInfo], opts: &VerifierOptions) -> VerifierReport {
    let mut report = VerifierReport::default();
    let path = path_of(hops);
    let by_node: BTreeMap<NodeAddr, &RuleSet> = rulesets.iter().map(|r| (r.owner, r)).collect();

    for rs in rulesets {
        for v in validate_ruleset(rs) {
            report.push(FindingKind::Invalid, rs.owner, v.to_string());
        }
    }
    structural(&by_node, &path, hops, &mut report);
    if opts.explore && !path.is_empty() && path.iter().all(|n| by_node.contains_key(n)) {
        explore(&by_node, &path, hops, opts, &mut report);
    }
    report.findings.sort_by_key(|f| (f.kind, f.location));
    report
}

fn path_of(hops: &[LinkInfo]) -> Vec<NodeAddr> {
    let mut p: Vec<NodeAddr> = hops.iter().map(|h| h.a).collect();
    if let Some(h) = hops.last() {
        p.push(h.b);
    }
    p
}

/// One-way latency between two path nodes along the path.
fn path_latency(path: &[NodeAddr], hops: &[LinkInfo], x: NodeAddr, y: NodeAddr) -> Option<SimTime> {
    let i = path.iter().position(|n| *n == x)?;
    let j = path.iter().position(|n| *n == y)?;
    let (i, j) = (i.min(j), i.max(j));
    Some(hops[i..j].iter().fold(SimTime::ZERO, |a, h| a + h.latency))
}

fn res_partners(conds: &[Condition]) -> Vec<PartnerSpec> {
    conds
        .iter()
        .filter_map(|c| match c {
            Condition::Res { partner, count, .. } => Some(std::iter::repeat_n(*partner, *count as usize)),
            _ => None,
        })
        .flatten()
        .collect()
}

fn has_circuit(actions: &[Action], want: Circuit) -> bool {
    actions.iter().any(|a| match a {
        Action::Qcirc { circuit, .. } => {
            *circuit == want || (want == Circuit::Swap && *circuit == Circuit::Bsm)
        }
        _ => false,
    })
}

/// Shortest discard timer: timers that guard a FREE rule.
fn discard_duration(rs: &RuleSet) -> Option<SimTime> {
    let guarded: BTreeSet<_> = rs
        .stages
        .iter()
        .flat_map(|s| &s.rules)
        .filter(|r| r.actions.iter().any(|a| matches!(a, Action::Free { .. })))
        .filter_map(|r| r.timer_condition())
        .collect();
    rs.stages
        .iter()
        .flat_map(|s| &s.rules)
        .flat_map(|r| &r.actions)
        .filter_map(|a| match a {
            Action::SetTimer { timer, duration, .. } if guarded.contains(timer) => Some(*duration),
            _ => None,
        })
        .min()
}

fn swaps_of(rs: &RuleSet) -> Vec<(NodeAddr, NodeAddr)> {
    let mut out = vec![];
    for r in rs.stages.iter().flat_map(|s| &s.rules) {
        if !has_circuit(&r.actions, Circuit::Swap) {
            continue;
        }
        let p = res_partners(&r.conditions);
        if let [PartnerSpec::Node(a), PartnerSpec::Node(b)] = p[..] {
            out.push((a, b));
        }
    }
    out
}

fn accepts(rs: &RuleSet, partner: NodeAddr) -> bool {
    rs.stages
        .iter()
        .flat_map(|s| &s.rules)
        .flat_map(|r| res_partners(&r.conditions))
        .any(|p| p.matches(partner))
}

fn structural(by_node: &BTreeMap<NodeAddr, &RuleSet>, path: &[NodeAddr], hops: &[LinkInfo], report: &mut VerifierReport) {
    // Purification needs the same rule shape at both ends.
    for (node, rs) in by_node {
        for r in rs.stages.iter().flat_map(|s| &s.rules) {
            if !has_circuit(&r.actions, Circuit::PurifyPair) {
                continue;
            }
            for p in res_partners(&r.conditions) {
                let PartnerSpec::Node(p) = p else { continue };
                let mirrored = by_node.get(&p).is_some_and(|other| {
                    other.stages.iter().flat_map(|s| &s.rules).any(|q| {
                        has_circuit(&q.actions, Circuit::PurifyPair)
                            && res_partners(&q.conditions).contains(&PartnerSpec::Node(*node))
                    })
                });
                if !mirrored {
                    report.push(
                        FindingKind::UnpairedMessage,
                        *node,
                        format!("{node} purifies pairs with {p}, which never purifies with {node}"),
                    );
                }
            }
        }
    }

    // Measuring ends hold no qubit; a swap only updates their record.
    let measuring: BTreeSet<NodeAddr> = hops
        .iter()
        .flat_map(|l| [(l.a, l.a_type), (l.b, l.b_type)])
        .filter(|(_, t)| *t == NodeType::Meas)
        .map(|(n, _)| n)
        .collect();
    for (m, rs) in by_node {
        for (l, r) in swaps_of(rs) {
            for (h, far) in [(l, r), (r, l)] {
                let Some(hrs) = by_node.get(&h) else { continue };
                // An intermediate pair is fine if the far end swaps it onward.
                let onward = by_node
                    .get(&far)
                    .is_some_and(|f| swaps_of(f).iter().any(|(x, y)| *x == h || *y == h));
                if !accepts(hrs, far) && !onward && !measuring.contains(&h) {
                    report.push(
                        FindingKind::ResourceLeak,
                        h,
                        format!("{m} hands {h} a pair with {far}, which no rule at {h} consumes"),
                    );
                }
                // Does h also swap its pair with m?
                if swaps_of(hrs).iter().any(|(a, b)| *a == *m || *b == *m) {
                    let at = (*m).min(h);
                    report.push(
                        FindingKind::Leapfrog,
                        at,
                        format!("{m} and {h} may both swap the pair they share"),
                    );
                }
                let Some(dh) = discard_duration(hrs) else { continue };
                let Some(lat) = path_latency(path, hops, *m, h) else { continue };
                match discard_duration(rs) {
                    None => report.push(
                        FindingKind::DiscardRace,
                        h,
                        format!("{h} discards after {dh} but {m} may swap at any age"),
                    ),
                    Some(dm) if dh <= dm + lat => report.push(
                        FindingKind::DiscardRace,
                        h,
                        format!("{h} discards after {dh}; {m} may swap until {dm} plus {lat} in flight"),
                    ),
                    _ => {}
                }
            }
        }
    }
}

/// Pair bookkeeping for the search: which halves belong together and which
/// purification rounds are half done.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
struct Registry {
    owner: BTreeMap<(usize, QubitKey), u64>,
    halves: BTreeMap<u64, [(usize, QubitKey); 2]>,
    next_pair: u64,
    /// (kept pair, sacrificed pair) -> (first node, its bit)
    rounds: BTreeMap<(u64, u64), (usize, u8)>,
}

impl Registry {
    fn create(&mut self, a: (usize, QubitKey), b: (usize, QubitKey)) {
        let id = self.next_pair;
        self.next_pair += 1;
        self.owner.insert(a, id);
        self.owner.insert(b, id);
        self.halves.insert(id, [a, b]);
    }

    fn other(&self, id: u64, me: (usize, QubitKey)) -> Option<(usize, QubitKey)> {
        self.halves.get(&id).map(|h| if h[0] == me { h[1] } else { h[0] })
    }

    fn swap(&mut self, node: usize, l: QubitKey, r: QubitKey) {
        let (Some(pl), Some(pr)) = (self.owner.remove(&(node, l)), self.owner.remove(&(node, r))) else {
            return;
        };
        let (Some(ol), Some(or)) = (self.other(pl, (node, l)), self.other(pr, (node, r))) else {
            return;
        };
        self.halves.remove(&pl);
        self.halves.remove(&pr);
        self.create(ol, or);
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct World {
    now: SimTime,
    nodes: Vec<NodeState>,
    /// FIFO channels: (src, dst) -> (deadline, message)
    channels: BTreeMap<(usize, usize), VecDeque<(SimTime, ProtocolMessage)>>,
    timers: BTreeSet<(SimTime, usize, TimerToken)>,
    budget: Vec<u32>,
    created: Vec<u32>,
    next_key: Vec<u64>,
    minted: Vec<u32>,
    reg: Registry,
}

impl World {
    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.hash(&mut h);
        h.finish()
    }

    fn earliest_deadline(&self) -> SimTime {
        self.channels
            .values()
            .filter_map(|q| q.iter().map(|(d, _)| *d).min())
            .min()
            .unwrap_or(SimTime::MAX)
    }
}

struct Ctx<'a> {
    path: &'a [NodeAddr],
    hops: &'a [LinkInfo],
    programs: Vec<Program>,
    index: BTreeMap<NodeAddr, usize>,
    connection: ConnectionId,
}

struct StepEnv<'a, 'w> {
    ctx: &'a Ctx<'a>,
    world: &'w mut World,
    node: usize,
    choices: &'a [bool],
    used: usize,
    faults: Vec<Fault>,
    delivered: bool,
}

impl Env for StepEnv<'_, '_> {
    fn now(&self) -> SimTime {
        self.world.now
    }

    fn mint_name(&mut self) -> ExternalName {
        let seq = self.world.minted[self.node];
        self.world.minted[self.node] += 1;
        ExternalName {
            timestamp: self.world.now,
            minter: self.ctx.path[self.node],
            seq,
        }
    }

    fn send(&mut self, dst: NodeAddr, msg: ProtocolMessage) {
        let Some(&d) = self.ctx.index.get(&dst) else { return };
        let lat = path_latency(self.ctx.path, self.ctx.hops, self.ctx.path[self.node], dst).unwrap_or(SimTime::ZERO);
        let deadline = self.world.now + lat;
        self.world.channels.entry((self.node, d)).or_default().push_back((deadline, msg));
    }

    fn set_timer(&mut self, at: SimTime, token: TimerToken) {
        if !at.is_max() {
            self.world.timers.insert((at.max(self.world.now), self.node, token));
        }
    }

    fn swap(&mut self, _c: ConnectionId, left: QubitKey, right: QubitKey, _n: ExternalName) -> Pauli {
        self.world.reg.swap(self.node, left, right);
        Pauli::I
    }

    fn purify(&mut self, _c: ConnectionId, kept: QubitKey, sacrificed: QubitKey) -> u8 {
        let reg = &mut self.world.reg;
        let (Some(&pk), Some(&ps)) = (reg.owner.get(&(self.node, kept)), reg.owner.get(&(self.node, sacrificed)))
        else {
            return 0;
        };
        reg.owner.remove(&(self.node, sacrificed));
        match reg.rounds.get(&(pk, ps)).copied() {
            Some((first, bit)) if first != self.node => {
                reg.rounds.remove(&(pk, ps));
                reg.halves.remove(&ps);
                let fail = self.choices.get(self.used).copied().unwrap_or(false);
                self.used += 1;
                bit ^ u8::from(fail)
            }
            _ => {
                reg.rounds.insert((pk, ps), (self.node, 0));
                0
            }
        }
    }

    fn measure(&mut self, _c: ConnectionId, key: QubitKey, basis: Basis) -> Basis {
        self.world.reg.owner.remove(&(self.node, key));
        match basis {
            Basis::Random => Basis::Z,
            b => b,
        }
    }

    fn release(&mut self, key: QubitKey, _why: Release) {
        self.world.reg.owner.remove(&(self.node, key));
    }

    fn deliver(&mut self, _d: Delivery) {
        self.delivered = true;
    }

    fn fault(&mut self, f: Fault) {
        self.faults.push(f);
    }
}

#[derive(Clone, Copy)]
enum Step {
    Create(usize),
    Deliver(usize, usize),
    Timer(SimTime, usize, TimerToken),
}

struct Outcome {
    world: World,
    used: usize,
    faults: Vec<Fault>,
    delivered: bool,
    broken: Option<(usize, String)>,
}

fn apply(ctx: &Ctx, from: &World, step: Step, choices: &[bool]) -> Outcome {
    let mut world = from.clone();
    let mut used = 0;
    let mut faults = vec![];
    let mut delivered = false;
    let mut touched = vec![];
    let mut run = |world: &mut World, node: usize, f: &mut dyn FnMut(&mut NodeState, &Program, &mut dyn Env)| {
        let mut st = std::mem::take(&mut world.nodes[node]);
        let mut env = StepEnv {
            ctx,
            world,
            node,
            choices: &choices[used.min(choices.len())..],
            used: 0,
            faults: vec![],
            delivered: false,
        };
        f(&mut st, &ctx.programs[node], &mut env);
        used += env.used;
        faults.append(&mut env.faults);
        delivered |= env.delivered;
        world.nodes[node] = st;
        touched.push(node);
    };
    match step {
        Step::Create(link) => {
            world.budget[link] -= 1;
            world.created[link] += 1;
            let (a, b) = (link, link + 1);
            let seq = world.minted[a];
            world.minted[a] += 1;
            let name = ExternalName {
                timestamp: world.now,
                minter: ctx.path[a],
                seq,
            };
            let ka = QubitKey(world.next_key[a]);
            let kb = QubitKey(world.next_key[b]);
            world.next_key[a] += 1;
            world.next_key[b] += 1;
            world.reg.create((a, ka), (b, kb));
            let h = &ctx.hops[link];
            for (node, key, partner) in [(a, ka, ctx.path[b]), (b, kb, ctx.path[a])] {
                let arrival = Arrival {
                    key,
                    name,
                    partner,
                    link: Some(LinkId(link as u32)),
                    est: h.base_fidelity,
                    rate: DecayRate::ZERO,
                    connection: Some(ctx.connection),
                };
                run(&mut world, node, &mut |st, p, e| st.on_arrival(p, e, arrival.clone()));
            }
        }
        Step::Deliver(src, dst) => {
            let (_, msg) = world.channels.get_mut(&(src, dst)).unwrap().pop_front().unwrap();
            if world.channels[&(src, dst)].is_empty() {
                world.channels.remove(&(src, dst));
            }
            run(&mut world, dst, &mut |st, p, e| st.on_message(p, e, msg.clone()));
        }
        Step::Timer(at, node, token) => {
            world.timers.remove(&(at, node, token));
            world.now = world.now.max(at);
            run(&mut world, node, &mut |st, p, e| st.on_timer(p, e, token));
        }
    }
    let broken = touched
        .into_iter()
        .find_map(|n| world.nodes[n].check_consistency().err().map(|e| (n, e)));
    Outcome {
        world,
        used,
        faults,
        delivered,
        broken,
    }
}

fn describe(ctx: &Ctx, w: &World, step: Step, choices: &[bool]) -> String {
    let outcome = if choices.is_empty() {
        String::new()
    } else {
        let c: Vec<&str> = choices.iter().map(|f| if *f { "fail" } else { "ok" }).collect();
        format!(" purify {}", c.join(","))
    };
    match step {
        Step::Create(l) => format!("t={} pair on {}-{}{outcome}", w.now, ctx.path[l], ctx.path[l + 1]),
        Step::Deliver(s, d) => {
            let (_, m) = &w.channels[&(s, d)][0];
            format!("t={} {} -> {}: {:?}{outcome}", w.now, ctx.path[s], ctx.path[d], m.body)
        }
        Step::Timer(at, n, t) => format!("t={} timer at {}: {:?}{outcome}", at.max(w.now), ctx.path[n], t),
    }
}

fn enabled(w: &World) -> Vec<Step> {
    let mut out = vec![];
    for (i, b) in w.budget.iter().enumerate() {
        if *b > 0 {
            out.push(Step::Create(i));
        }
    }
    for (src, dst) in w.channels.keys() {
        out.push(Step::Deliver(*src, *dst));
    }
    let deadline = w.earliest_deadline();
    if let Some(&(first, _, _)) = w.timers.iter().next() {
        if first <= deadline {
            for &(at, node, token) in w.timers.iter().take_while(|t| t.0 == first) {
                out.push(Step::Timer(at, node, token));
            }
        }
    }
    out
}

fn explore(
    by_node: &BTreeMap<NodeAddr, &RuleSet>,
    path: &[NodeAddr],
    hops: &[LinkInfo],
    opts: &VerifierOptions,
    report: &mut VerifierReport,
) {
    let connection = by_node[&path[0]].connection;
    let n = path.len();
    let mut programs = vec![];
    for (i, node) in path.iter().enumerate() {
        let mut p = Program::new(*node);
        let ty = if i < hops.len() { hops[i].a_type } else { hops[i - 1].b_type };
        p.measure_only = ty == NodeType::Meas;
        let far_end = match i {
            0 => Some(path[n - 1]),
            _ if i == n - 1 => Some(path[0]),
            _ => None,
        };
        p.install(Arc::new(by_node[node].clone()), far_end, None);
        programs.push(p);
    }
    let pumps = |node: NodeAddr, partner: NodeAddr| {
        by_node[&node].stages.iter().flat_map(|s| &s.rules).any(|r| {
            has_circuit(&r.actions, Circuit::PurifyPair) && res_partners(&r.conditions).contains(&PartnerSpec::Node(partner))
        })
    };
    let budget = (0..hops.len())
        .map(|i| {
            if pumps(path[i], path[i + 1]) {
                opts.pairs_per_pumped_link
            } else {
                opts.pairs_per_link
            }
        })
        .collect();
    let ctx = Ctx {
        path,
        hops,
        programs,
        index: path.iter().enumerate().map(|(i, a)| (*a, i)).collect(),
        connection,
    };
    let start = World {
        now: SimTime::ZERO,
        nodes: vec![NodeState::new(); n],
        channels: BTreeMap::new(),
        timers: BTreeSet::new(),
        budget,
        created: vec![0; hops.len()],
        next_key: vec![0; n],
        minted: vec![0; n],
        reg: Registry::default(),
    };
    let mut seen = HashSet::new();
    seen.insert(start.fingerprint());
    // Parent links for reconstructing witnesses.
    let mut trail: Vec<(usize, String)> = vec![(usize::MAX, String::new())];
    let witness = |trail: &Vec<(usize, String)>, mut at: usize, last: String| {
        let mut out = vec![last];
        while at != 0 && at != usize::MAX {
            out.push(trail[at].1.clone());
            at = trail[at].0;
        }
        out.reverse();
        out
    };
    let mut stack = vec![(start, 0usize)];
    while let Some((w, here)) = stack.pop() {
        report.states += 1;
        if report.states >= opts.max_states {
            report.inconclusive = true;
            break;
        }
        for step in enabled(&w) {
            let mut pending = vec![vec![]];
            while let Some(choices) = pending.pop() {
                let o = apply(&ctx, &w, step, &choices);
                if o.used > choices.len() {
                    let mut a = choices.clone();
                    a.push(false);
                    let mut b = choices;
                    b.push(true);
                    pending.push(a);
                    pending.push(b);
                    continue;
                }
                let label = describe(&ctx, &w, step, &choices);
                for f in o.faults {
                    report.push_with(f.kind.into(), f.location, f.detail, || witness(&trail, here, label.clone()));
                }
                if let Some((node, e)) = o.broken {
                    report.push_with(FindingKind::EngineInvariant, path[node], e, || {
                        witness(&trail, here, label.clone())
                    });
                }
                report.delivered |= o.delivered;
                if seen.insert(o.world.fingerprint()) {
                    trail.push((here, label));
                    stack.push((o.world, trail.len() - 1));
                }
            }
        }
    }
}

/// Deliberate breakages used to exercise the verifier.
pub mod mutate {
    use super::*;

    /// Replace every discard timer duration in `rs`.
    pub fn set_discard_timer(rs: &mut RuleSet, duration: SimTime) {
        let guarded: BTreeSet<_> = rs
            .stages
            .iter()
            .flat_map(|s| &s.rules)
            .filter(|r| r.actions.iter().any(|a| matches!(a, Action::Free { .. })))
            .filter_map(|r| r.timer_condition())
            .collect();
        for a in rs.stages.iter_mut().flat_map(|s| s.rules.iter_mut()).flat_map(|r| r.actions.iter_mut()) {
            if let Action::SetTimer { timer, duration: d, .. } = a {
                if guarded.contains(timer) {
                    *d = duration;
                }
            }
        }
    }

    /// Make every interior node swap its two link pairs as soon as both
    /// exist, ignoring the tree.
    pub fn greedy_swaps(rulesets: &mut [RuleSet], path: &[NodeAddr]) {
        for i in 1..path.len().saturating_sub(1) {
            let Some(rs) = rulesets.iter_mut().find(|r| r.owner == path[i]) else { continue };
            for r in rs.stages.iter_mut().flat_map(|s| s.rules.iter_mut()) {
                if !has_circuit(&r.actions, Circuit::Swap) {
                    continue;
                }
                let mut sides = [path[i - 1], path[i + 1]].into_iter();
                for c in r.conditions.iter_mut() {
                    if let Condition::Res { partner, .. } = c {
                        if let Some(p) = sides.next() {
                            *partner = PartnerSpec::Node(p);
                        }
                    }
                }
            }
        }
    }
}
