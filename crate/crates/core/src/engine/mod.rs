//! Per-node RuleSet executor.
//!
//! A node's mutable state ([`NodeState`]) is plain data. Everything the node
//! does to the outside world (messages, timers, quantum operations, delivery)
//! goes through [`Env`], so the simulator and the verifier drive exactly the
//! same code.
//!
//! Installed RuleSets live in a separate [`Program`] that only changes on
//! install and teardown.

mod exec;
#[cfg(test)]
mod tests;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::kernel::SimTime;
use crate::link::ExternalName;
use crate::quantum::{decohere_by_rate, DecayRate};
use crate::ruleset::{
    Basis, MessageBody, Pauli, ProtocolMessage, RuleSet, TimerId, Value, VarId,
};
use crate::{ConnectionId, Fidelity, LinkId, NodeAddr};

/// Opaque handle for one local memory qubit, assigned by whoever created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct QubitKey(pub u64);

impl fmt::Display for QubitKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q{}", self.0)
    }
}

/// Local bookkeeping for a purification round awaiting the partner's bit.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PendingPurify {
    pub sacrificed: ExternalName,
    pub round: u32,
    pub bit: u8,
    pub est_success: Fidelity,
    pub at: SimTime,
}

/// This node's half of a Bell pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Resource {
    pub key: QubitKey,
    pub name: ExternalName,
    pub partner: NodeAddr,
    pub link: Option<LinkId>,
    /// Estimated fidelity as of `est_ref`.
    pub est: Fidelity,
    pub est_ref: SimTime,
    /// Depolarizing rate of the whole pair (both halves).
    pub rate: DecayRate,
    /// Creation time of the underlying link pair. Both holders agree on it.
    pub birth: SimTime,
    pub frame: Pauli,
    pub owner: Option<(ConnectionId, u16)>,
    /// Purification rounds survived.
    pub rounds: u32,
    pub pending: Option<PendingPurify>,
}

impl Resource {
    pub fn est_at(&self, now: SimTime) -> Fidelity {
        decohere_by_rate(self.est, (now - self.est_ref).as_secs(), self.rate.0)
    }

    fn order_key(&self) -> (SimTime, ExternalName, QubitKey) {
        (self.birth, self.name, self.key)
    }
}

/// A freshly heralded link pair handed to a node.
#[derive(Debug, Clone, PartialEq)]
pub struct Arrival {
    pub key: QubitKey,
    pub name: ExternalName,
    pub partner: NodeAddr,
    pub link: Option<LinkId>,
    pub est: Fidelity,
    pub rate: DecayRate,
    pub connection: Option<ConnectionId>,
}

/// Classical record left behind by measuring a pair half.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MeasRecord {
    pub name: ExternalName,
    pub partner: NodeAddr,
    pub connection: ConnectionId,
    pub basis: Basis,
    pub at: SimTime,
}

/// What happened to a name this node no longer holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tombstone {
    Freed,
    Swapped {
        new_name: ExternalName,
        /// The new pair's end on the far side of the pair this name denoted.
        other_end: NodeAddr,
    },
    /// Sacrificed in purification.
    Consumed,
    Delivered,
    Renamed { new_name: ExternalName },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimerSlot {
    pub connection: ConnectionId,
    pub stage: u16,
    pub timer: TimerId,
    pub resource: Option<QubitKey>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct TimerEntry {
    expiry: SimTime,
    duration: SimTime,
    age: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TimerToken {
    Rule(TimerSlot),
    /// Unassigned pair staleness check.
    Stale(QubitKey),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum FaultKind {
    DiscardRace,
    Leapfrog,
    PurifyMismatch,
    VanishedResource,
    BadCircuit,
    Nontermination,
    FidelityShortfall,
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fault {
    pub kind: FaultKind,
    /// Node whose behaviour caused the fault (not always the reporter).
    pub location: NodeAddr,
    pub connection: ConnectionId,
    pub detail: String,
}

/// Why a qubit went back to the free pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Release {
    Discarded,
    RemoteFree,
    PurifyFailed,
    Teardown,
    Stale,
    Unassigned,
    Fault,
}

/// Non-fault events worth counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Note {
    /// Message for a connection this node does not run.
    Orphan,
    /// FREE arrived for a pair already handed to the application.
    Revoked,
    /// Message about a name this node dropped on purpose.
    Stale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub connection: ConnectionId,
    pub name: ExternalName,
    pub partner: NodeAddr,
    /// `None` for measured halves, which only leave a classical record.
    pub key: Option<QubitKey>,
    pub est: Fidelity,
    pub basis: Option<Basis>,
    pub frame: Pauli,
}

pub trait Env {
    fn now(&self) -> SimTime;
    fn mint_name(&mut self) -> ExternalName;
    fn send(&mut self, dst: NodeAddr, msg: ProtocolMessage);
    /// Ask to be woken with `token` at `at` (or now, if `at` has passed).
    fn set_timer(&mut self, at: SimTime, token: TimerToken);
    /// Bell-state measurement on two local qubits. Both are consumed.
    fn swap(
        &mut self,
        connection: ConnectionId,
        left: QubitKey,
        right: QubitKey,
        new_name: ExternalName,
    ) -> Pauli;
    /// Local half of a purification round. The sacrificed qubit is consumed;
    /// returns the local parity bit.
    fn purify(&mut self, connection: ConnectionId, kept: QubitKey, sacrificed: QubitKey) -> u8;
    /// Measure and consume a qubit; returns the basis actually used.
    fn measure(&mut self, connection: ConnectionId, key: QubitKey, basis: Basis) -> Basis;
    fn release(&mut self, key: QubitKey, why: Release);
    fn deliver(&mut self, d: Delivery);
    fn fault(&mut self, f: Fault);
    fn note(&mut self, _n: Note, _connection: ConnectionId) {}
    fn fired(&mut self, _connection: ConnectionId, _stage: u16, _rule: u16) {}
    /// A child connection's end-to-end pair was handed to its parent.
    fn spliced(&mut self, _child: ConnectionId, _parent: ConnectionId, _key: QubitKey) {}
}

/// Border glue: deliveries of this connection feed a parent connection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splice {
    pub parent: ConnectionId,
    pub advertised: Fidelity,
}

#[derive(Debug, Clone)]
pub struct Installed {
    pub ruleset: Arc<RuleSet>,
    /// The other end of the connection when this node is an end.
    pub far_end: Option<NodeAddr>,
    pub splice: Option<Splice>,
}

/// Static per-node configuration plus installed RuleSets.
#[derive(Debug, Clone)]
pub struct Program {
    pub node: NodeAddr,
    /// This node's memory depolarizing rate.
    pub decay: DecayRate,
    /// Node cannot store qubits (measures on arrival).
    pub measure_only: bool,
    pub tombstone_ttl: SimTime,
    pub stale_after: SimTime,
    /// Rule firings allowed per external trigger.
    pub max_firings: usize,
    pub connections: BTreeMap<ConnectionId, Installed>,
}

impl Program {
    pub fn new(node: NodeAddr) -> Self {
        Program {
            node,
            decay: DecayRate::ZERO,
            measure_only: false,
            tombstone_ttl: SimTime::MAX,
            stale_after: SimTime::MAX,
            max_firings: 100_000,
            connections: BTreeMap::new(),
        }
    }

    pub fn install(&mut self, rs: Arc<RuleSet>, far_end: Option<NodeAddr>, splice: Option<Splice>) {
        self.connections.insert(
            rs.connection,
            Installed {
                ruleset: rs,
                far_end,
                splice,
            },
        );
    }
}

/// Scratch state for one external trigger.
#[derive(Default)]
struct Work {
    dirty: BTreeSet<(ConnectionId, u16)>,
    token: Option<TimerSlot>,
    firings: usize,
    aborted: bool,
    /// Names whose parked messages became applicable mid-fixpoint.
    replay: Vec<ExternalName>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct NodeState {
    pool: BTreeMap<QubitKey, Resource>,
    names: BTreeMap<ExternalName, QubitKey>,
    index: BTreeMap<(ConnectionId, u16), BTreeSet<(SimTime, ExternalName, QubitKey)>>,
    records: BTreeMap<ExternalName, MeasRecord>,
    vars: BTreeMap<(ConnectionId, u16, VarId), Value>,
    timers: BTreeMap<TimerSlot, TimerEntry>,
    tombstones: BTreeMap<ExternalName, (SimTime, Tombstone)>,
    early: BTreeMap<ExternalName, Vec<(SimTime, ProtocolMessage)>>,
    meas_early: BTreeMap<(ExternalName, u32), (SimTime, ConnectionId, ExternalName, u8)>,
    next_prune: SimTime,
}

impl NodeState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn resources(&self) -> impl Iterator<Item = &Resource> {
        self.pool.values()
    }

    pub fn resource(&self, key: QubitKey) -> Option<&Resource> {
        self.pool.get(&key)
    }

    pub fn by_name(&self, name: ExternalName) -> Option<&Resource> {
        self.names.get(&name).and_then(|k| self.pool.get(k))
    }

    pub fn records(&self) -> impl Iterator<Item = &MeasRecord> {
        self.records.values()
    }

    pub fn tombstone(&self, name: ExternalName) -> Option<Tombstone> {
        self.tombstones.get(&name).map(|t| t.1)
    }

    pub fn tombstones(&self) -> impl Iterator<Item = (ExternalName, Tombstone)> + '_ {
        self.tombstones.iter().map(|(n, (_, t))| (*n, *t))
    }

    /// Messages parked until a name shows up.
    pub fn early_messages(&self) -> impl Iterator<Item = &ProtocolMessage> {
        self.early
            .values()
            .flat_map(|v| v.iter().map(|(_, m)| m))
    }

    pub fn early_meas_results(&self) -> usize {
        self.meas_early.len()
    }

    pub fn pending_timers(&self) -> impl Iterator<Item = (TimerSlot, SimTime)> + '_ {
        self.timers.iter().map(|(s, e)| (*s, e.expiry))
    }

    pub fn var(&self, conn: ConnectionId, stage: u16, var: VarId) -> Option<Value> {
        self.vars.get(&(conn, stage, var)).copied()
    }

    /// Resources and records still tied to `conn`.
    pub fn held_by(&self, conn: ConnectionId) -> usize {
        self.pool
            .values()
            .filter(|r| r.owner.map(|o| o.0) == Some(conn))
            .count()
            + self.records.values().filter(|r| r.connection == conn).count()
    }

    /// Internal tables agree with each other.
    pub fn check_consistency(&self) -> Result<(), String> {
        if self.names.len() != self.pool.len() {
            return Err(format!(
                "name index has {} entries for {} resources",
                self.names.len(),
                self.pool.len()
            ));
        }
        for (k, r) in &self.pool {
            if self.names.get(&r.name) != Some(k) {
                return Err(format!("{} not indexed by name", r.name));
            }
            if let Some(o) = r.owner {
                if !self.index.get(&o).is_some_and(|s| s.contains(&r.order_key())) {
                    return Err(format!("{} missing from stage index", r.name));
                }
            }
        }
        let indexed: usize = self.index.values().map(|s| s.len()).sum();
        let owned = self.pool.values().filter(|r| r.owner.is_some()).count();
        if indexed != owned {
            return Err(format!("stage index has {indexed} entries for {owned} owned"));
        }
        Ok(())
    }

    fn insert(&mut self, r: Resource) {
        self.names.insert(r.name, r.key);
        if let Some(o) = r.owner {
            self.index.entry(o).or_default().insert(r.order_key());
        }
        self.pool.insert(r.key, r);
    }

    /// Remove a resource and every timer bound to it.
    fn take(&mut self, key: QubitKey) -> Option<Resource> {
        let r = self.pool.remove(&key)?;
        self.names.remove(&r.name);
        if let Some(o) = r.owner {
            if let Some(s) = self.index.get_mut(&o) {
                s.remove(&r.order_key());
                if s.is_empty() {
                    self.index.remove(&o);
                }
            }
        }
        self.cancel_bound_timers(key);
        Some(r)
    }

    fn cancel_bound_timers(&mut self, key: QubitKey) {
        self.timers.retain(|s, _| s.resource != Some(key));
    }

    fn bury(&mut self, name: ExternalName, now: SimTime, t: Tombstone) {
        self.tombstones.insert(name, (now, t));
    }

    fn prune(&mut self, prog: &Program, now: SimTime) {
        if now < self.next_prune {
            return;
        }
        let cutoff = now - prog.tombstone_ttl;
        self.tombstones.retain(|_, (at, _)| *at >= cutoff);
        self.early.retain(|_, v| {
            v.retain(|(at, _)| *at >= cutoff);
            !v.is_empty()
        });
        self.meas_early.retain(|_, v| v.0 >= cutoff);
        self.next_prune = now.saturating_add(prog.tombstone_ttl);
    }

    pub fn on_arrival(&mut self, prog: &Program, env: &mut dyn Env, a: Arrival) {
        let now = env.now();
        self.prune(prog, now);
        let owner = a
            .connection
            .filter(|c| prog.connections.contains_key(c))
            .map(|c| (c, 0u16));
        if owner.is_none() && prog.measure_only {
            env.release(a.key, Release::Unassigned);
            return;
        }
        let r = Resource {
            key: a.key,
            name: a.name,
            partner: a.partner,
            link: a.link,
            est: a.est,
            est_ref: a.name.timestamp,
            rate: a.rate,
            birth: a.name.timestamp,
            frame: Pauli::I,
            owner,
            rounds: 0,
            pending: None,
        };
        self.insert(r);
        let mut w = Work::default();
        match owner {
            None => {
                if !prog.stale_after.is_max() {
                    env.set_timer(now.saturating_add(prog.stale_after), TimerToken::Stale(a.key));
                }
            }
            Some(o) => {
                w.dirty.insert(o);
            }
        }
        // Let stage 0 settle before applying anything that raced ahead of
        // the herald, so a parked TRANSFER finds the pair where its sender
        // expects it.
        self.fixpoint(prog, env, &mut w);
        self.replay_early(prog, env, &mut w, a.name);
        self.fixpoint(prog, env, &mut w);
    }

    pub fn on_message(&mut self, prog: &Program, env: &mut dyn Env, msg: ProtocolMessage) {
        let now = env.now();
        self.prune(prog, now);
        if !prog.connections.contains_key(&msg.connection) {
            env.note(Note::Orphan, msg.connection);
            return;
        }
        let mut w = Work::default();
        self.handle(prog, env, &mut w, msg);
        self.fixpoint(prog, env, &mut w);
    }

    pub fn on_timer(&mut self, prog: &Program, env: &mut dyn Env, token: TimerToken) {
        let now = env.now();
        self.prune(prog, now);
        let mut w = Work::default();
        match token {
            TimerToken::Stale(key) => {
                if self.pool.get(&key).is_some_and(|r| r.owner.is_none()) {
                    let r = self.take(key).unwrap();
                    env.release(key, Release::Stale);
                    self.bury(r.name, now, Tombstone::Freed);
                }
            }
            TimerToken::Rule(slot) => {
                let Some(e) = self.timers.get(&slot) else { return };
                if e.expiry > now {
                    return;
                }
                self.timers.remove(&slot);
                w.token = Some(slot);
                w.dirty.insert((slot.connection, slot.stage));
            }
        }
        self.fixpoint(prog, env, &mut w);
    }

    /// Drop everything tied to `conn`. No messages are sent: every node on
    /// the path receives its own teardown.
    pub fn teardown(&mut self, env: &mut dyn Env, conn: ConnectionId) {
        let now = env.now();
        let keys: Vec<QubitKey> = self
            .pool
            .values()
            .filter(|r| r.owner.map(|o| o.0) == Some(conn))
            .map(|r| r.key)
            .collect();
        for k in keys {
            let r = self.take(k).unwrap();
            env.release(k, Release::Teardown);
            self.bury(r.name, now, Tombstone::Freed);
        }
        let recs: Vec<ExternalName> = self
            .records
            .values()
            .filter(|r| r.connection == conn)
            .map(|r| r.name)
            .collect();
        for n in recs {
            self.records.remove(&n);
            self.bury(n, now, Tombstone::Freed);
        }
        self.timers.retain(|s, _| s.connection != conn);
        self.vars.retain(|k, _| k.0 != conn);
        self.early.retain(|_, v| {
            v.retain(|(_, m)| m.connection != conn);
            !v.is_empty()
        });
        self.meas_early.retain(|_, v| v.1 != conn);
    }

    fn replay_early(&mut self, prog: &Program, env: &mut dyn Env, w: &mut Work, name: ExternalName) {
        if let Some(msgs) = self.early.remove(&name) {
            for (_, m) in msgs {
                self.handle(prog, env, w, m);
            }
        }
    }

    fn park(&mut self, now: SimTime, msg: ProtocolMessage) {
        self.early
            .entry(msg.body.subject())
            .or_default()
            .push((now, msg));
    }

    fn handle(&mut self, prog: &Program, env: &mut dyn Env, w: &mut Work, msg: ProtocolMessage) {
        let now = env.now();
        let conn = msg.connection;
        match msg.body {
            MessageBody::Transfer {
                old_name,
                new_name,
                new_partner,
                correction,
                est_fidelity,
                rate,
            } => {
                let foreign = self.names.get(&old_name).is_some_and(|k| self.pool[k].owner.is_some_and(|o| o.0 != conn));
                if foreign {
                    // Still held by a segment connection that has not handed
                    // it over yet.
                    self.park(
                        now,
                        ProtocolMessage {
                            connection: conn,
                            sender: msg.sender,
                            body: MessageBody::Transfer {
                                old_name,
                                new_name,
                                new_partner,
                                correction,
                                est_fidelity,
                                rate,
                            },
                        },
                    );
                } else if let Some(&key) = self.names.get(&old_name) {
                    let mut r = self.take_keep_timers(key);
                    r.name = new_name;
                    r.partner = new_partner;
                    r.est = est_fidelity;
                    r.est_ref = new_name.timestamp;
                    r.rate = rate;
                    r.frame = r.frame.compose(correction.unwrap_or(Pauli::I));
                    let owner = r.owner;
                    self.insert(r);
                    self.bury(old_name, now, Tombstone::Renamed { new_name });
                    let age: Vec<(TimerSlot, TimerEntry)> = self
                        .timers
                        .iter()
                        .filter(|(s, e)| s.resource == Some(key) && e.age)
                        .map(|(s, e)| (*s, *e))
                        .collect();
                    for (s, mut e) in age {
                        e.expiry = new_name.timestamp.saturating_add(e.duration);
                        self.timers.insert(s, e);
                        env.set_timer(e.expiry, TimerToken::Rule(s));
                    }
                    if let Some(o) = owner {
                        w.dirty.insert(o);
                    }
                    self.replay_early(prog, env, w, new_name);
                } else if let Some(mut rec) = self.records.remove(&old_name) {
                    rec.name = new_name;
                    rec.partner = new_partner;
                    self.bury(old_name, now, Tombstone::Renamed { new_name });
                    self.settle_record(prog, env, rec, correction.unwrap_or(Pauli::I), est_fidelity);
                    self.replay_early(prog, env, w, new_name);
                } else {
                    let kind = match self.tombstone(old_name) {
                        None => {
                            self.park(
                                now,
                                ProtocolMessage {
                                    connection: conn,
                                    sender: msg.sender,
                                    body: MessageBody::Transfer {
                                        old_name,
                                        new_name,
                                        new_partner,
                                        correction,
                                        est_fidelity,
                                        rate,
                                    },
                                },
                            );
                            return;
                        }
                        Some(Tombstone::Freed) => FaultKind::DiscardRace,
                        Some(_) => FaultKind::Leapfrog,
                    };
                    env.fault(Fault {
                        kind,
                        location: prog.node,
                        connection: conn,
                        detail: format!(
                            "TRANSFER from {} renames {} to {} but it is gone here",
                            msg.sender, old_name, new_name
                        ),
                    });
                    env.send(
                        new_partner,
                        ProtocolMessage {
                            connection: conn,
                            sender: prog.node,
                            body: MessageBody::Free { name: new_name },
                        },
                    );
                }
            }
            MessageBody::Free { name } => {
                if let Some(&key) = self.names.get(&name) {
                    self.take(key);
                    env.release(key, Release::RemoteFree);
                    self.bury(name, now, Tombstone::Freed);
                } else if self.records.remove(&name).is_some() {
                    self.bury(name, now, Tombstone::Freed);
                } else {
                    match self.tombstone(name) {
                        None => self.park(now, ProtocolMessage { connection: conn, sender: msg.sender, body: MessageBody::Free { name } }),
                        Some(Tombstone::Swapped { new_name, other_end }) => {
                            env.fault(Fault {
                                kind: FaultKind::DiscardRace,
                                location: msg.sender,
                                connection: conn,
                                detail: format!(
                                    "{} freed {} after {} swapped it into {}",
                                    msg.sender, name, prog.node, new_name
                                ),
                            });
                            env.send(
                                other_end,
                                ProtocolMessage {
                                    connection: conn,
                                    sender: prog.node,
                                    body: MessageBody::Free { name: new_name },
                                },
                            );
                        }
                        Some(Tombstone::Delivered) => env.note(Note::Revoked, conn),
                        Some(_) => env.note(Note::Stale, conn),
                    }
                }
            }
            MessageBody::Update { name, correction } => {
                if let Some(&key) = self.names.get(&name) {
                    let r = self.pool.get_mut(&key).unwrap();
                    r.frame = r.frame.compose(correction);
                } else if self.tombstone(name).is_none() && !self.records.contains_key(&name) {
                    self.park(now, ProtocolMessage { connection: conn, sender: msg.sender, body: MessageBody::Update { name, correction } });
                }
            }
            MessageBody::MeasResult {
                kept,
                sacrificed,
                round,
                outcome,
            } => {
                if round == u32::MAX {
                    return;
                }
                let waiting = self
                    .names
                    .get(&kept)
                    .and_then(|k| self.pool.get(k))
                    .and_then(|r| r.pending.as_ref())
                    .is_some_and(|p| p.round == round);
                if waiting {
                    let key = self.names[&kept];
                    self.resolve(prog, env, w, key, conn, sacrificed, outcome);
                } else if self.names.contains_key(&kept) || self.tombstone(kept).is_none() {
                    self.meas_early
                        .insert((kept, round), (now, conn, sacrificed, outcome));
                } else {
                    env.note(Note::Stale, conn);
                }
            }
        }
    }

    /// Like [`NodeState::take`] but leaves bound timers in place (rename).
    fn take_keep_timers(&mut self, key: QubitKey) -> Resource {
        let r = self.pool.remove(&key).unwrap();
        self.names.remove(&r.name);
        if let Some(o) = r.owner {
            if let Some(s) = self.index.get_mut(&o) {
                s.remove(&r.order_key());
                if s.is_empty() {
                    self.index.remove(&o);
                }
            }
        }
        r
    }

    #[allow(clippy::too_many_arguments)]
    fn resolve(
        &mut self,
        prog: &Program,
        env: &mut dyn Env,
        w: &mut Work,
        key: QubitKey,
        conn: ConnectionId,
        their_sacrificed: ExternalName,
        their_bit: u8,
    ) {
        let now = env.now();
        let r = self.pool.get_mut(&key).unwrap();
        let p = r.pending.take().unwrap();
        let name = r.name;
        if p.sacrificed != their_sacrificed {
            env.fault(Fault {
                kind: FaultKind::PurifyMismatch,
                location: prog.node,
                connection: conn,
                detail: format!(
                    "round {} on {}: sacrificed {} here, {} at partner",
                    p.round, name, p.sacrificed, their_sacrificed
                ),
            });
            self.take(key);
            env.release(key, Release::Fault);
            self.bury(name, now, Tombstone::Freed);
        } else if (p.bit ^ their_bit) & 1 == 0 {
            r.est = p.est_success;
            r.est_ref = p.at;
            r.rounds = p.round;
            if let Some(o) = r.owner {
                w.dirty.insert(o);
            }
        } else {
            self.take(key);
            env.release(key, Release::PurifyFailed);
            self.bury(name, now, Tombstone::Freed);
        }
    }

    /// A measured half's record is complete once its partner is the far end.
    fn settle_record(
        &mut self,
        prog: &Program,
        env: &mut dyn Env,
        rec: MeasRecord,
        frame: Pauli,
        est: Fidelity,
    ) {
        let far = prog
            .connections
            .get(&rec.connection)
            .and_then(|i| i.far_end);
        if far == Some(rec.partner) {
            self.bury(rec.name, env.now(), Tombstone::Delivered);
            env.deliver(Delivery {
                connection: rec.connection,
                name: rec.name,
                partner: rec.partner,
                key: None,
                est,
                basis: Some(rec.basis),
                frame,
            });
        } else {
            self.records.insert(rec.name, rec);
        }
    }
}
