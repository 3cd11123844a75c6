//! Rule matching and action execution.

use super::*;
use crate::quantum::{purify_outcome, swap_fidelity};
use crate::ruleset::{
    Action, Circuit, Condition, Destination, MessageKind, Rule, Stage, TimerAnchor, VarUpdate,
};

/// One resource picked by a rule, as seen at match time.
#[derive(Debug, Clone, Copy)]
struct Picked {
    key: QubitKey,
    name: ExternalName,
    partner: NodeAddr,
    est: Fidelity,
    rate: DecayRate,
    frame: Pauli,
}

impl NodeState {
    pub(super) fn fixpoint(&mut self, prog: &Program, env: &mut dyn Env, w: &mut Work) {
        loop {
            if w.aborted {
                break;
            }
            if let Some(name) = w.replay.pop() {
                self.replay_early(prog, env, w, name);
                continue;
            }
            let Some((conn, stage)) = w.dirty.pop_first() else { break };
            let Some(inst) = prog.connections.get(&conn) else { continue };
            let rs = inst.ruleset.clone();
            let Some(st) = rs.stage(stage) else { continue };
            let mut fired = false;
            for rule in &st.rules {
                let Some(picked) = self.match_rule(env.now(), conn, st, rule, w.token) else {
                    continue;
                };
                w.firings += 1;
                if w.firings > prog.max_firings {
                    env.fault(Fault {
                        kind: FaultKind::Nontermination,
                        location: prog.node,
                        connection: conn,
                        detail: format!(
                            "more than {} rule firings for one event (stage {stage}, rule {})",
                            prog.max_firings, rule.id
                        ),
                    });
                    w.aborted = true;
                    w.dirty.clear();
                    return;
                }
                if rule.timer_condition().is_some() {
                    w.token = None;
                }
                env.fired(conn, stage, rule.id);
                self.execute(prog, env, w, conn, stage, rule, &picked);
                w.dirty.insert((conn, stage));
                fired = true;
                break;
            }
            if !fired && w.token.is_some_and(|t| t.connection == conn && t.stage == stage) {
                w.token = None;
            }
        }
    }

    fn match_rule(
        &self,
        now: SimTime,
        conn: ConnectionId,
        st: &Stage,
        rule: &Rule,
        token: Option<TimerSlot>,
    ) -> Option<Vec<Picked>> {
        let mut forced = None;
        for c in &rule.conditions {
            match c {
                Condition::Cmp { var, op, value } => {
                    let cur = self.vars.get(&(conn, st.id, *var)).copied().or_else(|| {
                        st.variables.iter().find(|d| d.id == *var).map(|d| d.init)
                    })?;
                    if !op.holds(cur, *value) {
                        return None;
                    }
                }
                Condition::Timer { timer } => {
                    let t = token?;
                    if t.connection != conn || t.stage != st.id || t.timer != *timer {
                        return None;
                    }
                    forced = t.resource;
                }
                Condition::Res { .. } => {}
            }
        }
        // A pair whose age timer has run out belongs to that timer's rules.
        let expired: BTreeSet<QubitKey> = self
            .timers
            .iter()
            .filter(|(s, e)| s.connection == conn && e.expiry <= now)
            .map(|(s, _)| s)
            .chain(token.as_ref())
            .filter_map(|s| s.resource)
            .collect();
        let candidates: Vec<&Resource> = match self.index.get(&(conn, st.id)) {
            Some(set) => set
                .iter()
                .map(|(_, _, k)| &self.pool[k])
                .filter(|r| r.pending.is_none())
                .filter(|r| Some(r.key) == forced || !expired.contains(&r.key))
                .collect(),
            None => vec![],
        };
        let mut picked: Vec<Picked> = vec![];
        let mut forced_used = forced.is_none();
        for c in &rule.conditions {
            let Condition::Res {
                partner,
                min_fidelity,
                count,
            } = c
            else {
                continue;
            };
            let ok = |r: &Resource, picked: &[Picked]| {
                partner.matches(r.partner)
                    && r.est_at(now) >= *min_fidelity
                    && !picked.iter().any(|p| p.key == r.key)
            };
            let mut need = *count as usize;
            if !forced_used {
                if let Some(f) = candidates.iter().find(|r| Some(r.key) == forced) {
                    if ok(f, &picked) {
                        picked.push(pick(f, now));
                        forced_used = true;
                        need -= 1;
                    }
                }
            }
            for r in &candidates {
                if need == 0 {
                    break;
                }
                if ok(r, &picked) {
                    picked.push(pick(r, now));
                    need -= 1;
                }
            }
            if need > 0 {
                return None;
            }
        }
        if !forced_used {
            return None;
        }
        Some(picked)
    }

    #[allow(clippy::too_many_arguments)]
    fn execute(
        &mut self,
        prog: &Program,
        env: &mut dyn Env,
        w: &mut Work,
        conn: ConnectionId,
        stage: u16,
        rule: &Rule,
        picked: &[Picked],
    ) {
        let now = env.now();
        let mut out: Vec<Option<MessageBody>> = vec![None; picked.len()];
        let mut purified: Vec<(ExternalName, u32)> = vec![];
        let vanished = |env: &mut dyn Env, what: &str| {
            env.fault(Fault {
                kind: FaultKind::VanishedResource,
                location: prog.node,
                connection: conn,
                detail: format!("stage {stage} rule {}: {what}", rule.id),
            })
        };
        for a in &rule.actions {
            match a {
                Action::SetTimer {
                    timer,
                    duration,
                    anchor,
                } => {
                    let (slot, expiry, age) = match anchor {
                        TimerAnchor::Now => (
                            TimerSlot {
                                connection: conn,
                                stage,
                                timer: *timer,
                                resource: None,
                            },
                            now.saturating_add(*duration),
                            false,
                        ),
                        TimerAnchor::PairAge(x) => {
                            let Some(r) = picked.get(x.index()).and_then(|p| self.pool.get(&p.key))
                            else {
                                vanished(env, "timer anchor");
                                continue;
                            };
                            let Some(o) = r.owner else { continue };
                            (
                                TimerSlot {
                                    connection: conn,
                                    stage: o.1,
                                    timer: *timer,
                                    resource: Some(r.key),
                                },
                                r.name.timestamp.saturating_add(*duration),
                                true,
                            )
                        }
                    };
                    self.timers.insert(
                        slot,
                        TimerEntry {
                            expiry,
                            duration: *duration,
                            age,
                        },
                    );
                    env.set_timer(expiry, TimerToken::Rule(slot));
                }
                Action::Promote { refs, stage: target } => {
                    for x in refs {
                        let Some(p) = picked.get(x.index()) else { continue };
                        let Some(mut r) = self.take(p.key) else {
                            vanished(env, "promote");
                            continue;
                        };
                        let inst = &prog.connections[&conn];
                        let delivery = inst.ruleset.stage(*target).is_none_or(|s| s.is_delivery());
                        if delivery {
                            self.deliver(prog, env, w, conn, r);
                        } else {
                            r.owner = Some((conn, *target));
                            self.insert(r);
                            w.dirty.insert((conn, *target));
                        }
                    }
                }
                Action::Free { refs } => {
                    for x in refs {
                        let Some(p) = picked.get(x.index()) else { continue };
                        if self.take(p.key).is_none() {
                            vanished(env, "free");
                            continue;
                        }
                        env.release(p.key, Release::Discarded);
                        self.bury(p.name, now, Tombstone::Freed);
                        out[x.index()] = Some(MessageBody::Free { name: p.name });
                    }
                }
                Action::Set { var, update } => {
                    let st = prog.connections[&conn].ruleset.stage(stage).unwrap();
                    let init = st
                        .variables
                        .iter()
                        .find(|d| d.id == *var)
                        .map(|d| d.init)
                        .unwrap_or(Value::Int(0));
                    let cur = self.vars.entry((conn, stage, *var)).or_insert(init);
                    *cur = match update {
                        VarUpdate::Add(v) => cur.add(*v),
                        VarUpdate::Assign(v) => *v,
                    };
                }
                Action::Meas { refs, basis } => {
                    for x in refs {
                        let Some(p) = picked.get(x.index()) else { continue };
                        if self.take(p.key).is_none() {
                            vanished(env, "measure");
                            continue;
                        }
                        let used = env.measure(conn, p.key, *basis);
                        out[x.index()] = Some(MessageBody::MeasResult {
                            kept: p.name,
                            sacrificed: p.name,
                            round: u32::MAX,
                            outcome: 0,
                        });
                        let rec = MeasRecord {
                            name: p.name,
                            partner: p.partner,
                            connection: conn,
                            basis: used,
                            at: now,
                        };
                        self.settle_record(prog, env, rec, p.frame, p.est);
                    }
                }
                Action::Qcirc { refs, circuit } => {
                    let ps: Vec<Picked> = refs
                        .iter()
                        .filter_map(|x| picked.get(x.index()).copied())
                        .collect();
                    if ps.iter().any(|p| !self.pool.contains_key(&p.key)) {
                        vanished(env, "circuit");
                        continue;
                    }
                    let shape_ok = ps.len() == 2
                        && match circuit {
                            Circuit::PurifyPair => ps[0].partner == ps[1].partner,
                            Circuit::Swap | Circuit::Bsm => ps[0].partner != ps[1].partner,
                        };
                    if !shape_ok {
                        env.fault(Fault {
                            kind: FaultKind::BadCircuit,
                            location: prog.node,
                            connection: conn,
                            detail: format!("stage {stage} rule {}: {circuit:?} on {} pairs", rule.id, ps.len()),
                        });
                        for p in &ps {
                            self.take(p.key);
                            env.release(p.key, Release::Fault);
                            self.bury(p.name, now, Tombstone::Freed);
                        }
                        continue;
                    }
                    match circuit {
                        Circuit::PurifyPair => {
                            let (k, s) = if ps[0].name < ps[1].name {
                                (ps[0], ps[1])
                            } else {
                                (ps[1], ps[0])
                            };
                            let bit = env.purify(conn, k.key, s.key);
                            self.take(s.key);
                            self.bury(s.name, now, Tombstone::Consumed);
                            let r = self.pool.get_mut(&k.key).unwrap();
                            let round = r.rounds + 1;
                            r.pending = Some(PendingPurify {
                                sacrificed: s.name,
                                round,
                                bit,
                                est_success: purify_outcome(k.est, s.est).fidelity,
                                at: now,
                            });
                            let body = MessageBody::MeasResult {
                                kept: k.name,
                                sacrificed: s.name,
                                round,
                                outcome: bit,
                            };
                            for x in refs {
                                out[x.index()] = Some(body.clone());
                            }
                            purified.push((k.name, round));
                        }
                        Circuit::Swap | Circuit::Bsm => {
                            let (l, r) = (ps[0], ps[1]);
                            let new_name = env.mint_name();
                            let est = swap_fidelity(l.est, r.est);
                            let mine = prog.decay.0;
                            let rate = DecayRate(
                                (l.rate.0 - mine).max(0.0) + (r.rate.0 - mine).max(0.0),
                            );
                            let pauli = env.swap(conn, l.key, r.key, new_name);
                            self.take(l.key);
                            self.take(r.key);
                            self.bury(l.name, now, Tombstone::Swapped { new_name, other_end: r.partner });
                            self.bury(r.name, now, Tombstone::Swapped { new_name, other_end: l.partner });
                            out[refs[0].index()] = Some(MessageBody::Transfer {
                                old_name: l.name,
                                new_name,
                                new_partner: r.partner,
                                correction: None,
                                est_fidelity: est,
                                rate,
                            });
                            out[refs[1].index()] = Some(MessageBody::Transfer {
                                old_name: r.name,
                                new_name,
                                new_partner: l.partner,
                                correction: Some(pauli),
                                est_fidelity: est,
                                rate,
                            });
                        }
                    }
                }
                Action::Send { kind, about, to } => {
                    let Some(p) = picked.get(about.index()) else { continue };
                    let body = match kind {
                        MessageKind::Update => Some(MessageBody::Update {
                            name: p.name,
                            correction: p.frame,
                        }),
                        _ => out[about.index()].clone().filter(|b| b.kind() == *kind),
                    };
                    let Some(body) = body else {
                        vanished(env, "send without payload");
                        continue;
                    };
                    let dst = match to {
                        Destination::PartnerOf(x) => match picked.get(x.index()) {
                            Some(q) => q.partner,
                            None => continue,
                        },
                        Destination::Node(n) => *n,
                    };
                    env.send(
                        dst,
                        ProtocolMessage {
                            connection: conn,
                            sender: prog.node,
                            body,
                        },
                    );
                }
            }
        }
        for (kept, round) in purified {
            if let Some((_, c, sac, bit)) = self.meas_early.remove(&(kept, round)) {
                if let Some(&key) = self.names.get(&kept) {
                    if self.pool[&key].pending.as_ref().is_some_and(|p| p.round == round) {
                        self.resolve(prog, env, w, key, c, sac, bit);
                    }
                }
            }
        }
    }

    fn deliver(&mut self, prog: &Program, env: &mut dyn Env, w: &mut Work, conn: ConnectionId, mut r: Resource) {
        let now = env.now();
        let inst = &prog.connections[&conn];
        if let Some(sp) = inst.splice {
            let est = r.est_at(now);
            if est < sp.advertised {
                env.fault(Fault {
                    kind: FaultKind::FidelityShortfall,
                    location: prog.node,
                    connection: conn,
                    detail: format!("segment pair {} at {est}, advertised {}", r.name, sp.advertised),
                });
            }
            if prog.connections.contains_key(&sp.parent) {
                env.spliced(conn, sp.parent, r.key);
                r.owner = Some((sp.parent, 0));
                w.replay.push(r.name);
                self.insert(r);
                w.dirty.insert((sp.parent, 0));
                return;
            }
        }
        self.bury(r.name, now, Tombstone::Delivered);
        env.deliver(Delivery {
            connection: conn,
            name: r.name,
            partner: r.partner,
            key: Some(r.key),
            est: r.est_at(now),
            basis: None,
            frame: r.frame,
        });
    }
}

fn pick(r: &Resource, now: SimTime) -> Picked {
    Picked {
        key: r.key,
        name: r.name,
        partner: r.partner,
        est: r.est_at(now),
        rate: r.rate,
        frame: r.frame,
    }
}
