use super::*;
use crate::ruleset::*;

#[derive(Default)]
struct Mock {
    now: SimTime,
    node: u32,
    seq: u32,
    sent: Vec<(NodeAddr, ProtocolMessage)>,
    timers: Vec<(SimTime, TimerToken)>,
    released: Vec<(QubitKey, Release)>,
    delivered: Vec<Delivery>,
    faults: Vec<Fault>,
    purify_bits: Vec<u8>,
    swaps: Vec<(QubitKey, QubitKey)>,
    measured: Vec<QubitKey>,
    fired: Vec<(u16, u16)>,
}

impl Env for Mock {
    fn now(&self) -> SimTime {
        self.now
    }
    fn mint_name(&mut self) -> ExternalName {
        self.seq += 1;
        ExternalName {
            timestamp: self.now,
            minter: NodeAddr(self.node),
            seq: self.seq,
        }
    }
    fn send(&mut self, dst: NodeAddr, msg: ProtocolMessage) {
        self.sent.push((dst, msg));
    }
    fn set_timer(&mut self, at: SimTime, token: TimerToken) {
        self.timers.push((at, token));
    }
    fn swap(&mut self, _c: ConnectionId, l: QubitKey, r: QubitKey, _n: ExternalName) -> Pauli {
        self.swaps.push((l, r));
        Pauli::X
    }
    fn purify(&mut self, _c: ConnectionId, _k: QubitKey, _s: QubitKey) -> u8 {
        self.purify_bits.pop().unwrap_or(0)
    }
    fn measure(&mut self, _c: ConnectionId, key: QubitKey, basis: Basis) -> Basis {
        self.measured.push(key);
        basis
    }
    fn release(&mut self, key: QubitKey, why: Release) {
        self.released.push((key, why));
    }
    fn deliver(&mut self, d: Delivery) {
        self.delivered.push(d);
    }
    fn fault(&mut self, f: Fault) {
        self.faults.push(f);
    }
    fn fired(&mut self, _c: ConnectionId, stage: u16, rule: u16) {
        self.fired.push((stage, rule));
    }
}

const C: ConnectionId = ConnectionId(7);

fn f(v: f64) -> Fidelity {
    Fidelity::new(v).unwrap()
}

fn name(t: u64, seq: u32) -> ExternalName {
    ExternalName {
        timestamp: SimTime(t),
        minter: NodeAddr(9),
        seq,
    }
}

fn res(partner: u32, min: f64, count: u8) -> Condition {
    Condition::Res {
        partner: PartnerSpec::Node(NodeAddr(partner)),
        min_fidelity: f(min),
        count,
    }
}

fn refs(v: &[u8]) -> Vec<ResRef> {
    v.iter().map(|x| ResRef(*x)).collect()
}

fn program(node: u32, stages: Vec<Stage>, far_end: Option<u32>) -> Program {
    let mut p = Program::new(NodeAddr(node));
    let rs = RuleSet {
        id: RuleSetId(1),
        connection: C,
        owner: NodeAddr(node),
        stages,
    };
    p.install(Arc::new(rs), far_end.map(NodeAddr), None);
    p
}

fn arrival(key: u64, n: ExternalName, partner: u32, est: f64) -> Arrival {
    Arrival {
        key: QubitKey(key),
        name: n,
        partner: NodeAddr(partner),
        link: None,
        est: f(est),
        rate: DecayRate::ZERO,
        connection: Some(C),
    }
}

fn stage(id: u16, rules: Vec<Rule>) -> Stage {
    Stage {
        id,
        rules,
        variables: vec![],
    }
}

fn rule(id: u16, conditions: Vec<Condition>, actions: Vec<Action>) -> Rule {
    Rule {
        id,
        conditions,
        actions,
    }
}

fn pump_stages() -> Vec<Stage> {
    vec![
        stage(
            0,
            vec![
                rule(
                    0,
                    vec![res(1, 0.92, 1)],
                    vec![Action::Promote { refs: refs(&[0]), stage: 1 }],
                ),
                rule(
                    1,
                    vec![res(1, 0.25, 2)],
                    vec![
                        Action::Qcirc { refs: refs(&[0, 1]), circuit: Circuit::PurifyPair },
                        Action::Send {
                            kind: MessageKind::MeasResult,
                            about: ResRef(0),
                            to: Destination::PartnerOf(ResRef(0)),
                        },
                    ],
                ),
            ],
        ),
        stage(1, vec![]),
    ]
}

#[test]
fn single_resource_does_not_satisfy_count_two() {
    let prog = program(0, pump_stages(), Some(1));
    let mut st = NodeState::new();
    let mut env = Mock::default();
    st.on_arrival(&prog, &mut env, arrival(1, name(1, 0), 1, 0.9));
    assert!(env.fired.is_empty());
    assert_eq!(st.resources().count(), 1);
}

#[test]
fn purification_even_parity_keeps_smaller_name() {
    let prog = program(0, pump_stages(), Some(1));
    let mut st = NodeState::new();
    let mut env = Mock::default();
    st.on_arrival(&prog, &mut env, arrival(1, name(5, 0), 1, 0.9));
    env.purify_bits = vec![1];
    st.on_arrival(&prog, &mut env, arrival(2, name(3, 0), 1, 0.9));
    assert_eq!(env.fired, vec![(0, 1)]);
    let (dst, msg) = &env.sent[0];
    assert_eq!(*dst, NodeAddr(1));
    let MessageBody::MeasResult { kept, sacrificed, round, outcome } = msg.body else {
        panic!()
    };
    assert_eq!((kept, sacrificed, round, outcome), (name(3, 0), name(5, 0), 1, 1));
    // Locked resources are invisible to rules.
    assert_eq!(st.resources().count(), 1);
    st.on_message(
        &prog,
        &mut env,
        ProtocolMessage {
            connection: C,
            sender: NodeAddr(1),
            body: MessageBody::MeasResult { kept, sacrificed, round, outcome: 1 },
        },
    );
    // 0.9/0.9 purifies to 0.9264 which clears the 0.92 promotion gate and
    // the stage-1 delivery happens.
    assert_eq!(env.delivered.len(), 1);
    let d = &env.delivered[0];
    assert_eq!(d.name, name(3, 0));
    assert!((d.est.value() - 0.926_395).abs() < 1e-5);
    st.check_consistency().unwrap();
}

#[test]
fn purification_odd_parity_frees_locally() {
    let prog = program(0, pump_stages(), Some(1));
    let mut st = NodeState::new();
    let mut env = Mock::default();
    st.on_arrival(&prog, &mut env, arrival(1, name(5, 0), 1, 0.9));
    st.on_arrival(&prog, &mut env, arrival(2, name(3, 0), 1, 0.9));
    st.on_message(
        &prog,
        &mut env,
        ProtocolMessage {
            connection: C,
            sender: NodeAddr(1),
            body: MessageBody::MeasResult {
                kept: name(3, 0),
                sacrificed: name(5, 0),
                round: 1,
                outcome: 1,
            },
        },
    );
    assert_eq!(st.resources().count(), 0);
    assert!(env.released.contains(&(QubitKey(2), Release::PurifyFailed)));
    assert_eq!(env.sent.len(), 1, "no FREE after a failed round");
}

#[test]
fn early_meas_result_is_buffered() {
    let prog = program(0, pump_stages(), Some(1));
    let mut st = NodeState::new();
    let mut env = Mock::default();
    st.on_message(
        &prog,
        &mut env,
        ProtocolMessage {
            connection: C,
            sender: NodeAddr(1),
            body: MessageBody::MeasResult {
                kept: name(3, 0),
                sacrificed: name(5, 0),
                round: 1,
                outcome: 0,
            },
        },
    );
    st.on_arrival(&prog, &mut env, arrival(1, name(5, 0), 1, 0.9));
    st.on_arrival(&prog, &mut env, arrival(2, name(3, 0), 1, 0.9));
    assert_eq!(env.delivered.len(), 1);
    assert_eq!(st.early_meas_results(), 0);
}

#[test]
fn mismatched_sacrifice_is_a_fault() {
    let prog = program(0, pump_stages(), Some(1));
    let mut st = NodeState::new();
    let mut env = Mock::default();
    st.on_arrival(&prog, &mut env, arrival(1, name(5, 0), 1, 0.9));
    st.on_arrival(&prog, &mut env, arrival(2, name(3, 0), 1, 0.9));
    st.on_message(
        &prog,
        &mut env,
        ProtocolMessage {
            connection: C,
            sender: NodeAddr(1),
            body: MessageBody::MeasResult {
                kept: name(3, 0),
                sacrificed: name(4, 0),
                round: 1,
                outcome: 0,
            },
        },
    );
    assert_eq!(env.faults[0].kind, FaultKind::PurifyMismatch);
}

fn swap_stages() -> Vec<Stage> {
    vec![
        stage(
            0,
            vec![
                rule(0, vec![res(0, 0.5, 1)], vec![Action::Promote { refs: refs(&[0]), stage: 1 }]),
                rule(1, vec![res(2, 0.5, 1)], vec![Action::Promote { refs: refs(&[0]), stage: 1 }]),
            ],
        ),
        stage(
            1,
            vec![rule(
                0,
                vec![res(0, 0.5, 1), res(2, 0.5, 1)],
                vec![
                    Action::Qcirc { refs: refs(&[0, 1]), circuit: Circuit::Swap },
                    Action::Send {
                        kind: MessageKind::Transfer,
                        about: ResRef(0),
                        to: Destination::PartnerOf(ResRef(0)),
                    },
                    Action::Send {
                        kind: MessageKind::Transfer,
                        about: ResRef(1),
                        to: Destination::PartnerOf(ResRef(1)),
                    },
                ],
            )],
        ),
    ]
}

#[test]
fn swap_sends_transfers_to_both_partners() {
    let prog = program(1, swap_stages(), None);
    let mut st = NodeState::new();
    let mut env = Mock { node: 1, ..Mock::default() };
    st.on_arrival(&prog, &mut env, arrival(1, name(1, 0), 0, 0.9));
    env.now = SimTime(10);
    st.on_arrival(&prog, &mut env, arrival(2, name(2, 0), 2, 0.9));
    assert_eq!(env.swaps, vec![(QubitKey(1), QubitKey(2))]);
    assert_eq!(env.sent.len(), 2);
    let (d0, m0) = &env.sent[0];
    let (d1, m1) = &env.sent[1];
    assert_eq!((*d0, *d1), (NodeAddr(0), NodeAddr(2)));
    match (&m0.body, &m1.body) {
        (
            MessageBody::Transfer { new_partner: p0, correction: c0, new_name: n0, est_fidelity, .. },
            MessageBody::Transfer { new_partner: p1, correction: c1, new_name: n1, .. },
        ) => {
            assert_eq!((*p0, *p1), (NodeAddr(2), NodeAddr(0)));
            assert_eq!((*c0, *c1), (None, Some(Pauli::X)));
            assert_eq!(n0, n1);
            assert!((est_fidelity.value() - 0.813_333).abs() < 1e-5);
        }
        _ => panic!(),
    }
    assert!(matches!(st.tombstone(name(1, 0)), Some(Tombstone::Swapped { .. })));
    // A late FREE for a swapped pair is a discard race blamed on its sender
    // and gets forwarded to the other new end.
    st.on_message(
        &prog,
        &mut env,
        ProtocolMessage {
            connection: C,
            sender: NodeAddr(0),
            body: MessageBody::Free { name: name(1, 0) },
        },
    );
    assert_eq!(env.faults[0].kind, FaultKind::DiscardRace);
    assert_eq!(env.faults[0].location, NodeAddr(0));
    assert_eq!(env.sent[2].0, NodeAddr(2));
}

fn end_stages() -> Vec<Stage> {
    vec![
        stage(
            0,
            vec![rule(
                0,
                vec![res(1, 0.5, 1)],
                vec![
                    Action::Promote { refs: refs(&[0]), stage: 1 },
                    Action::SetTimer {
                        timer: TimerId(0),
                        duration: SimTime(100),
                        anchor: TimerAnchor::PairAge(ResRef(0)),
                    },
                ],
            )],
        ),
        stage(
            1,
            vec![
                rule(0, vec![res(2, 0.5, 1)], vec![Action::Promote { refs: refs(&[0]), stage: 2 }]),
                rule(
                    1,
                    vec![
                        Condition::Timer { timer: TimerId(0) },
                        Condition::Res { partner: PartnerSpec::Any, min_fidelity: Fidelity::FLOOR, count: 1 },
                    ],
                    vec![
                        Action::Free { refs: refs(&[0]) },
                        Action::Send {
                            kind: MessageKind::Free,
                            about: ResRef(0),
                            to: Destination::PartnerOf(ResRef(0)),
                        },
                    ],
                ),
            ],
        ),
        stage(2, vec![]),
    ]
}

fn transfer(old: ExternalName, new: ExternalName, partner: u32) -> ProtocolMessage {
    ProtocolMessage {
        connection: C,
        sender: NodeAddr(1),
        body: MessageBody::Transfer {
            old_name: old,
            new_name: new,
            new_partner: NodeAddr(partner),
            correction: Some(Pauli::Z),
            est_fidelity: f(0.8),
            rate: DecayRate::ZERO,
        },
    }
}

#[test]
fn transfer_renames_and_delivers() {
    let prog = program(0, end_stages(), Some(2));
    let mut st = NodeState::new();
    let mut env = Mock::default();
    st.on_arrival(&prog, &mut env, arrival(1, name(1, 0), 1, 0.9));
    assert_eq!(env.timers.len(), 1);
    env.now = SimTime(50);
    st.on_message(&prog, &mut env, transfer(name(1, 0), name(40, 0), 2));
    assert_eq!(env.delivered.len(), 1);
    assert_eq!(env.delivered[0].name, name(40, 0));
    assert_eq!(env.delivered[0].frame, Pauli::Z);
    // Delivery cancelled the discard timer.
    let t0 = env.timers[0].1;
    st.on_timer(&prog, &mut env, t0);
    assert!(env.faults.is_empty());
    assert_eq!(st.pending_timers().count(), 0);
}

#[test]
fn transfer_before_arrival_is_buffered() {
    let prog = program(0, end_stages(), Some(2));
    let mut st = NodeState::new();
    let mut env = Mock::default();
    st.on_message(&prog, &mut env, transfer(name(1, 0), name(40, 0), 2));
    assert_eq!(st.early_messages().count(), 1);
    env.now = SimTime(60);
    st.on_arrival(&prog, &mut env, arrival(1, name(1, 0), 1, 0.9));
    assert_eq!(env.delivered.len(), 1);
    assert_eq!(st.early_messages().count(), 0);
}

#[test]
fn age_timer_discards_and_a_late_transfer_races() {
    let prog = program(0, end_stages(), Some(2));
    let mut st = NodeState::new();
    let mut env = Mock::default();
    st.on_arrival(&prog, &mut env, arrival(1, name(1, 0), 1, 0.9));
    let (at, tok) = env.timers[0];
    assert_eq!(at, SimTime(101));
    env.now = at;
    st.on_timer(&prog, &mut env, tok);
    assert_eq!(env.released, vec![(QubitKey(1), Release::Discarded)]);
    assert!(matches!(env.sent[0].1.body, MessageBody::Free { .. }));
    env.now = SimTime(150);
    st.on_message(&prog, &mut env, transfer(name(1, 0), name(120, 0), 2));
    assert_eq!(env.faults[0].kind, FaultKind::DiscardRace);
    assert_eq!(env.sent[1].0, NodeAddr(2));
}

#[test]
fn rename_reanchors_age_timer() {
    let prog = program(0, end_stages(), Some(3));
    let mut st = NodeState::new();
    let mut env = Mock::default();
    st.on_arrival(&prog, &mut env, arrival(1, name(1, 0), 1, 0.9));
    env.now = SimTime(50);
    st.on_message(&prog, &mut env, transfer(name(1, 0), name(40, 0), 4));
    assert!(env.delivered.is_empty());
    let (at, tok) = *env.timers.last().unwrap();
    assert_eq!(at, SimTime(140));
    // The original wakeup is stale now.
    env.now = SimTime(101);
    let t0 = env.timers[0].1;
    st.on_timer(&prog, &mut env, t0);
    assert_eq!(st.resources().count(), 1);
    env.now = at;
    st.on_timer(&prog, &mut env, tok);
    assert_eq!(st.resources().count(), 0);
}

#[test]
fn counter_gate_after_two_increments() {
    let var = VarId(0);
    let stages = vec![
        Stage {
            id: 0,
            rules: vec![
                rule(
                    0,
                    vec![
                        Condition::Cmp { var, op: CmpOp::Ge, value: Value::Int(2) },
                        res(1, 0.25, 1),
                    ],
                    vec![Action::Promote { refs: refs(&[0]), stage: 1 }],
                ),
                rule(
                    1,
                    vec![res(1, 0.25, 1)],
                    vec![
                        Action::Set { var, update: VarUpdate::Add(Value::Int(1)) },
                        Action::Free { refs: refs(&[0]) },
                    ],
                ),
            ],
            variables: vec![VarDecl { id: var, name: "n".into(), init: Value::Int(0) }],
        },
        stage(1, vec![]),
    ];
    let prog = program(0, stages, Some(1));
    let mut st = NodeState::new();
    let mut env = Mock::default();
    for i in 0..3 {
        st.on_arrival(&prog, &mut env, arrival(i, name(i, 0), 1, 0.9));
    }
    assert_eq!(env.fired, vec![(0, 1), (0, 1), (0, 0)]);
    assert_eq!(env.delivered.len(), 1);
    assert_eq!(st.var(C, 0, var), Some(Value::Int(2)));
}

#[test]
fn runaway_rules_hit_the_guard() {
    let var = VarId(0);
    let stages = vec![Stage {
        id: 0,
        rules: vec![rule(
            0,
            vec![Condition::Cmp { var, op: CmpOp::Ge, value: Value::Int(0) }],
            vec![Action::Set { var, update: VarUpdate::Add(Value::Int(1)) }],
        )],
        variables: vec![VarDecl { id: var, name: "n".into(), init: Value::Int(0) }],
    }];
    let mut prog = program(0, stages, None);
    prog.max_firings = 50;
    let mut st = NodeState::new();
    let mut env = Mock::default();
    st.on_arrival(&prog, &mut env, arrival(1, name(1, 0), 1, 0.9));
    assert_eq!(env.faults.len(), 1);
    assert_eq!(env.faults[0].kind, FaultKind::Nontermination);
}

#[test]
fn unassigned_pair_goes_stale() {
    let mut prog = Program::new(NodeAddr(0));
    prog.stale_after = SimTime(10);
    let mut st = NodeState::new();
    let mut env = Mock::default();
    let mut a = arrival(1, name(1, 0), 1, 0.9);
    a.connection = None;
    st.on_arrival(&prog, &mut env, a);
    let (at, tok) = env.timers[0];
    env.now = at;
    st.on_timer(&prog, &mut env, tok);
    assert_eq!(env.released, vec![(QubitKey(1), Release::Stale)]);
}

#[test]
fn teardown_clears_everything() {
    let prog = program(0, end_stages(), Some(2));
    let mut st = NodeState::new();
    let mut env = Mock::default();
    st.on_arrival(&prog, &mut env, arrival(1, name(1, 0), 1, 0.9));
    st.on_message(&prog, &mut env, transfer(name(9, 0), name(10, 0), 2));
    st.teardown(&mut env, C);
    assert_eq!(st.held_by(C), 0);
    assert_eq!(st.pending_timers().count(), 0);
    assert_eq!(st.early_messages().count(), 0);
    st.check_consistency().unwrap();
}
