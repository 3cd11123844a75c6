//! Responder-side RuleSet generation.
//!
//! Policy: pump each link until it reaches its share of the end-to-end
//! target, swap along a balanced binary tree over the path, gate delivery on
//! the target, and discard stale pairs with timers whose durations grow with
//! tree height so a holder never gives up on a pair before the node that
//! swaps it could have told it so.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use super::{ConnectionRequest, LinkInfo, Mode};
use crate::kernel::SimTime;
use crate::link::NodeType;
use crate::quantum::{decohere_by_rate, werner_from_fidelity, WernerParam};
use crate::routing::{pumping_plan, PumpPlan};
use crate::ruleset::{
    Action, Basis, Circuit, CmpOp, Condition, Destination, MessageKind, PartnerSpec, ResRef, Rule,
    RuleSet, RuleSetId, Stage, TimerAnchor, TimerId, Value, VarDecl, VarId, VarUpdate,
};
use crate::{ConnectionId, Fidelity, NodeAddr};

pub const DISCARD_TIMER: TimerId = TimerId(0);
pub const DELIVERED_VAR: VarId = VarId(0);

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum GeneratorError {
    BadPath(String),
    Infeasible(String),
}

impl fmt::Display for GeneratorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeneratorError::BadPath(s) => write!(f, "malformed path: {s}"),
            GeneratorError::Infeasible(s) => write!(f, "infeasible fidelity: {s}"),
        }
    }
}

impl std::error::Error for GeneratorError {}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorOptions {
    /// Added on top of each pumped link's share so rounding never leaves
    /// the composed chain a hair under target.
    pub margin: f64,
    /// Basis used by measuring end nodes.
    pub basis: Basis,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        GeneratorOptions {
            margin: 1e-9,
            basis: Basis::Z,
        }
    }
}

/// Per-hop outcome of target allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct HopPlan {
    /// Promotion gate for pairs on this hop.
    pub threshold: Fidelity,
    /// Present when the hop pumps.
    pub pump: Option<PumpPlan>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwapStep {
    pub node: NodeAddr,
    pub left: NodeAddr,
    pub right: NodeAddr,
    /// 1 for swaps of two link pairs, growing toward the root.
    pub level: u32,
}

#[derive(Debug, Clone)]
pub struct GeneratedPlan {
    pub connection: ConnectionId,
    pub path: Vec<NodeAddr>,
    pub hops: Vec<HopPlan>,
    /// Post-order: every swap appears after the swaps feeding it.
    pub swaps: Vec<SwapStep>,
    /// Discard timer per path position, when memories are finite.
    pub discard: Vec<Option<SimTime>>,
    pub rulesets: BTreeMap<NodeAddr, RuleSet>,
}

impl GeneratedPlan {
    pub fn purification_rules(&self) -> usize {
        self.rulesets
            .values()
            .flat_map(|rs| &rs.stages)
            .flat_map(|s| &s.rules)
            .filter(|r| {
                r.actions.iter().any(|a| {
                    matches!(
                        a,
                        Action::Qcirc {
                            circuit: Circuit::PurifyPair,
                            ..
                        }
                    )
                })
            })
            .count()
    }

    /// RuleSets in path order.
    pub fn ordered(&self) -> Vec<RuleSet> {
        self.path.iter().map(|n| self.rulesets[n].clone()).collect()
    }
}

fn w(f: Fidelity) -> f64 {
    werner_from_fidelity(f).value()
}

fn fid(w: f64) -> Fidelity {
    WernerParam::new(w.clamp(0.0, 1.0)).unwrap().to_fidelity()
}

/// Split an end-to-end target into per-hop promotion gates.
///
/// Swapping multiplies Werner parameters, so the product of per-hop
/// parameters must reach the target's. Hops that cannot pump, and hops
/// already above the running share, keep their raw fidelity; the rest split
/// what remains evenly and pump up to it.
pub fn allocate_targets(hops: &[LinkInfo], target: Fidelity, margin: f64) -> Result<Vec<HopPlan>, GeneratorError> {
    let wt = w(target);
    let base: Vec<f64> = hops.iter().map(|h| w(h.base_fidelity)).collect();
    let mut fixed: Vec<bool> = hops.iter().map(|h| !h.pumpable()).collect();
    let share = loop {
        let prod: f64 = (0..hops.len()).filter(|i| fixed[*i]).map(|i| base[i]).product();
        let free: Vec<usize> = (0..hops.len()).filter(|i| !fixed[*i]).collect();
        if free.is_empty() {
            if prod + 1e-12 < wt {
                return Err(GeneratorError::Infeasible(format!(
                    "raw hops compose to {} < {}",
                    fid(prod),
                    target
                )));
            }
            break None;
        }
        if prod <= 0.0 || wt / prod > 1.0 {
            return Err(GeneratorError::Infeasible(format!(
                "hops that cannot pump compose to {} < {}",
                fid(prod.max(0.0)),
                target
            )));
        }
        let share = (wt / prod).powf(1.0 / free.len() as f64);
        let newly: Vec<usize> = free.iter().copied().filter(|i| base[*i] >= share).collect();
        if newly.is_empty() {
            break Some(share);
        }
        for i in newly {
            fixed[i] = true;
        }
    };
    let mut out = vec![];
    for (i, h) in hops.iter().enumerate() {
        if fixed[i] {
            // Allow for decay between creation and herald.
            let t = decohere_by_rate(h.base_fidelity, h.latency.as_secs(), h.pair_rate());
            out.push(HopPlan {
                threshold: Fidelity::clamped(t.value() - 1e-12),
                pump: None,
            });
        } else {
            let goal = Fidelity::clamped(fid(share.unwrap()).value() + margin);
            let plan = pumping_plan(h.base_fidelity, goal).ok_or_else(|| {
                GeneratorError::Infeasible(format!(
                    "hop {}-{} cannot pump {} up to {}",
                    h.a, h.b, h.base_fidelity, goal
                ))
            })?;
            out.push(HopPlan {
                threshold: goal,
                pump: (plan.rounds > 0).then_some(plan),
            });
        }
    }
    Ok(out)
}

/// Balanced binary swap tree over path positions `l..=r`. Returns the level
/// of the segment's root swap (0 for a single hop).
fn swap_tree(l: usize, r: usize, path: &[NodeAddr], out: &mut Vec<SwapStep>) -> u32 {
    if r - l < 2 {
        return 0;
    }
    let m = l + (r - l) / 2;
    let a = swap_tree(l, m, path, out);
    let b = swap_tree(m, r, path, out);
    let level = 1 + a.max(b);
    out.push(SwapStep {
        node: path[m],
        left: path[l],
        right: path[r],
        level,
    });
    level
}

fn res(partner: NodeAddr, min: Fidelity, count: u8) -> Condition {
    Condition::Res {
        partner: PartnerSpec::Node(partner),
        min_fidelity: min,
        count,
    }
}

fn send(kind: MessageKind, about: u8) -> Action {
    Action::Send {
        kind,
        about: ResRef(about),
        to: Destination::PartnerOf(ResRef(about)),
    }
}

pub fn generate_rulesets(req: &ConnectionRequest, opts: &GeneratorOptions) -> Result<GeneratedPlan, GeneratorError> {
    let hops = &req.accumulated;
    if hops.is_empty() {
        return Err(GeneratorError::BadPath("no hops".into()));
    }
    let mut path = vec![hops[0].a];
    for (i, h) in hops.iter().enumerate() {
        if h.a != path[i] {
            return Err(GeneratorError::BadPath(format!("hop {i} starts at {} not {}", h.a, path[i])));
        }
        path.push(h.b);
    }
    if path[0] != req.initiator || *path.last().unwrap() != req.responder {
        return Err(GeneratorError::BadPath("path does not join initiator and responder".into()));
    }
    let mut seen = path.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != path.len() {
        return Err(GeneratorError::BadPath("path revisits a node".into()));
    }
    let n = path.len();
    let types: Vec<NodeType> = (0..n)
        .map(|i| if i < hops.len() { hops[i].a_type } else { hops[i - 1].b_type })
        .collect();
    let t_mem: Vec<f64> = (0..n)
        .map(|i| if i < hops.len() { hops[i].a_t_mem_s } else { hops[i - 1].b_t_mem_s })
        .collect();
    for (i, t) in types.iter().enumerate() {
        if *t == NodeType::Meas && i != 0 && i != n - 1 {
            return Err(GeneratorError::BadPath(format!("measuring node {} inside the path", path[i])));
        }
    }
    let target = req.requirements.min_fidelity;
    let plans = allocate_targets(hops, target, opts.margin)?;

    let mut swaps = vec![];
    let root = swap_tree(0, n - 1, &path, &mut swaps);
    let mut level = vec![root + 1; n];
    for s in &swaps {
        let i = path.iter().position(|p| *p == s.node).unwrap();
        level[i] = s.level;
    }

    let min_t = (0..n)
        .filter(|i| types[*i] != NodeType::Meas)
        .map(|i| t_mem[i])
        .fold(f64::INFINITY, f64::min);
    let total_latency: SimTime = hops.iter().fold(SimTime::ZERO, |a, h| a + h.latency);
    let discard: Vec<Option<SimTime>> = (0..n)
        .map(|i| {
            if !min_t.is_finite() || types[i] == NodeType::Meas {
                return None;
            }
            let base = SimTime::from_secs(min_t / f64::from(1u32 << (root + 2).min(30)));
            let unit = base + total_latency;
            Some(SimTime(unit.0.saturating_mul(1u64 << level[i].min(40))))
        })
        .collect();

    let mut rulesets = BTreeMap::new();
    for i in 0..n {
        let me = path[i];
        let mut neighbours: Vec<(NodeAddr, usize)> = vec![];
        if i > 0 {
            neighbours.push((path[i - 1], i - 1));
        }
        if i + 1 < n {
            neighbours.push((path[i + 1], i));
        }
        let mut stage0 = vec![];
        let mut rid = 0u16;
        let mut next = || {
            rid += 1;
            rid - 1
        };
        if types[i] == NodeType::Meas {
            for (p, _) in &neighbours {
                stage0.push(Rule {
                    id: next(),
                    conditions: vec![res(*p, Fidelity::FLOOR, 1)],
                    actions: vec![Action::Meas {
                        refs: vec![ResRef(0)],
                        basis: opts.basis,
                    }],
                });
            }
            rulesets.insert(
                me,
                RuleSet {
                    id: RuleSetId((req.id.0 << 8) | i as u64),
                    connection: req.id,
                    owner: me,
                    stages: vec![Stage {
                        id: 0,
                        rules: stage0,
                        variables: vec![],
                    }],
                },
            );
            continue;
        }
        for (p, h) in &neighbours {
            let mut promote = vec![Action::Promote {
                refs: vec![ResRef(0)],
                stage: 1,
            }];
            if let Some(d) = discard[i] {
                promote.push(Action::SetTimer {
                    timer: DISCARD_TIMER,
                    duration: d,
                    anchor: TimerAnchor::PairAge(ResRef(0)),
                });
            }
            stage0.push(Rule {
                id: next(),
                conditions: vec![res(*p, plans[*h].threshold, 1)],
                actions: promote,
            });
            if plans[*h].pump.is_some() {
                stage0.push(Rule {
                    id: next(),
                    conditions: vec![res(*p, Fidelity::FLOOR, 2)],
                    actions: vec![
                        Action::Qcirc {
                            refs: vec![ResRef(0), ResRef(1)],
                            circuit: Circuit::PurifyPair,
                        },
                        send(MessageKind::MeasResult, 0),
                    ],
                });
            }
        }
        let mut stage1 = vec![];
        let mut variables = vec![];
        let mut rid = 0u16;
        let is_end = i == 0 || i == n - 1;
        if let Some(s) = swaps.iter().find(|s| s.node == me) {
            stage1.push(Rule {
                id: rid,
                conditions: vec![res(s.left, Fidelity::FLOOR, 1), res(s.right, Fidelity::FLOOR, 1)],
                actions: vec![
                    Action::Qcirc {
                        refs: vec![ResRef(0), ResRef(1)],
                        circuit: Circuit::Swap,
                    },
                    send(MessageKind::Transfer, 0),
                    send(MessageKind::Transfer, 1),
                ],
            });
            rid += 1;
        } else if is_end {
            let other = if i == 0 { path[n - 1] } else { path[0] };
            let mut conditions = vec![];
            let mut actions = vec![Action::Promote {
                refs: vec![ResRef(0)],
                stage: 2,
            }];
            if let Mode::Count(limit) = req.requirements.mode {
                variables.push(VarDecl {
                    id: DELIVERED_VAR,
                    name: "delivered".into(),
                    init: Value::Int(0),
                });
                conditions.push(Condition::Cmp {
                    var: DELIVERED_VAR,
                    op: CmpOp::Lt,
                    value: Value::Int(limit.min(i64::MAX as u64) as i64),
                });
                actions.push(Action::Set {
                    var: DELIVERED_VAR,
                    update: VarUpdate::Add(Value::Int(1)),
                });
            }
            conditions.push(res(other, target, 1));
            stage1.push(Rule {
                id: rid,
                conditions,
                actions,
            });
            rid += 1;
        }
        if discard[i].is_some() {
            stage1.push(Rule {
                id: rid,
                conditions: vec![
                    Condition::Timer { timer: DISCARD_TIMER },
                    Condition::Res {
                        partner: PartnerSpec::Any,
                        min_fidelity: Fidelity::FLOOR,
                        count: 1,
                    },
                ],
                actions: vec![
                    Action::Free {
                        refs: vec![ResRef(0)],
                    },
                    send(MessageKind::Free, 0),
                ],
            });
        }
        let mut stages = vec![
            Stage {
                id: 0,
                rules: stage0,
                variables: vec![],
            },
            Stage {
                id: 1,
                rules: stage1,
                variables,
            },
        ];
        if is_end {
            stages.push(Stage {
                id: 2,
                rules: vec![],
                variables: vec![],
            });
        }
        rulesets.insert(
            me,
            RuleSet {
                id: RuleSetId((req.id.0 << 8) | i as u64),
                connection: req.id,
                owner: me,
                stages,
            },
        );
    }

    Ok(GeneratedPlan {
        connection: req.id,
        path,
        hops: plans,
        swaps,
        discard,
        rulesets,
    })
}
