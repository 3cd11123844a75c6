//! Structural checks on a single RuleSet.

use std::collections::BTreeSet;
use std::fmt;

use super::*;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    BackwardPromotion { stage: u16, rule: u16, target: u16 },
    PromotionOutOfRange { stage: u16, rule: u16, target: u16 },
    UndeclaredVariable { stage: u16, rule: u16, var: VarId },
    ResourceLeak { stage: u16, rule: u16, res: ResRef },
    DoubleDisposition { stage: u16, rule: u16, res: ResRef },
    ResCount { stage: u16, rule: u16, count: u8 },
    BadRef { stage: u16, rule: u16, res: ResRef },
    SendWithoutSource { stage: u16, rule: u16, res: ResRef, kind: MessageKind },
    TimerNeverSet { stage: u16, rule: u16, timer: TimerId },
    StageNumbering { position: usize, id: u16 },
    DuplicateRuleId { stage: u16, rule: u16 },
}

impl Violation {
    pub fn label(&self) -> &'static str {
        match self {
            Violation::BackwardPromotion { .. } => "backward promotion",
            Violation::PromotionOutOfRange { .. } => "promotion to missing stage",
            Violation::UndeclaredVariable { .. } => "undeclared variable",
            Violation::ResourceLeak { .. } => "resource leak",
            Violation::DoubleDisposition { .. } => "resource disposed twice",
            Violation::ResCount { .. } => "RES count outside {1,2}",
            Violation::BadRef { .. } => "resource reference out of range",
            Violation::SendWithoutSource { .. } => "message without producing action",
            Violation::TimerNeverSet { .. } => "timer never set",
            Violation::StageNumbering { .. } => "stage ids not sequential",
            Violation::DuplicateRuleId { .. } => "duplicate rule id",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::StageNumbering { position, id } => {
                write!(f, "{}: stage at position {position} has id {id}", self.label())
            }
            other => write!(f, "{}: {:?}", other.label(), other),
        }
    }
}

/// What a rule's action list did to one matched resource.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Disposition {
    Promoted,
    Freed,
    Measured,
    Purified,
    Swapped,
}

pub fn validate_ruleset(rs: &RuleSet) -> Vec<Violation> {
    let mut out = vec![];
    let timers_set: BTreeSet<TimerId> = rs
        .stages
        .iter()
        .flat_map(|s| s.rules.iter())
        .flat_map(|r| r.actions.iter())
        .filter_map(|a| match a {
            Action::SetTimer { timer, .. } => Some(*timer),
            _ => None,
        })
        .collect();

    for (pos, st) in rs.stages.iter().enumerate() {
        if st.id as usize != pos {
            out.push(Violation::StageNumbering { position: pos, id: st.id });
        }
        let declared: BTreeSet<VarId> = st.variables.iter().map(|v| v.id).collect();
        let mut rule_ids = BTreeSet::new();
        for rule in &st.rules {
            let (s, r) = (st.id, rule.id);
            if !rule_ids.insert(r) {
                out.push(Violation::DuplicateRuleId { stage: s, rule: r });
            }
            for c in &rule.conditions {
                match c {
                    Condition::Cmp { var, .. } if !declared.contains(var) => {
                        out.push(Violation::UndeclaredVariable { stage: s, rule: r, var: *var })
                    }
                    Condition::Res { count, .. } if !(1..=2).contains(count) => {
                        out.push(Violation::ResCount { stage: s, rule: r, count: *count })
                    }
                    Condition::Timer { timer } if !timers_set.contains(timer) => {
                        out.push(Violation::TimerNeverSet { stage: s, rule: r, timer: *timer })
                    }
                    _ => {}
                }
            }
            check_actions(rs, st, rule, &declared, &mut out);
        }
    }
    out
}

fn check_actions(
    rs: &RuleSet,
    st: &Stage,
    rule: &Rule,
    declared: &BTreeSet<VarId>,
    out: &mut Vec<Violation>,
) {
    let (s, r) = (st.id, rule.id);
    let n = rule.matched_count();
    let mut disp: Vec<Option<Disposition>> = vec![None; n];
    let check_ref = |x: ResRef, out: &mut Vec<Violation>| -> bool {
        if x.index() >= n {
            out.push(Violation::BadRef { stage: s, rule: r, res: x });
            false
        } else {
            true
        }
    };
    for a in &rule.actions {
        let (refs, d) = match a {
            Action::Promote { refs, stage } => {
                if *stage <= s {
                    out.push(Violation::BackwardPromotion { stage: s, rule: r, target: *stage });
                } else if *stage as usize >= rs.stages.len() {
                    out.push(Violation::PromotionOutOfRange { stage: s, rule: r, target: *stage });
                }
                (refs, Disposition::Promoted)
            }
            Action::Free { refs } => (refs, Disposition::Freed),
            Action::Meas { refs, .. } => (refs, Disposition::Measured),
            Action::Qcirc { refs, circuit } => (
                refs,
                match circuit {
                    Circuit::PurifyPair => Disposition::Purified,
                    Circuit::Swap | Circuit::Bsm => Disposition::Swapped,
                },
            ),
            Action::Set { var, .. } => {
                if !declared.contains(var) {
                    out.push(Violation::UndeclaredVariable { stage: s, rule: r, var: *var });
                }
                continue;
            }
            Action::SetTimer { anchor, .. } => {
                if let TimerAnchor::PairAge(x) = anchor {
                    check_ref(*x, out);
                }
                continue;
            }
            Action::Send { kind, about, to } => {
                if let Destination::PartnerOf(x) = to {
                    check_ref(*x, out);
                }
                if check_ref(*about, out) {
                    let ok = match (kind, disp[about.index()]) {
                        (MessageKind::Transfer, Some(Disposition::Swapped)) => true,
                        (MessageKind::MeasResult, Some(Disposition::Purified)) => true,
                        (MessageKind::MeasResult, Some(Disposition::Measured)) => true,
                        (MessageKind::Free, Some(Disposition::Freed)) => true,
                        (MessageKind::Update, _) => true,
                        _ => false,
                    };
                    if !ok {
                        out.push(Violation::SendWithoutSource {
                            stage: s,
                            rule: r,
                            res: *about,
                            kind: *kind,
                        });
                    }
                }
                continue;
            }
        };
        for x in refs {
            if check_ref(*x, out) {
                if disp[x.index()].is_some() {
                    out.push(Violation::DoubleDisposition { stage: s, rule: r, res: *x });
                }
                disp[x.index()] = Some(d);
            }
        }
    }
    for (i, d) in disp.iter().enumerate() {
        if d.is_none() {
            out.push(Violation::ResourceLeak { stage: s, rule: r, res: ResRef(i as u8) });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn res(count: u8) -> Condition {
        Condition::Res {
            partner: PartnerSpec::Node(NodeAddr(1)),
            min_fidelity: Fidelity::FLOOR,
            count,
        }
    }

    fn one_rule(conditions: Vec<Condition>, actions: Vec<Action>) -> RuleSet {
        RuleSet {
            id: RuleSetId(0),
            connection: ConnectionId(0),
            owner: NodeAddr(0),
            stages: vec![
                Stage::default(),
                Stage {
                    id: 1,
                    rules: vec![Rule {
                        id: 0,
                        conditions,
                        actions,
                    }],
                    variables: vec![],
                },
                Stage {
                    id: 2,
                    ..Stage::default()
                },
            ],
        }
    }

    #[test]
    fn backward_promotion() {
        let rs = one_rule(
            vec![res(1)],
            vec![Action::Promote {
                refs: vec![ResRef(0)],
                stage: 0,
            }],
        );
        let v = validate_ruleset(&rs);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].label(), "backward promotion");
    }

    #[test]
    fn leak_when_freeing_one_of_two() {
        let rs = one_rule(
            vec![res(2)],
            vec![Action::Free {
                refs: vec![ResRef(0)],
            }],
        );
        let v = validate_ruleset(&rs);
        assert_eq!(
            v,
            vec![Violation::ResourceLeak {
                stage: 1,
                rule: 0,
                res: ResRef(1)
            }]
        );
    }

    #[test]
    fn res_count_and_undeclared() {
        let rs = one_rule(
            vec![
                res(3),
                Condition::Cmp {
                    var: VarId(4),
                    op: CmpOp::Eq,
                    value: Value::Int(0),
                },
            ],
            vec![Action::Free {
                refs: vec![ResRef(0), ResRef(1), ResRef(2)],
            }],
        );
        let labels: Vec<_> = validate_ruleset(&rs).iter().map(|v| v.label()).collect();
        assert!(labels.contains(&"RES count outside {1,2}"));
        assert!(labels.contains(&"undeclared variable"));
    }

    #[test]
    fn transfer_needs_swap() {
        let rs = one_rule(
            vec![res(1)],
            vec![
                Action::Free {
                    refs: vec![ResRef(0)],
                },
                Action::Send {
                    kind: MessageKind::Transfer,
                    about: ResRef(0),
                    to: Destination::PartnerOf(ResRef(0)),
                },
            ],
        );
        assert_eq!(validate_ruleset(&rs)[0].label(), "message without producing action");
    }

    #[test]
    fn wire_fixture_has_only_expected_findings() {
        let rs = super::super::wire::tests::every_clause_fixture();
        // The fixture is a codec exercise, not a sane program.
        assert!(!validate_ruleset(&rs).is_empty());
    }
}
