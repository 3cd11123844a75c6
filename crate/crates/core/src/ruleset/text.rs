//! Human-readable dump, one clause per line.

use std::fmt::Write;

use super::*;

fn refs(r: &[ResRef]) -> String {
    let v: Vec<String> = r.iter().map(|x| x.0.to_string()).collect();
    format!("[{}]", v.join(","))
}

fn partner(p: PartnerSpec) -> String {
    match p {
        PartnerSpec::Node(n) => n.to_string(),
        PartnerSpec::Any => "*".into(),
    }
}

pub fn condition_line(c: &Condition) -> String {
    match c {
        Condition::Cmp { var, op, value } => {
            format!("CMP var={} op={:?} value={}", var.0, op, value)
        }
        Condition::Timer { timer } => format!("TIMER timer={}", timer.0),
        Condition::Res {
            partner: p,
            min_fidelity,
            count,
        } => format!(
            "RES partner={} min_fidelity={} count={}",
            partner(*p),
            min_fidelity,
            count
        ),
    }
}

pub fn action_line(a: &Action) -> String {
    match a {
        Action::SetTimer {
            timer,
            duration,
            anchor,
        } => {
            let anchor = match anchor {
                TimerAnchor::Now => "now".to_string(),
                TimerAnchor::PairAge(x) => format!("age:{}", x.0),
            };
            format!(
                "SETTIMER timer={} duration_ps={} anchor={}",
                timer.0, duration.0, anchor
            )
        }
        Action::Promote { refs: r, stage } => format!("PROMOTE refs={} stage={}", refs(r), stage),
        Action::Free { refs: r } => format!("FREE refs={}", refs(r)),
        Action::Set { var, update } => match update {
            VarUpdate::Add(v) => format!("SET var={} add={}", var.0, v),
            VarUpdate::Assign(v) => format!("SET var={} assign={}", var.0, v),
        },
        Action::Meas { refs: r, basis } => format!("MEAS refs={} basis={:?}", refs(r), basis),
        Action::Qcirc { refs: r, circuit } => {
            let c = match circuit {
                Circuit::PurifyPair => "PURIFY_PAIR",
                Circuit::Swap => "SWAP",
                Circuit::Bsm => "BSM",
            };
            format!("QCIRC refs={} circuit={}", refs(r), c)
        }
        Action::Send { kind, about, to } => {
            let to = match to {
                Destination::PartnerOf(x) => format!("partner:{}", x.0),
                Destination::Node(n) => n.to_string(),
            };
            format!("SEND kind={} about={} to={}", kind, about.0, to)
        }
    }
}

pub fn dump(rs: &RuleSet) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "ruleset id={} connection={} owner={}",
        rs.id.0, rs.connection, rs.owner
    );
    for st in &rs.stages {
        let _ = writeln!(s, "  stage id={} rules={}", st.id, st.rules.len());
        for v in &st.variables {
            let _ = writeln!(s, "    var id={} name={} init={}", v.id.0, v.name, v.init);
        }
        for r in &st.rules {
            let _ = writeln!(s, "    rule id={}", r.id);
            for c in &r.conditions {
                let _ = writeln!(s, "      if {}", condition_line(c));
            }
            for a in &r.actions {
                let _ = writeln!(s, "      do {}", action_line(a));
            }
        }
    }
    s
}
