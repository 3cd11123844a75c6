//! RuleSets: the per-connection program each node runs.
//!
//! A RuleSet is a list of Stages. Resources enter stage 0 and only ever move
//! to later stages. Promoting into a stage that has no rules hands the
//! resource to the application (delivery).
//!
//! Actions refer to matched resources by [`ResRef`], the position in the
//! concatenated list of resources selected by the rule's RES clauses, in
//! clause order.

pub mod text;
pub mod validate;
pub mod wire;

use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::kernel::SimTime;
use crate::link::ExternalName;
use crate::quantum::DecayRate;
use crate::{ConnectionId, Fidelity, NodeAddr};

pub use validate::{validate_ruleset, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RuleSetId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VarId(pub u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TimerId(pub u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ResRef(pub u8);

impl ResRef {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    Eq,
    Lt,
    Gt,
    Le,
    Ge,
}

impl CmpOp {
    pub fn holds(self, lhs: Value, rhs: Value) -> bool {
        let (a, b) = (lhs.as_f64(), rhs.as_f64());
        match self {
            CmpOp::Eq => a == b,
            CmpOp::Lt => a < b,
            CmpOp::Gt => a > b,
            CmpOp::Le => a <= b,
            CmpOp::Ge => a >= b,
        }
    }
}

/// Stage variable value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Int(i64),
    Real(f64),
}

impl Value {
    pub fn as_f64(self) -> f64 {
        match self {
            Value::Int(i) => i as f64,
            Value::Real(r) => r,
        }
    }

    /// Integer plus integer stays integer; anything else widens to real.
    pub fn add(self, other: Value) -> Value {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => Value::Int(a.saturating_add(b)),
            (a, b) => Value::Real(a.as_f64() + b.as_f64()),
        }
    }
}

impl Eq for Value {}

impl Hash for Value {
    fn hash<H: Hasher>(&self, state: &mut H) {
        match self {
            Value::Int(i) => (0u8, *i).hash(state),
            Value::Real(r) => (1u8, r.to_bits()).hash(state),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "int {i}"),
            Value::Real(r) => write!(f, "real {r}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PartnerSpec {
    Node(NodeAddr),
    /// Any partner, restricted to resources already owned by this connection.
    Any,
}

impl PartnerSpec {
    pub fn matches(self, n: NodeAddr) -> bool {
        match self {
            PartnerSpec::Node(p) => p == n,
            PartnerSpec::Any => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Condition {
    Cmp {
        var: VarId,
        op: CmpOp,
        value: Value,
    },
    /// Holds only while the timer's expiry token is being processed. When the
    /// rule also has RES clauses, the token must be on the selected resources.
    Timer { timer: TimerId },
    Res {
        partner: PartnerSpec,
        min_fidelity: Fidelity,
        count: u8,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    Z,
    X,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Circuit {
    /// Bilateral CNOT parity check on two pairs with the same partner. The
    /// sacrificed pair's qubit is measured as part of the circuit.
    PurifyPair,
    /// Bell-state measurement splicing two pairs with different partners.
    Swap,
    /// Same as `Swap`; kept as a distinct tag for RuleSets that name it so.
    Bsm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    Free,
    Update,
    MeasResult,
    Transfer,
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MessageKind::Free => "FREE",
            MessageKind::Update => "UPDATE",
            MessageKind::MeasResult => "MEAS_RESULT",
            MessageKind::Transfer => "TRANSFER",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Destination {
    /// The current partner of the referenced resource.
    PartnerOf(ResRef),
    Node(NodeAddr),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum VarUpdate {
    Add(Value),
    Assign(Value),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TimerAnchor {
    /// Expires `duration` after the action runs; token goes to the stage.
    Now,
    /// Expires when the referenced pair's age reaches `duration`. The age
    /// counts from the pair's name timestamp, so both holders agree on it and
    /// a rename restarts it.
    PairAge(ResRef),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    SetTimer {
        timer: TimerId,
        duration: SimTime,
        anchor: TimerAnchor,
    },
    Promote {
        refs: Vec<ResRef>,
        stage: u16,
    },
    Free {
        refs: Vec<ResRef>,
    },
    Set {
        var: VarId,
        update: VarUpdate,
    },
    Meas {
        refs: Vec<ResRef>,
        basis: Basis,
    },
    Qcirc {
        refs: Vec<ResRef>,
        circuit: Circuit,
    },
    /// Emit a protocol message about a resource handled earlier in the same
    /// action list. The payload comes from that earlier action.
    Send {
        kind: MessageKind,
        about: ResRef,
        to: Destination,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarDecl {
    pub id: VarId,
    pub name: String,
    pub init: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub id: u16,
    pub conditions: Vec<Condition>,
    pub actions: Vec<Action>,
}

impl Rule {
    /// Number of resources this rule selects.
    pub fn matched_count(&self) -> usize {
        self.conditions
            .iter()
            .map(|c| match c {
                Condition::Res { count, .. } => *count as usize,
                _ => 0,
            })
            .sum()
    }

    pub fn timer_condition(&self) -> Option<TimerId> {
        self.conditions.iter().find_map(|c| match c {
            Condition::Timer { timer } => Some(*timer),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Stage {
    pub id: u16,
    pub rules: Vec<Rule>,
    pub variables: Vec<VarDecl>,
}

impl Stage {
    pub fn is_delivery(&self) -> bool {
        self.rules.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    pub id: RuleSetId,
    pub connection: ConnectionId,
    pub owner: NodeAddr,
    pub stages: Vec<Stage>,
}

impl RuleSet {
    pub fn new(id: RuleSetId, connection: ConnectionId, owner: NodeAddr) -> Self {
        RuleSet {
            id,
            connection,
            owner,
            stages: Vec::new(),
        }
    }

    pub fn stage(&self, id: u16) -> Option<&Stage> {
        self.stages.get(id as usize)
    }

    /// Every node named by a RES partner or a fixed SEND destination.
    pub fn referenced_nodes(&self) -> Vec<NodeAddr> {
        let mut out = vec![];
        for st in &self.stages {
            for r in &st.rules {
                for c in &r.conditions {
                    if let Condition::Res {
                        partner: PartnerSpec::Node(n),
                        ..
                    } = c
                    {
                        out.push(*n);
                    }
                }
                for a in &r.actions {
                    if let Action::Send {
                        to: Destination::Node(n),
                        ..
                    } = a
                    {
                        out.push(*n);
                    }
                }
            }
        }
        out.sort();
        out.dedup();
        out
    }
}

/// Pauli frame correction attached to a pair half.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum Pauli {
    #[default]
    I,
    X,
    Z,
    XZ,
}

impl Pauli {
    pub fn from_bits(x: bool, z: bool) -> Pauli {
        match (x, z) {
            (false, false) => Pauli::I,
            (true, false) => Pauli::X,
            (false, true) => Pauli::Z,
            (true, true) => Pauli::XZ,
        }
    }

    pub fn bits(self) -> (bool, bool) {
        match self {
            Pauli::I => (false, false),
            Pauli::X => (true, false),
            Pauli::Z => (false, true),
            Pauli::XZ => (true, true),
        }
    }

    /// Product up to global phase.
    pub fn compose(self, other: Pauli) -> Pauli {
        let (a, b) = (self.bits(), other.bits());
        Pauli::from_bits(a.0 ^ b.0, a.1 ^ b.1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageBody {
    Free {
        name: ExternalName,
    },
    Update {
        name: ExternalName,
        correction: Pauli,
    },
    /// One end's half of a purification round: the local parity bit.
    MeasResult {
        kept: ExternalName,
        sacrificed: ExternalName,
        round: u32,
        outcome: u8,
    },
    Transfer {
        old_name: ExternalName,
        new_name: ExternalName,
        new_partner: NodeAddr,
        correction: Option<Pauli>,
        /// The swapper's estimate of the new pair at swap time.
        est_fidelity: Fidelity,
        rate: DecayRate,
    },
}

impl MessageBody {
    pub fn kind(&self) -> MessageKind {
        match self {
            MessageBody::Free { .. } => MessageKind::Free,
            MessageBody::Update { .. } => MessageKind::Update,
            MessageBody::MeasResult { .. } => MessageKind::MeasResult,
            MessageBody::Transfer { .. } => MessageKind::Transfer,
        }
    }

    /// The name the receiver looks up.
    pub fn subject(&self) -> ExternalName {
        match self {
            MessageBody::Free { name } | MessageBody::Update { name, .. } => *name,
            MessageBody::MeasResult { kept, .. } => *kept,
            MessageBody::Transfer { old_name, .. } => *old_name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProtocolMessage {
    pub connection: ConnectionId,
    pub sender: NodeAddr,
    pub body: MessageBody,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pauli_group() {
        for a in [Pauli::I, Pauli::X, Pauli::Z, Pauli::XZ] {
            assert_eq!(a.compose(a), Pauli::I);
            assert_eq!(a.compose(Pauli::I), a);
        }
        assert_eq!(Pauli::X.compose(Pauli::Z), Pauli::XZ);
    }

    #[test]
    fn value_arith() {
        assert_eq!(Value::Int(1).add(Value::Int(2)), Value::Int(3));
        assert_eq!(Value::Int(1).add(Value::Real(0.5)), Value::Real(1.5));
        assert!(CmpOp::Ge.holds(Value::Int(2), Value::Real(2.0)));
        assert!(!CmpOp::Lt.holds(Value::Int(2), Value::Int(2)));
    }
}
