//! Base entanglement generation between neighbours.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::kernel::SimTime;
use crate::{Fidelity, LinkId, NodeAddr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum NodeType {
    Comp,
    Meas,
    Snsr,
    Rep1,
    /// Accepted in topologies but never given RuleSets.
    Rep2,
    Rtr,
    Bsa,
    Epps,
    Osw,
}

impl NodeType {
    /// Nodes that can terminate a connection.
    pub fn is_end_node(self) -> bool {
        matches!(self, NodeType::Comp | NodeType::Meas | NodeType::Snsr)
    }

    /// Nodes that can hold memory qubits and run RuleSets.
    pub fn runs_rulesets(self) -> bool {
        matches!(
            self,
            NodeType::Comp | NodeType::Meas | NodeType::Snsr | NodeType::Rep1 | NodeType::Rtr
        )
    }

    /// Passive optical support nodes.
    pub fn is_support(self) -> bool {
        matches!(self, NodeType::Bsa | NodeType::Epps | NodeType::Osw)
    }
}

impl FromStr for NodeType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_uppercase().as_str() {
            "COMP" => NodeType::Comp,
            "MEAS" => NodeType::Meas,
            "SNSR" => NodeType::Snsr,
            "REP1" => NodeType::Rep1,
            "REP2" => NodeType::Rep2,
            "RTR" => NodeType::Rtr,
            "BSA" => NodeType::Bsa,
            "EPPS" => NodeType::Epps,
            "OSW" => NodeType::Osw,
            other => return Err(format!("unknown node type {other:?}")),
        })
    }
}

impl fmt::Display for NodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeType::Comp => "COMP",
            NodeType::Meas => "MEAS",
            NodeType::Snsr => "SNSR",
            NodeType::Rep1 => "REP1",
            NodeType::Rep2 => "REP2",
            NodeType::Rtr => "RTR",
            NodeType::Bsa => "BSA",
            NodeType::Epps => "EPPS",
            NodeType::Osw => "OSW",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCapability {
    pub node_type: NodeType,
    pub memory_qubits: u32,
    /// Memory coherence time in seconds; infinite for perfect memories.
    pub t_mem_s: f64,
    /// Minimal two-port repeater that can only drive one interface per slot.
    pub single_active_interface: bool,
}

impl NodeCapability {
    pub fn new(node_type: NodeType) -> Self {
        NodeCapability {
            node_type,
            memory_qubits: if node_type == NodeType::Meas { 0 } else { 64 },
            t_mem_s: f64::INFINITY,
            single_active_interface: false,
        }
    }

    pub fn stores_qubits(&self) -> bool {
        self.node_type != NodeType::Meas
    }

    /// Depolarizing rate contributed by this node's half of a pair.
    pub fn decoherence_rate(&self) -> f64 {
        if !self.stores_qubits() || self.t_mem_s.is_infinite() {
            0.0
        } else {
            1.0 / self.t_mem_s
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkArchitecture {
    /// Memory-memory link, heralded at the endpoints.
    Direct,
    /// Memory-interface-memory: both photons meet at a Bell state analyzer.
    BsaMidpoint(NodeAddr),
    /// Entangled photon pair source in the middle. Same success chain as
    /// the BSA midpoint.
    EppsMidpoint(NodeAddr),
}

impl LinkArchitecture {
    pub fn midpoint(self) -> Option<NodeAddr> {
        match self {
            LinkArchitecture::Direct => None,
            LinkArchitecture::BsaMidpoint(m) | LinkArchitecture::EppsMidpoint(m) => Some(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub a: NodeAddr,
    pub b: NodeAddr,
    pub architecture: LinkArchitecture,
    pub length_km: f64,
    pub attenuation_db_per_km: f64,
    pub attempt_rate_hz: f64,
    pub detector_efficiency: f64,
    pub base_fidelity: Fidelity,
    /// Memory qubits usable by this link at each end.
    pub qubit_capacity: u32,
    /// Extra insertion loss from optical switches on the path.
    pub switch_loss_db: f64,
}

impl LinkSpec {
    pub fn new(a: NodeAddr, b: NodeAddr, length_km: f64, base_fidelity: Fidelity) -> Self {
        LinkSpec {
            a,
            b,
            architecture: LinkArchitecture::Direct,
            length_km,
            attenuation_db_per_km: 0.2,
            attempt_rate_hz: 1000.0,
            detector_efficiency: 1.0,
            base_fidelity,
            qubit_capacity: 4,
            switch_loss_db: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut errs = vec![];
        if self.a == self.b {
            errs.push("link endpoints must differ".to_string());
        }
        if !(self.length_km > 0.0) {
            errs.push(format!("length_km ({}) must be > 0", self.length_km));
        }
        if !(self.attempt_rate_hz > 0.0) {
            errs.push(format!(
                "attempt_rate_hz ({}) must be > 0",
                self.attempt_rate_hz
            ));
        }
        if !(self.detector_efficiency > 0.0 && self.detector_efficiency <= 1.0) {
            errs.push(format!(
                "detector_efficiency ({}) must be in (0, 1]",
                self.detector_efficiency
            ));
        }
        if self.attenuation_db_per_km < 0.0 || self.switch_loss_db < 0.0 {
            errs.push("losses must be non-negative".to_string());
        }
        if self.qubit_capacity == 0 {
            errs.push("qubit_capacity must be >= 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs.join("; "))
        }
    }

    pub fn other_end(&self, n: NodeAddr) -> NodeAddr {
        if n == self.a {
            self.b
        } else {
            self.a
        }
    }

    pub fn attempt_period(&self) -> SimTime {
        SimTime::from_secs(1.0 / self.attempt_rate_hz)
    }

    /// Mean wall time per raw pair when qubits are always free.
    pub fn raw_seconds_per_pair(&self) -> f64 {
        1.0 / (self.attempt_rate_hz * attempt_success_probability(self))
    }
}

/// Per-attempt heralded success probability.
///
/// Direct links see one detector and the full fiber. Midpoint links need
/// both photons detected and the linear-optics Bell measurement, which caps
/// out at 1/2; each photon covers half the length so total fiber loss is the
/// same as a direct link.
pub fn attempt_success_probability(link: &LinkSpec) -> f64 {
    let loss_db = link.attenuation_db_per_km * link.length_km + link.switch_loss_db;
    let transmission = 10f64.powf(-loss_db / 10.0);
    match link.architecture {
        LinkArchitecture::Direct => link.detector_efficiency * transmission,
        LinkArchitecture::BsaMidpoint(_) | LinkArchitecture::EppsMidpoint(_) => {
            0.5 * link.detector_efficiency.powi(2) * transmission
        }
    }
}

/// Network-scoped interface address: the QNIC of `node` facing `link`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QnicAddr {
    pub node: NodeAddr,
    pub link: LinkId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhysicalQubitAddr {
    pub qnic: QnicAddr,
    pub index: u32,
}

/// Globally unique name of a Bell pair, shared by both holders.
///
/// Ordering is by timestamp first so that names minted later compare greater.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExternalName {
    pub timestamp: SimTime,
    pub minter: NodeAddr,
    pub seq: u32,
}

impl fmt::Display for ExternalName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{},{},{}>", self.minter, self.timestamp, self.seq)
    }
}

/// Per-node name source. The sequence number only disambiguates names minted
/// in the same picosecond.
#[derive(Debug, Default, Clone)]
pub struct NameMinter {
    last_tick: Option<SimTime>,
    seq: u32,
}

impl NameMinter {
    pub fn mint(&mut self, minter: NodeAddr, now: SimTime) -> ExternalName {
        if self.last_tick == Some(now) {
            self.seq += 1;
        } else {
            self.last_tick = Some(now);
            self.seq = 0;
        }
        ExternalName {
            timestamp: now,
            minter,
            seq: self.seq,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn spec(arch: LinkArchitecture, len: f64, eta: f64) -> LinkSpec {
        let mut l = LinkSpec::new(NodeAddr(0), NodeAddr(1), len, Fidelity::ONE);
        l.architecture = arch;
        l.detector_efficiency = eta;
        l
    }

    #[test]
    fn lossless_limits() {
        let d = spec(LinkArchitecture::Direct, 1e-12, 1.0);
        assert!((attempt_success_probability(&d) - 1.0).abs() < 1e-9);
        let m = spec(LinkArchitecture::BsaMidpoint(NodeAddr(2)), 1e-12, 1.0);
        assert!((attempt_success_probability(&m) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn bsa_twenty_km() {
        let m = spec(LinkArchitecture::BsaMidpoint(NodeAddr(2)), 20.0, 0.9);
        let p = attempt_success_probability(&m);
        assert!((p - 0.5 * 0.81 * 10f64.powf(-0.4)).abs() < 1e-15);
        assert!((p - 0.161_23).abs() < 1e-5);
    }

    #[test]
    fn switch_loss_reduces_probability() {
        let mut d = spec(LinkArchitecture::Direct, 10.0, 1.0);
        let p0 = attempt_success_probability(&d);
        d.switch_loss_db = 3.0;
        assert!(attempt_success_probability(&d) < p0);
    }

    #[test]
    fn same_tick_names_differ_in_seq() {
        let mut m = NameMinter::default();
        let a = m.mint(NodeAddr(1), SimTime(5));
        let b = m.mint(NodeAddr(1), SimTime(5));
        assert_eq!(a.timestamp, b.timestamp);
        assert_ne!(a.seq, b.seq);
        let c = m.mint(NodeAddr(1), SimTime(9));
        assert!(c > b);
    }

    #[test]
    fn million_mints_no_collisions() {
        let mut m = NameMinter::default();
        let mut seen = HashSet::new();
        for i in 0..1_000_000u64 {
            let n = m.mint(NodeAddr(3), SimTime(i / 7));
            assert!(seen.insert(n));
        }
    }

    #[test]
    fn validation_catches_bad_specs() {
        let mut l = spec(LinkArchitecture::Direct, 0.0, 1.5);
        l.attempt_rate_hz = 0.0;
        let err = l.validate().unwrap_err();
        assert!(err.contains("length_km"));
        assert!(err.contains("attempt_rate_hz"));
        assert!(err.contains("detector_efficiency"));
    }
}
