//! Discrete-event simulator for first-generation quantum repeater networks
//! driven by per-connection RuleSets.
//!
//! The crate is organised bottom-up:
//!
//! * [`quantum`] Werner fidelity algebra plus a density-matrix oracle.
//! * [`kernel`] event queue, clock, seeded randomness, classical latency.
//! * [`link`] base entanglement generation parameters and name minting.
//! * [`ruleset`] the RuleSet data model, wire codec, validator and text dump.
//! * [`engine`] per-node resource pools, ground-truth pair registry and
//!   condition matching.
//! * [`routing`] seconds-per-pair link cost, qDijkstra, multiplexing.
//! * [`connection`] connection requests, the RuleSet generator and the
//!   offline race/leapfrog verifier.
//! * [`internet`] recursive layering, virtual links and border rewriting.
//! * [`plan`] offline routing and static checks of a scenario.
//! * [`scenario`], [`metrics`], [`sim`] configuration, output and the
//!   simulation driver that wires everything into the event loop.

pub mod connection;
pub mod engine;
pub mod internet;
pub mod kernel;
pub mod link;
pub mod metrics;
pub mod plan;
pub mod quantum;
pub mod routing;
pub mod ruleset;
pub mod scenario;
pub mod sim;
pub mod topology;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use kernel::SimTime;
pub use quantum::Fidelity;

/// Network address of a node. Dense index into the topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeAddr(pub u32);

impl NodeAddr {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkId(pub u32);

impl LinkId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConnectionId(pub u64);

impl fmt::Display for ConnectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}
