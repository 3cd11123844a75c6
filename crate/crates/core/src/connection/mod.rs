//! Connection setup data: requests, per-hop link information, setup
//! messages and their wire encoding. RuleSet generation and static
//! verification live in the submodules; the message handling itself runs
//! inside the simulator.

pub mod generator;
pub mod verifier;

use std::fmt;

use serde::Serialize;

use crate::kernel::SimTime;
use crate::link::NodeType;
use crate::ruleset::wire::{get_ruleset, put_ruleset, DecodeError, DecodeErrorKind, Reader, Writer};
use crate::ruleset::RuleSet;
use crate::{ConnectionId, Fidelity, LinkId, NodeAddr};

pub use generator::{generate_rulesets, GeneratedPlan, GeneratorError, GeneratorOptions};
pub use verifier::{verify_rulesets, Finding, FindingKind, VerifierOptions, VerifierReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mode {
    Stream,
    Count(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Requirements {
    pub min_fidelity: Fidelity,
    pub mode: Mode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HopKind {
    Physical(LinkId),
    /// A child network crossed as a single hop between two of its borders.
    Virtual { network: u32 },
}

/// What the outbound pass learned about one hop.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkInfo {
    pub a: NodeAddr,
    pub b: NodeAddr,
    pub kind: HopKind,
    pub seconds_per_pair: f64,
    pub base_fidelity: Fidelity,
    pub available_qubits: u32,
    /// One-way classical latency between the hop's ends.
    pub latency: SimTime,
    pub a_type: NodeType,
    pub b_type: NodeType,
    pub a_t_mem_s: f64,
    pub b_t_mem_s: f64,
}

impl LinkInfo {
    /// Both ends can hold two pairs and the hop is a real link.
    pub fn pumpable(&self) -> bool {
        matches!(self.kind, HopKind::Physical(_))
            && self.a_type != NodeType::Meas
            && self.b_type != NodeType::Meas
    }

    pub fn end_rate(t_mem_s: f64, ty: NodeType) -> f64 {
        if ty == NodeType::Meas || t_mem_s.is_infinite() {
            0.0
        } else {
            1.0 / t_mem_s
        }
    }

    /// Depolarizing rate of a pair on this hop.
    pub fn pair_rate(&self) -> f64 {
        Self::end_rate(self.a_t_mem_s, self.a_type) + Self::end_rate(self.b_t_mem_s, self.b_type)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConnectionRequest {
    pub id: ConnectionId,
    /// Layer of the network the request is routed in; innermost is 0.
    pub layer: u32,
    pub initiator: NodeAddr,
    pub responder: NodeAddr,
    pub requirements: Requirements,
    /// Nodes visited so far, starting with the initiator.
    pub path: Vec<NodeAddr>,
    pub accumulated: Vec<LinkInfo>,
    /// Suspended outer request that spawned this one at a border.
    pub parent: Option<Box<ConnectionRequest>>,
}

impl ConnectionRequest {
    pub fn new(id: ConnectionId, initiator: NodeAddr, responder: NodeAddr, requirements: Requirements) -> Self {
        ConnectionRequest {
            id,
            layer: 0,
            initiator,
            responder,
            requirements,
            path: vec![initiator],
            accumulated: vec![],
            parent: None,
        }
    }

    pub fn hops(&self) -> usize {
        self.accumulated.len()
    }

    /// Every node address the request carries at its own layer.
    pub fn addresses(&self) -> Vec<NodeAddr> {
        let mut v = vec![self.initiator, self.responder];
        v.extend(&self.path);
        for l in &self.accumulated {
            v.push(l.a);
            v.push(l.b);
        }
        v.sort();
        v.dedup();
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum SetupFailure {
    NoRoute { at: NodeAddr },
    Refused { at: NodeAddr, reason: String },
    Infeasible(String),
    Verification(String),
    Child(String),
}

impl fmt::Display for SetupFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SetupFailure::NoRoute { at } => write!(f, "no route from {at}"),
            SetupFailure::Refused { at, reason } => write!(f, "refused at {at}: {reason}"),
            SetupFailure::Infeasible(s) => write!(f, "infeasible fidelity: {s}"),
            SetupFailure::Verification(s) => write!(f, "verification failed: {s}"),
            SetupFailure::Child(s) => write!(f, "segment setup failed: {s}"),
        }
    }
}

/// Return-pass payload: RuleSets still to be installed, nearest first.
#[derive(Debug, Clone, PartialEq)]
pub struct InstallBundle {
    pub connection: ConnectionId,
    pub layer: u32,
    pub rulesets: Vec<RuleSet>,
    /// Outer-layer installs to resume once this layer is done.
    pub resume: Option<Box<InstallBundle>>,
}

fn put_node_type(w: &mut Writer, t: NodeType) {
    w.str(&t.to_string());
}

fn get_node_type(r: &mut Reader) -> Result<NodeType, DecodeError> {
    let s = r.str()?;
    match s.parse() {
        Ok(t) => Ok(t),
        Err(e) => r.error(DecodeErrorKind::Invalid(e)),
    }
}

fn put_link_info(w: &mut Writer, l: &LinkInfo) {
    w.node(l.a);
    w.node(l.b);
    match l.kind {
        HopKind::Physical(id) => {
            w.u8(1);
            w.u32(id.0);
        }
        HopKind::Virtual { network } => {
            w.u8(2);
            w.u32(network);
        }
    }
    w.f64(l.seconds_per_pair);
    w.fidelity(l.base_fidelity);
    w.u32(l.available_qubits);
    w.time(l.latency);
    put_node_type(w, l.a_type);
    put_node_type(w, l.b_type);
    w.f64(l.a_t_mem_s);
    w.f64(l.b_t_mem_s);
}

fn get_link_info(r: &mut Reader) -> Result<LinkInfo, DecodeError> {
    let a = r.node()?;
    let b = r.node()?;
    let kind = match r.tag("hop kind", 2)? {
        1 => HopKind::Physical(LinkId(r.u32()?)),
        _ => HopKind::Virtual { network: r.u32()? },
    };
    Ok(LinkInfo {
        a,
        b,
        kind,
        seconds_per_pair: r.f64()?,
        base_fidelity: r.fidelity()?,
        available_qubits: r.u32()?,
        latency: r.time()?,
        a_type: get_node_type(r)?,
        b_type: get_node_type(r)?,
        a_t_mem_s: r.f64()?,
        b_t_mem_s: r.f64()?,
    })
}

fn put_request(w: &mut Writer, q: &ConnectionRequest) {
    w.u64(q.id.0);
    w.u32(q.layer);
    w.node(q.initiator);
    w.node(q.responder);
    w.fidelity(q.requirements.min_fidelity);
    match q.requirements.mode {
        Mode::Stream => w.u8(1),
        Mode::Count(n) => {
            w.u8(2);
            w.u64(n);
        }
    }
    w.u32(q.path.len() as u32);
    for n in &q.path {
        w.node(*n);
    }
    w.u32(q.accumulated.len() as u32);
    for l in &q.accumulated {
        put_link_info(w, l);
    }
    match &q.parent {
        None => w.u8(1),
        Some(p) => {
            w.u8(2);
            put_request(w, p);
        }
    }
}

fn get_request(r: &mut Reader) -> Result<ConnectionRequest, DecodeError> {
    let id = ConnectionId(r.u64()?);
    let layer = r.u32()?;
    let initiator = r.node()?;
    let responder = r.node()?;
    let min_fidelity = r.fidelity()?;
    let mode = match r.tag("mode", 2)? {
        1 => Mode::Stream,
        _ => Mode::Count(r.u64()?),
    };
    let n = r.u32()?;
    let mut path = Vec::with_capacity(n.min(1024) as usize);
    for _ in 0..n {
        path.push(r.node()?);
    }
    let n = r.u32()?;
    let mut accumulated = Vec::with_capacity(n.min(1024) as usize);
    for _ in 0..n {
        accumulated.push(get_link_info(r)?);
    }
    let parent = match r.tag("parent", 2)? {
        1 => None,
        _ => Some(Box::new(get_request(r)?)),
    };
    Ok(ConnectionRequest {
        id,
        layer,
        initiator,
        responder,
        requirements: Requirements { min_fidelity, mode },
        path,
        accumulated,
        parent,
    })
}

pub fn encode_request(q: &ConnectionRequest) -> Vec<u8> {
    let mut w = Writer::new();
    put_request(&mut w, q);
    w.finish()
}

pub fn decode_request(bytes: &[u8]) -> Result<ConnectionRequest, DecodeError> {
    let mut r = Reader::open(bytes)?;
    let q = get_request(&mut r)?;
    r.close()?;
    Ok(q)
}

fn put_bundle(w: &mut Writer, b: &InstallBundle) {
    w.u64(b.connection.0);
    w.u32(b.layer);
    w.u32(b.rulesets.len() as u32);
    for rs in &b.rulesets {
        put_ruleset(w, rs);
    }
    match &b.resume {
        None => w.u8(1),
        Some(x) => {
            w.u8(2);
            put_bundle(w, x);
        }
    }
}

fn get_bundle(r: &mut Reader) -> Result<InstallBundle, DecodeError> {
    let connection = ConnectionId(r.u64()?);
    let layer = r.u32()?;
    let n = r.u32()?;
    let mut rulesets = Vec::with_capacity(n.min(1024) as usize);
    for _ in 0..n {
        rulesets.push(get_ruleset(r)?);
    }
    let resume = match r.tag("resume", 2)? {
        1 => None,
        _ => Some(Box::new(get_bundle(r)?)),
    };
    Ok(InstallBundle {
        connection,
        layer,
        rulesets,
        resume,
    })
}

pub fn encode_install(b: &InstallBundle) -> Vec<u8> {
    let mut w = Writer::new();
    put_bundle(&mut w, b);
    w.finish()
}

pub fn decode_install(bytes: &[u8]) -> Result<InstallBundle, DecodeError> {
    let mut r = Reader::open(bytes)?;
    let b = get_bundle(&mut r)?;
    r.close()?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn info(a: u32, b: u32, f: f64) -> LinkInfo {
        LinkInfo {
            a: NodeAddr(a),
            b: NodeAddr(b),
            kind: HopKind::Physical(LinkId(a)),
            seconds_per_pair: 0.01,
            base_fidelity: Fidelity::new(f).unwrap(),
            available_qubits: 4,
            latency: SimTime::from_micros(50),
            a_type: NodeType::Comp,
            b_type: NodeType::Rtr,
            a_t_mem_s: f64::INFINITY,
            b_t_mem_s: 0.5,
        }
    }

    #[test]
    fn request_roundtrip_with_parent() {
        let req = Requirements {
            min_fidelity: Fidelity::new(0.9).unwrap(),
            mode: Mode::Count(12),
        };
        let mut outer = ConnectionRequest::new(ConnectionId(1), NodeAddr(0), NodeAddr(9), req);
        outer.accumulated.push(info(0, 1, 0.95));
        outer.path.push(NodeAddr(1));
        let mut inner = ConnectionRequest::new(ConnectionId(1 << 48), NodeAddr(1), NodeAddr(4), req);
        inner.layer = 1;
        inner.accumulated.push(LinkInfo {
            kind: HopKind::Virtual { network: 3 },
            ..info(1, 2, 0.9)
        });
        inner.parent = Some(Box::new(outer));
        let bytes = encode_request(&inner);
        assert_eq!(decode_request(&bytes).unwrap(), inner);
        assert_eq!(encode_request(&decode_request(&bytes).unwrap()), bytes);
    }

    #[test]
    fn pumpable_excludes_measuring_ends() {
        let mut l = info(0, 1, 0.9);
        assert!(l.pumpable());
        l.a_type = NodeType::Meas;
        assert!(!l.pumpable());
        assert_eq!(l.pair_rate(), 2.0);
    }
}
