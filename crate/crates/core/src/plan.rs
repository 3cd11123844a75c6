//! Offline analysis of a scenario: routes and static RuleSet checks,
//! computed without running any events.

use std::sync::Arc;

use serde::Serialize;

use crate::connection::{
    generate_rulesets, verify_rulesets, ConnectionRequest, GeneratorOptions, Mode, Requirements, VerifierOptions,
    VerifierReport,
};
use crate::internet::{Layers, NetworkId};
use crate::kernel::ClassicalFabric;
use crate::routing::EdgeRef;
use crate::scenario::Scenario;
use crate::{Fidelity, NodeAddr};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HopCost {
    pub from: String,
    pub to: String,
    /// `l3` for a physical link, `network:west` for a child network.
    pub edge: String,
    pub seconds_per_pair: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RouteReport {
    pub network: String,
    pub index_fidelity: f64,
    pub path: Vec<String>,
    pub hops: Vec<HopCost>,
    pub total_seconds_per_pair: f64,
}

/// Static check of one connection, or of one segment it would open inside
/// a child network.
#[derive(Debug, Clone, Serialize)]
pub struct StaticCheck {
    pub connection: u64,
    /// Empty for the connection itself, else the child network crossed.
    pub segment: Option<String>,
    pub layer: u32,
    pub initiator: String,
    pub responder: String,
    pub min_fidelity: f64,
    pub path: Vec<String>,
    pub error: Option<String>,
    pub report: Option<VerifierReport>,
}

impl StaticCheck {
    pub fn is_clean(&self) -> bool {
        self.error.is_none() && self.report.as_ref().is_some_and(|r| r.is_clean())
    }
}

fn layers(s: &Scenario) -> Layers {
    let fabric = ClassicalFabric::new(s.topology.nodes.len(), &s.channels, s.settings.loopback);
    Layers::new(Arc::new(s.topology.clone()), Arc::new(s.internet.clone()), fabric)
}

fn edge_name(s: &Scenario, e: EdgeRef) -> String {
    match e {
        EdgeRef::Physical(l) => l.to_string(),
        EdgeRef::Virtual { network } => format!("network:{}", s.internet.network(NetworkId(network)).name),
    }
}

/// Cheapest path between two nodes at an index fidelity, in the deepest
/// network that holds both.
pub fn route_report(s: &Scenario, src: NodeAddr, dst: NodeAddr, index: Fidelity) -> Option<RouteReport> {
    let network = s.internet.common_network(src, dst)?;
    let mut l = layers(s);
    let r = l.route(network, src, dst, index)?;
    let name = |u: NodeAddr| s.topology.name(u).to_string();
    let hops = r
        .nodes
        .windows(2)
        .zip(&r.hops)
        .map(|(w, h)| HopCost {
            from: name(w[0]),
            to: name(w[1]),
            edge: edge_name(s, h.edge),
            seconds_per_pair: h.cost,
        })
        .collect();
    Some(RouteReport {
        network: s.internet.network(network).name.clone(),
        index_fidelity: index.value(),
        path: r.nodes.iter().map(|u| name(*u)).collect(),
        hops,
        total_seconds_per_pair: r.cost,
    })
}

/// Route, generate and verify every configured connection, descending into
/// child networks crossed on the way.
pub fn static_check(s: &Scenario, opts: &VerifierOptions) -> Vec<StaticCheck> {
    let mut l = layers(s);
    let mut out = vec![];
    for c in &s.connections {
        let network = s.internet.common_network(c.initiator, c.responder);
        check_one(s, &mut l, opts, c.id.0, None, network, c.initiator, c.responder, c.requirements, &mut out);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn check_one(
    s: &Scenario,
    l: &mut Layers,
    opts: &VerifierOptions,
    id: u64,
    segment: Option<String>,
    network: Option<NetworkId>,
    i: NodeAddr,
    r: NodeAddr,
    req: Requirements,
    out: &mut Vec<StaticCheck>,
) {
    let name = |u: NodeAddr| s.topology.name(u).to_string();
    let mut check = StaticCheck {
        connection: id,
        segment: segment.clone(),
        layer: network.map_or(0, |n| s.internet.layer(n)),
        initiator: name(i),
        responder: name(r),
        min_fidelity: req.min_fidelity.value(),
        path: vec![],
        error: None,
        report: None,
    };
    let Some(route) = network.and_then(|n| l.route(n, i, r, req.min_fidelity)) else {
        check.error = Some(format!("no route from {}", name(i)));
        out.push(check);
        return;
    };
    check.path = route.nodes.iter().map(|u| name(*u)).collect();
    let mut q = ConnectionRequest::new(crate::ConnectionId(id), i, r, req);
    q.layer = check.layer;
    q.path = route.nodes.clone();
    let mut children = vec![];
    for (w, h) in route.nodes.windows(2).zip(&route.hops) {
        q.accumulated.push(l.hop_info(w[0], w[1], h.edge));
        if let EdgeRef::Virtual { network } = h.edge {
            children.push((NetworkId(network), w[0], w[1]));
        }
    }
    match generate_rulesets(&q, &GeneratorOptions::default()) {
        Ok(plan) => check.report = Some(verify_rulesets(&plan.ordered(), &q.accumulated, opts)),
        Err(e) => check.error = Some(format!("infeasible fidelity: {e}")),
    }
    out.push(check);
    for (cnet, a, b) in children {
        let adv = s.internet.network(cnet).advertised_fidelity;
        let seg = Some(format!(
            "{}{}",
            segment.as_ref().map(|x| format!("{x}/")).unwrap_or_default(),
            s.internet.network(cnet).name
        ));
        let creq = Requirements {
            min_fidelity: adv,
            mode: Mode::Stream,
        };
        check_one(s, l, opts, id, seg, Some(cnet), a, b, creq, out);
    }
}
