//! Scenario configuration: topology, networks, connections and run settings,
//! loaded from TOML with every problem reported at once.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::Deserialize;
use toml::Spanned;

use crate::connection::{Mode, Requirements};
use crate::internet::{Internet, NetworkId, NetworkSpec};
use crate::kernel::{ClassicalChannel, SimTime};
use crate::link::{LinkArchitecture, LinkSpec, NodeCapability, NodeType};
use crate::routing::MuxDiscipline;
use crate::topology::{random_topology, RandomTopologyParams, Topology, DEFAULT_VELOCITY_MPS};
use crate::{ConnectionId, Fidelity, NodeAddr};

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub duration: SimTime,
    pub discipline: MuxDiscipline,
    pub loopback: SimTime,
    pub velocity_mps: f64,
    /// How long an application keeps a delivered qubit before freeing it.
    pub app_hold: SimTime,
    /// Unassigned pairs are dropped after this many mean attempt periods.
    pub stale_factor: f64,
    /// How long nodes remember names they no longer hold.
    pub tombstone_ttl: SimTime,
    /// Run the static checks at the responder before installing.
    pub verify_setup: bool,
    /// Interface slot for single-interface repeaters.
    pub slot: SimTime,
    pub max_firings: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            seed: 0,
            duration: SimTime::from_secs(1.0),
            discipline: MuxDiscipline::StatMux,
            loopback: SimTime::from_micros(1),
            velocity_mps: DEFAULT_VELOCITY_MPS,
            app_hold: SimTime::ZERO,
            stale_factor: 10.0,
            tombstone_ttl: SimTime::from_secs(1.0),
            verify_setup: true,
            slot: SimTime::from_micros(100),
            max_firings: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionSpec {
    pub id: ConnectionId,
    pub initiator: NodeAddr,
    pub responder: NodeAddr,
    pub requirements: Requirements,
    pub start: SimTime,
    pub stop: Option<SimTime>,
    /// Share of link pairs under statistical multiplexing.
    pub weight: f64,
    /// Qubits reserved per node under buffer-space multiplexing.
    pub quota: u32,
    /// Try again after this long when setup fails.
    pub retry: Option<SimTime>,
}

impl ConnectionSpec {
    pub fn new(id: u64, initiator: NodeAddr, responder: NodeAddr, min_fidelity: f64) -> Self {
        ConnectionSpec {
            id: ConnectionId(id),
            initiator,
            responder,
            requirements: Requirements {
                min_fidelity: Fidelity::clamped(min_fidelity),
                mode: Mode::Stream,
            },
            start: SimTime::ZERO,
            stop: None,
            weight: 1.0,
            quota: 2,
            retry: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub topology: Topology,
    pub internet: Internet,
    pub channels: Vec<ClassicalChannel>,
    /// Per-link fidelity the nodes believe fresh pairs have.
    pub estimates: Vec<Option<Fidelity>>,
    pub connections: Vec<ConnectionSpec>,
    pub settings: Settings,
}

impl Scenario {
    /// Flat single network with channels along the links.
    pub fn new(topology: Topology, settings: Settings) -> Self {
        let channels = topology.default_classical_channels(settings.velocity_mps);
        Scenario {
            internet: Internet::flat(topology.nodes.len()),
            estimates: vec![None; topology.links.len()],
            channels,
            topology,
            connections: vec![],
            settings,
        }
    }

    pub fn load(paths: &[&Path]) -> Result<Scenario, ConfigErrors> {
        let mut sources = vec![];
        let mut errs = vec![];
        for p in paths {
            match std::fs::read_to_string(p) {
                Ok(s) => sources.push((p.display().to_string(), s)),
                Err(e) => errs.push(ConfigError::new(&p.display().to_string(), None, "", format!("cannot read: {e}"))),
            }
        }
        if !errs.is_empty() {
            return Err(ConfigErrors(errs));
        }
        let refs: Vec<(&str, &str)> = sources.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        Self::parse(&refs)
    }

    pub fn from_toml(text: &str) -> Result<Scenario, ConfigErrors> {
        Self::parse(&[("<input>", text)])
    }

    /// Parse one or more documents (for instance a topology file and a
    /// scenario file) into one scenario.
    pub fn parse(docs: &[(&str, &str)]) -> Result<Scenario, ConfigErrors> {
        let mut errs = vec![];
        let mut raws = vec![];
        for (file, text) in docs {
            match toml::from_str::<RawDoc>(text) {
                Ok(r) => raws.push((*file, *text, r)),
                Err(e) => {
                    let line = e.span().map(|s| line_of(text, s.start));
                    errs.push(ConfigError::new(file, line, "", e.message().to_string()));
                }
            }
        }
        if !errs.is_empty() {
            return Err(ConfigErrors(errs));
        }
        let mut b = Builder::default();
        for (file, text, raw) in raws {
            b.absorb(file, text, raw);
        }
        b.finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub file: String,
    pub line: Option<usize>,
    /// Dotted path of the offending field, e.g. `link[2].b`.
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn new(file: &str, line: Option<usize>, path: &str, message: String) -> Self {
        ConfigError {
            file: file.to_string(),
            line,
            path: path.to_string(),
            message,
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.file)?;
        if let Some(l) = self.line {
            write!(f, ":{l}")?;
        }
        if !self.path.is_empty() {
            write!(f, ": {}", self.path)?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawDoc {
    simulation: Option<Spanned<RawSim>>,
    random_topology: Option<Spanned<RawRandom>>,
    #[serde(default)]
    network: Vec<Spanned<RawNetwork>>,
    #[serde(default)]
    node: Vec<Spanned<RawNode>>,
    #[serde(default)]
    link: Vec<Spanned<RawLink>>,
    #[serde(default)]
    channel: Vec<Spanned<RawChannel>>,
    #[serde(default)]
    connection: Vec<Spanned<RawConnection>>,
    random_connections: Option<Spanned<RawRandomConnections>>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawSim {
    seed: Option<u64>,
    duration_s: Option<f64>,
    discipline: Option<String>,
    loopback_us: Option<f64>,
    velocity_mps: Option<f64>,
    app_hold_s: Option<f64>,
    stale_factor: Option<f64>,
    tombstone_ttl_s: Option<f64>,
    verify_setup: Option<bool>,
    slot_us: Option<f64>,
    max_firings: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRandom {
    nodes: usize,
    end_nodes: usize,
    seed: Option<u64>,
    extra_links_per_node: Option<f64>,
    min_length_km: Option<f64>,
    max_length_km: Option<f64>,
    min_fidelity: Option<f64>,
    max_fidelity: Option<f64>,
    attempt_rate_hz: Option<f64>,
    qubit_capacity: Option<u32>,
    t_mem_s: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRandomConnections {
    count: usize,
    seed: Option<u64>,
    min_fidelity: f64,
    start_s: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetwork {
    name: String,
    parent: Option<String>,
    advertised_fidelity: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    name: String,
    #[serde(rename = "type")]
    node_type: String,
    memory_qubits: Option<u32>,
    t_mem_s: Option<f64>,
    single_active_interface: Option<bool>,
    processing_delay_us: Option<f64>,
    network: Option<String>,
    #[serde(default)]
    borders: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLink {
    a: String,
    b: String,
    architecture: Option<String>,
    midpoint: Option<String>,
    length_km: f64,
    attenuation_db_per_km: Option<f64>,
    attempt_rate_hz: Option<f64>,
    detector_efficiency: Option<f64>,
    base_fidelity: f64,
    estimated_fidelity: Option<f64>,
    qubit_capacity: Option<u32>,
    switch_loss_db: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChannel {
    a: String,
    b: String,
    distance_m: f64,
    velocity_mps: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConnection {
    id: u64,
    initiator: String,
    responder: String,
    min_fidelity: f64,
    count: Option<u64>,
    start_s: Option<f64>,
    stop_s: Option<f64>,
    weight: Option<f64>,
    quota: Option<u32>,
    retry_s: Option<f64>,
}

struct PendingNode {
    network: Option<String>,
    borders: Vec<String>,
    at: (usize, usize),
}

#[derive(Default)]
struct Builder {
    errs: Vec<ConfigError>,
    files: Vec<String>,
    settings: Settings,
    topo: Topology,
    networks: Vec<(NetworkSpec, Option<String>, (usize, usize))>,
    pending_nodes: Vec<PendingNode>,
    estimates: Vec<Option<Fidelity>>,
    channels: Vec<ClassicalChannel>,
    connections: Vec<(ConnectionSpec, (usize, usize))>,
    random_connections: Option<(RawRandomConnections, (usize, usize))>,
    node_count: usize,
    link_count: usize,
    conn_count: usize,
    channel_count: usize,
}

impl Builder {
    fn err(&mut self, at: (usize, usize), path: String, msg: String) {
        let file = self.files.get(at.0).cloned().unwrap_or_default();
        self.errs.push(ConfigError::new(&file, Some(at.1), &path, msg));
    }

    fn node(&mut self, at: (usize, usize), path: String, name: &str) -> Option<NodeAddr> {
        let n = self.topo.lookup(name);
        if n.is_none() {
            self.err(at, path, format!("unknown node {name:?}"));
        }
        n
    }

    fn fidelity(&mut self, at: (usize, usize), path: String, v: f64) -> Fidelity {
        match Fidelity::new(v) {
            Ok(f) => f,
            Err(e) => {
                self.err(at, path, e.to_string());
                Fidelity::FLOOR
            }
        }
    }

    fn time(&mut self, at: (usize, usize), path: String, secs: f64) -> SimTime {
        if !(secs >= 0.0) || !secs.is_finite() {
            self.err(at, path, format!("{secs} must be a finite non-negative number"));
            return SimTime::ZERO;
        }
        SimTime::from_secs(secs)
    }

    fn absorb(&mut self, file: &str, text: &str, raw: RawDoc) {
        let fi = self.files.len();
        self.files.push(file.to_string());
        let at = |s: &std::ops::Range<usize>| (fi, line_of(text, s.start));

        if let Some(sim) = raw.simulation {
            let a = at(&sim.span());
            let s = sim.into_inner();
            if let Some(v) = s.seed {
                self.settings.seed = v;
            }
            if let Some(v) = s.duration_s {
                self.settings.duration = self.time(a, "simulation.duration_s".into(), v);
            }
            if let Some(d) = s.discipline {
                match d.parse() {
                    Ok(d) => self.settings.discipline = d,
                    Err(e) => self.err(a, "simulation.discipline".into(), e),
                }
            }
            if let Some(v) = s.loopback_us {
                self.settings.loopback = self.time(a, "simulation.loopback_us".into(), v * 1e-6);
            }
            if let Some(v) = s.velocity_mps {
                if v > 0.0 {
                    self.settings.velocity_mps = v;
                } else {
                    self.err(a, "simulation.velocity_mps".into(), "must be > 0".into());
                }
            }
            if let Some(v) = s.app_hold_s {
                self.settings.app_hold = self.time(a, "simulation.app_hold_s".into(), v);
            }
            if let Some(v) = s.stale_factor {
                if v > 0.0 {
                    self.settings.stale_factor = v;
                } else {
                    self.err(a, "simulation.stale_factor".into(), "must be > 0".into());
                }
            }
            if let Some(v) = s.tombstone_ttl_s {
                self.settings.tombstone_ttl = self.time(a, "simulation.tombstone_ttl_s".into(), v);
            }
            if let Some(v) = s.verify_setup {
                self.settings.verify_setup = v;
            }
            if let Some(v) = s.slot_us {
                self.settings.slot = self.time(a, "simulation.slot_us".into(), v * 1e-6);
                if self.settings.slot == SimTime::ZERO {
                    self.err(a, "simulation.slot_us".into(), "must be > 0".into());
                }
            }
            if let Some(v) = s.max_firings {
                self.settings.max_firings = v.max(1);
            }
        }

        if let Some(r) = raw.random_topology {
            let a = at(&r.span());
            let r = r.into_inner();
            let d = RandomTopologyParams::default();
            let p = RandomTopologyParams {
                nodes: r.nodes,
                end_nodes: r.end_nodes,
                extra_links_per_node: r.extra_links_per_node.unwrap_or(d.extra_links_per_node),
                length_km: (r.min_length_km.unwrap_or(d.length_km.0), r.max_length_km.unwrap_or(d.length_km.1)),
                base_fidelity: (r.min_fidelity.unwrap_or(d.base_fidelity.0), r.max_fidelity.unwrap_or(d.base_fidelity.1)),
                attempt_rate_hz: r.attempt_rate_hz.unwrap_or(d.attempt_rate_hz),
                qubit_capacity: r.qubit_capacity.unwrap_or(d.qubit_capacity),
                t_mem_s: r.t_mem_s.unwrap_or(d.t_mem_s),
            };
            let ok = p.end_nodes < p.nodes
                && p.length_km.0 > 0.0
                && p.length_km.0 <= p.length_km.1
                && p.base_fidelity.0 >= 0.25
                && p.base_fidelity.0 <= p.base_fidelity.1
                && p.base_fidelity.1 <= 1.0
                && p.attempt_rate_hz > 0.0
                && p.qubit_capacity > 0
                && p.t_mem_s > 0.0;
            if !ok {
                self.err(a, "random_topology".into(), "inconsistent parameters".into());
            } else if !self.topo.nodes.is_empty() {
                self.err(a, "random_topology".into(), "cannot be combined with explicit nodes".into());
            } else {
                let t = random_topology(&p, r.seed.unwrap_or(self.settings.seed));
                for n in &t.nodes {
                    self.topo.add_node(&n.name, n.capability.clone());
                    self.pending_nodes.push(PendingNode {
                        network: None,
                        borders: vec![],
                        at: a,
                    });
                }
                for l in t.links {
                    self.topo.add_link(l);
                    self.estimates.push(None);
                }
            }
        }

        for n in raw.network {
            let a = at(&n.span());
            let n = n.into_inner();
            let path = format!("network[{}]", self.networks.len());
            let f = self.fidelity(a, format!("{path}.advertised_fidelity"), n.advertised_fidelity);
            if n.name == "root" || self.networks.iter().any(|x| x.0.name == n.name) {
                self.err(a, format!("{path}.name"), format!("duplicate network {:?}", n.name));
            }
            self.networks.push((
                NetworkSpec {
                    id: NetworkId(self.networks.len() as u32 + 1),
                    name: n.name,
                    parent: None,
                    advertised_fidelity: f,
                },
                n.parent,
                a,
            ));
        }

        for n in raw.node {
            let a = at(&n.span());
            let n = n.into_inner();
            let path = format!("node[{}]", self.node_count);
            self.node_count += 1;
            let ty: NodeType = match n.node_type.parse() {
                Ok(t) => t,
                Err(e) => {
                    self.err(a, format!("{path}.type"), e);
                    NodeType::Comp
                }
            };
            let mut cap = NodeCapability::new(ty);
            if let Some(m) = n.memory_qubits {
                cap.memory_qubits = m;
            }
            if ty == NodeType::Meas && cap.memory_qubits != 0 {
                self.err(a, format!("{path}.memory_qubits"), "measuring nodes have no memory".into());
            }
            if let Some(t) = n.t_mem_s {
                if t > 0.0 {
                    cap.t_mem_s = t;
                } else {
                    self.err(a, format!("{path}.t_mem_s"), format!("{t} must be > 0"));
                }
            }
            cap.single_active_interface = n.single_active_interface.unwrap_or(false);
            if self.topo.lookup(&n.name).is_some() {
                self.err(a, format!("{path}.name"), format!("duplicate node {:?}", n.name));
                continue;
            }
            let addr = self.topo.add_node(&n.name, cap);
            if let Some(d) = n.processing_delay_us {
                let t = self.time(a, format!("{path}.processing_delay_us"), d * 1e-6);
                self.topo.nodes[addr.index()].processing_delay = t;
            }
            self.pending_nodes.push(PendingNode {
                network: n.network,
                borders: n.borders,
                at: a,
            });
        }

        for l in raw.link {
            let a = at(&l.span());
            let l = l.into_inner();
            let path = format!("link[{}]", self.link_count);
            self.link_count += 1;
            let ea = self.node(a, format!("{path}.a"), &l.a);
            let eb = self.node(a, format!("{path}.b"), &l.b);
            let f = self.fidelity(a, format!("{path}.base_fidelity"), l.base_fidelity);
            let est = l.estimated_fidelity.map(|v| self.fidelity(a, format!("{path}.estimated_fidelity"), v));
            let (Some(ea), Some(eb)) = (ea, eb) else { continue };
            let mut spec = LinkSpec::new(ea, eb, l.length_km, f);
            let mid = match &l.midpoint {
                Some(m) => self.node(a, format!("{path}.midpoint"), m),
                None => None,
            };
            let arch = l.architecture.as_deref().unwrap_or(if mid.is_some() { "bsa" } else { "direct" });
            spec.architecture = match (arch.to_ascii_lowercase().as_str(), mid) {
                ("direct", None) => LinkArchitecture::Direct,
                ("bsa", Some(m)) => LinkArchitecture::BsaMidpoint(m),
                ("epps", Some(m)) => LinkArchitecture::EppsMidpoint(m),
                ("direct", Some(_)) => {
                    self.err(a, format!("{path}.midpoint"), "direct links have no midpoint".into());
                    continue;
                }
                ("bsa" | "epps", None) => {
                    if l.midpoint.is_none() {
                        self.err(a, format!("{path}.midpoint"), format!("{arch} links need a midpoint node"));
                    }
                    continue;
                }
                (other, _) => {
                    self.err(a, format!("{path}.architecture"), format!("unknown architecture {other:?}"));
                    continue;
                }
            };
            if let Some(m) = spec.architecture.midpoint() {
                if !self.topo.node(m).capability.node_type.is_support() {
                    self.err(a, format!("{path}.midpoint"), format!("{} is not a BSA, EPPS or OSW node", l.midpoint.clone().unwrap_or_default()));
                }
            }
            if let Some(v) = l.attenuation_db_per_km {
                spec.attenuation_db_per_km = v;
            }
            if let Some(v) = l.attempt_rate_hz {
                spec.attempt_rate_hz = v;
            }
            if let Some(v) = l.detector_efficiency {
                spec.detector_efficiency = v;
            }
            if let Some(v) = l.qubit_capacity {
                spec.qubit_capacity = v;
            }
            if let Some(v) = l.switch_loss_db {
                spec.switch_loss_db = v;
            }
            if let Err(e) = spec.validate() {
                self.err(a, path.clone(), e);
                continue;
            }
            for (end, field) in [(ea, "a"), (eb, "b")] {
                if !self.topo.node(end).capability.node_type.runs_rulesets() {
                    self.err(a, format!("{path}.{field}"), format!("{} cannot terminate a link", self.topo.name(end)));
                }
            }
            self.topo.add_link(spec);
            self.estimates.push(est);
        }

        for c in raw.channel {
            let a = at(&c.span());
            let c = c.into_inner();
            let path = format!("channel[{}]", self.channel_count);
            self.channel_count += 1;
            let ea = self.node(a, format!("{path}.a"), &c.a);
            let eb = self.node(a, format!("{path}.b"), &c.b);
            if !(c.distance_m > 0.0) {
                self.err(a, format!("{path}.distance_m"), "must be > 0".into());
                continue;
            }
            let v = c.velocity_mps.unwrap_or(self.settings.velocity_mps);
            if let (Some(ea), Some(eb)) = (ea, eb) {
                self.channels.push(ClassicalChannel {
                    a: ea,
                    b: eb,
                    distance_m: c.distance_m,
                    velocity_mps: v,
                });
            }
        }

        for c in raw.connection {
            let a = at(&c.span());
            let c = c.into_inner();
            let path = format!("connection[{}]", self.conn_count);
            self.conn_count += 1;
            let i = self.node(a, format!("{path}.initiator"), &c.initiator);
            let r = self.node(a, format!("{path}.responder"), &c.responder);
            let f = self.fidelity(a, format!("{path}.min_fidelity"), c.min_fidelity);
            let start = self.time(a, format!("{path}.start_s"), c.start_s.unwrap_or(0.0));
            let stop = c.stop_s.map(|s| self.time(a, format!("{path}.stop_s"), s));
            let retry = c.retry_s.map(|s| self.time(a, format!("{path}.retry_s"), s));
            if let Some(w) = c.weight {
                if !(w > 0.0) {
                    self.err(a, format!("{path}.weight"), "must be > 0".into());
                }
            }
            if c.count == Some(0) {
                self.err(a, format!("{path}.count"), "must be >= 1".into());
            }
            let (Some(i), Some(r)) = (i, r) else { continue };
            if i == r {
                self.err(a, format!("{path}.responder"), "initiator and responder must differ".into());
                continue;
            }
            for (n, field) in [(i, "initiator"), (r, "responder")] {
                if !self.topo.node(n).capability.node_type.runs_rulesets() {
                    self.err(a, format!("{path}.{field}"), format!("{} cannot terminate a connection", self.topo.name(n)));
                }
            }
            if let Some((_, prev)) = self.connections.iter().find(|(x, _)| x.id.0 == c.id) {
                let prev = *prev;
                let first = format!("{}:{}", self.files[prev.0], prev.1);
                self.err(a, format!("{path}.id"), format!("duplicate connection id {} (first defined at {first})", c.id));
                continue;
            }
            self.connections.push((
                ConnectionSpec {
                    id: ConnectionId(c.id),
                    initiator: i,
                    responder: r,
                    requirements: Requirements {
                        min_fidelity: f,
                        mode: c.count.map_or(Mode::Stream, Mode::Count),
                    },
                    start,
                    stop,
                    weight: c.weight.unwrap_or(1.0),
                    quota: c.quota.unwrap_or(2),
                    retry,
                },
                a,
            ));
        }

        if let Some(r) = raw.random_connections {
            let a = at(&r.span());
            self.random_connections = Some((r.into_inner(), a));
        }
    }

    fn finish(mut self) -> Result<Scenario, ConfigErrors> {
        // Networks: resolve parents now that every file is read.
        let mut internet = Internet::flat(self.topo.nodes.len());
        let names: BTreeMap<String, NetworkId> = std::iter::once(("root".to_string(), NetworkId::ROOT))
            .chain(self.networks.iter().map(|(n, _, _)| (n.name.clone(), n.id)))
            .collect();
        let networks = std::mem::take(&mut self.networks);
        for (i, (mut spec, parent, a)) in networks.into_iter().enumerate() {
            let p = parent.unwrap_or_else(|| "root".into());
            match names.get(&p) {
                Some(id) if *id < spec.id => spec.parent = Some(*id),
                Some(_) => self.err(a, format!("network[{i}].parent"), format!("parent {p:?} must be declared earlier")),
                None => self.err(a, format!("network[{i}].parent"), format!("unknown network {p:?}")),
            }
            internet.networks.push(spec);
        }
        let pending = std::mem::take(&mut self.pending_nodes);
        for (u, pn) in pending.into_iter().enumerate() {
            let path = format!("node[{u}]");
            if let Some(n) = &pn.network {
                match names.get(n) {
                    Some(id) => internet.home[u] = *id,
                    None => self.err(pn.at, format!("{path}.network"), format!("unknown network {n:?}")),
                }
            }
            for b in &pn.borders {
                match names.get(b) {
                    Some(id) => {
                        internet.borders[u].insert(*id);
                    }
                    None => self.err(pn.at, format!("{path}.borders"), format!("unknown network {b:?}")),
                }
            }
        }
        if self.errs.is_empty() {
            for e in internet.validate() {
                self.errs.push(ConfigError::new(&self.files.join(","), None, "network", e));
            }
        }
        for (i, l) in self.topo.links.iter().enumerate() {
            if internet.common_network(l.a, l.b).is_none() {
                self.errs.push(ConfigError::new(
                    &self.files.join(","),
                    None,
                    &format!("link[{i}]"),
                    format!("{} and {} share no network", self.topo.name(l.a), self.topo.name(l.b)),
                ));
            }
        }
        let mut connections: Vec<ConnectionSpec> = self.connections.iter().map(|c| c.0.clone()).collect();
        if let Some((r, a)) = self.random_connections.take() {
            let ends: Vec<NodeAddr> = self
                .topo
                .nodes
                .iter()
                .filter(|n| n.capability.node_type.is_end_node())
                .map(|n| n.addr)
                .collect();
            if ends.len() < 2 || !(0.25..=1.0).contains(&r.min_fidelity) {
                self.err(a, "random_connections".into(), "needs two end nodes and a valid fidelity".into());
            } else {
                let mut rng = crate::kernel::SimRng::seeded(r.seed.unwrap_or(self.settings.seed) ^ 0x5eed);
                let mut next = connections.iter().map(|c| c.id.0).max().unwrap_or(0) + 1;
                let start = SimTime::from_secs(r.start_s.unwrap_or(0.0).max(0.0));
                let mut used = BTreeSet::new();
                for _ in 0..r.count {
                    let (x, y) = loop {
                        let x = ends[rng.below(ends.len())];
                        let y = ends[rng.below(ends.len())];
                        if x != y && (used.len() >= ends.len() * (ends.len() - 1) / 2 || used.insert((x.min(y), x.max(y)))) {
                            break (x, y);
                        }
                    };
                    let mut c = ConnectionSpec::new(next, x, y, r.min_fidelity);
                    c.start = start;
                    connections.push(c);
                    next += 1;
                }
            }
        }
        if !self.errs.is_empty() {
            return Err(ConfigErrors(self.errs));
        }
        let mut channels = self.topo.default_classical_channels(self.settings.velocity_mps);
        // Explicit channels replace the default between the same two nodes.
        channels.retain(|d| {
            !self
                .channels
                .iter()
                .any(|c| (c.a, c.b) == (d.a, d.b) || (c.a, c.b) == (d.b, d.a))
        });
        channels.extend(self.channels);
        Ok(Scenario {
            topology: self.topo,
            internet,
            channels,
            estimates: self.estimates,
            connections,
            settings: self.settings,
        })
    }
}
