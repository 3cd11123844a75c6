//! Run output: one JSON object per line, plus an optional event trace.
//!
//! Records carry no wall-clock data so two runs with the same seed produce
//! identical bytes.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::Serialize;

use crate::kernel::SimTime;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PairAccounting {
    pub raw: u64,
    pub swap_created: u64,
    pub consumed: u64,
    pub swapped: u64,
    pub delivered: u64,
    pub freed: u64,
    pub live: u64,
}

impl PairAccounting {
    /// Every pair that came into being has exactly one fate.
    pub fn balanced(&self) -> bool {
        self.raw + self.swap_created == self.consumed + self.swapped + self.delivered + self.freed + self.live
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConnectionMetrics {
    pub id: u64,
    pub layer: u32,
    pub parent: Option<u64>,
    pub initiator: String,
    pub responder: String,
    pub min_fidelity: f64,
    pub status: String,
    pub failure: Option<String>,
    pub attempts: u32,
    pub setup_latency_s: Option<f64>,
    pub delivered: u64,
    pub pairs_per_s: f64,
    pub mean_true_fidelity: Option<f64>,
    pub mean_est_fidelity: Option<f64>,
    pub qber: Option<f64>,
    pub qber_samples: u64,
    pub request_messages: u64,
    pub install_messages: u64,
    pub starvation: u64,
    pub pairs: PairAccounting,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkMetrics {
    pub id: u32,
    pub a: String,
    pub b: String,
    pub success_probability: f64,
    pub attempts: u64,
    pub successes: u64,
    /// Successes thrown away because an end had no free qubit.
    pub stalls: u64,
    pub seconds_per_pair: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeMetrics {
    pub id: u32,
    pub name: String,
    pub firings: u64,
    pub peak_qubits: u32,
    pub faults: BTreeMap<String, u64>,
    pub notes: BTreeMap<String, u64>,
    pub releases: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlobalMetrics {
    pub events: u64,
    pub end_time_s: f64,
    pub rng_draws: u64,
    pub faults: u64,
    pub privacy_violations: u64,
    pub unassigned: PairAccounting,
    pub accounting_balanced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    Header {
        schema: u32,
        seed: u64,
        duration_s: f64,
        discipline: String,
        nodes: usize,
        links: usize,
        connections: usize,
    },
    Connection(ConnectionMetrics),
    Link(LinkMetrics),
    Node(NodeMetrics),
    Fault {
        at_s: f64,
        kind: String,
        location: String,
        connection: u64,
        detail: String,
    },
    Global(GlobalMetrics),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub records: Vec<Record>,
}

impl Metrics {
    pub fn connections(&self) -> impl Iterator<Item = &ConnectionMetrics> {
        self.records.iter().filter_map(|r| match r {
            Record::Connection(c) => Some(c),
            _ => None,
        })
    }

    pub fn connection(&self, id: u64) -> Option<&ConnectionMetrics> {
        self.connections().find(|c| c.id == id)
    }

    pub fn links(&self) -> impl Iterator<Item = &LinkMetrics> {
        self.records.iter().filter_map(|r| match r {
            Record::Link(l) => Some(l),
            _ => None,
        })
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeMetrics> {
        self.records.iter().filter_map(|r| match r {
            Record::Node(n) => Some(n),
            _ => None,
        })
    }

    pub fn global(&self) -> Option<&GlobalMetrics> {
        self.records.iter().find_map(|r| match r {
            Record::Global(g) => Some(g),
            _ => None,
        })
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = vec![];
        self.write_jsonl(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }
}

/// Destination for trace lines: `time kind src dst detail`.
pub enum TraceSink {
    Memory(Vec<u8>),
    Writer(Box<dyn Write>),
}

impl TraceSink {
    pub fn line(&mut self, at: SimTime, kind: &str, src: impl std::fmt::Display, dst: impl std::fmt::Display, detail: &str) {
        let w: &mut dyn Write = match self {
            TraceSink::Memory(v) => v,
            TraceSink::Writer(w) => w.as_mut(),
        };
        // Trace output is best effort; a full disk should not stop the run.
        let _ = writeln!(w, "{} {kind} {src} {dst} {detail}", at.0);
    }

    pub fn flush(&mut self) {
        if let TraceSink::Writer(w) = self {
            let _ = w.flush();
        }
    }

    pub fn contents(&self) -> Option<&[u8]> {
        match self {
            TraceSink::Memory(v) => Some(v),
            TraceSink::Writer(_) => None,
        }
    }
}
