//! Deterministic discrete-event kernel.
//!
//! Time is integer picoseconds. Events at equal times fire in insertion
//! order, so a run is a pure function of its configuration and seed.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::ops::{Add, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::NodeAddr;

pub const PS_PER_SEC: f64 = 1e12;

/// Simulation time or duration in picoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub fn from_secs(s: f64) -> SimTime {
        if s.is_infinite() || s * PS_PER_SEC >= u64::MAX as f64 {
            SimTime::MAX
        } else {
            SimTime((s * PS_PER_SEC).round().max(0.0) as u64)
        }
    }

    pub fn from_micros(us: u64) -> SimTime {
        SimTime(us * 1_000_000)
    }

    pub fn as_secs(self) -> f64 {
        self.0 as f64 / PS_PER_SEC
    }

    pub fn saturating_add(self, d: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(d.0))
    }

    pub fn is_max(self) -> bool {
        self.0 == u64::MAX
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        self.saturating_add(rhs)
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum KernelError {
    #[error("event scheduled at {at} but clock is already at {now}")]
    InPast { at: SimTime, now: SimTime },
    #[error("no classical route from node {src} to node {dst}")]
    Unreachable { src: NodeAddr, dst: NodeAddr },
    #[error("unknown node {0}")]
    UnknownNode(NodeAddr),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventId(u64);

struct Entry<E> {
    at: SimTime,
    seq: u64,
    payload: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl<E> Eq for Entry<E> {}
impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Priority queue of future events with a monotone clock.
pub struct Scheduler<E> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Entry<E>>>,
    cancelled: HashSet<u64>,
    executed: u64,
}

impl<E> Default for Scheduler<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Scheduler<E> {
    pub fn new() -> Self {
        Scheduler {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            cancelled: HashSet::new(),
            executed: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn executed(&self) -> u64 {
        self.executed
    }

    pub fn pending(&self) -> usize {
        self.queue.len() - self.cancelled.len()
    }

    pub fn schedule(&mut self, at: SimTime, payload: E) -> Result<EventId, KernelError> {
        if at < self.now {
            return Err(KernelError::InPast { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Entry { at, seq, payload }));
        Ok(EventId(seq))
    }

    pub fn schedule_in(&mut self, delay: SimTime, payload: E) -> EventId {
        let at = self.now + delay;
        self.schedule(at, payload).expect("future time")
    }

    /// Cancel a pending event. Cancelling an event that already fired is a
    /// no-op.
    pub fn cancel(&mut self, id: EventId) {
        if id.0 < self.next_seq {
            self.cancelled.insert(id.0);
        }
    }

    fn discard_cancelled(&mut self) {
        while let Some(Reverse(top)) = self.queue.peek() {
            if self.cancelled.remove(&top.seq) {
                self.queue.pop();
            } else {
                break;
            }
        }
    }

    pub fn peek_time(&mut self) -> Option<SimTime> {
        self.discard_cancelled();
        self.queue.peek().map(|Reverse(e)| e.at)
    }

    /// Pop the next event whose time is `<= limit`, advancing the clock.
    pub fn pop_until(&mut self, limit: SimTime) -> Option<(SimTime, EventId, E)> {
        self.discard_cancelled();
        match self.queue.peek() {
            Some(Reverse(e)) if e.at <= limit => {}
            _ => return None,
        }
        let Reverse(e) = self.queue.pop()?;
        debug_assert!(e.at >= self.now);
        self.now = e.at;
        self.executed += 1;
        Some((e.at, EventId(e.seq), e.payload))
    }

    /// Move the clock forward without executing anything (end of a bounded run).
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            self.now = t;
        }
    }

    /// Drive the queue with `handler` until `limit` or quiescence.
    pub fn run_until<F, Err>(&mut self, limit: SimTime, mut handler: F) -> Result<RunStats, Err>
    where
        F: FnMut(&mut Self, SimTime, E) -> Result<(), Err>,
    {
        let start = self.executed;
        while let Some((t, _, ev)) = self.pop_until(limit) {
            handler(self, t, ev)?;
        }
        if !limit.is_max() {
            self.advance_to(limit);
        }
        Ok(RunStats {
            events: self.executed - start,
            end_time: self.now,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RunStats {
    pub events: u64,
    pub end_time: SimTime,
}

/// The single source of randomness for a run. Counts draws so tests can check
/// that the draw sequence is reproducible.
pub struct SimRng {
    inner: ChaCha8Rng,
    draws: u64,
}

impl SimRng {
    pub fn seeded(seed: u64) -> Self {
        SimRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            draws: 0,
        }
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.draws += 1;
        self.inner.random::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.draws += 1;
        self.inner.random_range(0..n)
    }

    /// Index drawn proportionally to `weights` (all non-negative, not all zero).
    pub fn weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut x = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            if x < *w {
                return i;
            }
            x -= w;
        }
        weights.len() - 1
    }
}

/// A configured classical channel between two nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassicalChannel {
    pub a: NodeAddr,
    pub b: NodeAddr,
    pub distance_m: f64,
    pub velocity_mps: f64,
}

impl ClassicalChannel {
    pub fn latency(&self) -> SimTime {
        SimTime::from_secs(self.distance_m / self.velocity_mps).max(SimTime(1))
    }
}

/// Classical message fabric. Multi-hop latency is the sum over the cheapest
/// chain of configured channels.
pub struct ClassicalFabric {
    adjacency: Vec<Vec<(usize, SimTime)>>,
    loopback: SimTime,
    cache: Vec<Option<Vec<Option<SimTime>>>>,
}

impl ClassicalFabric {
    pub fn new(nodes: usize, channels: &[ClassicalChannel], loopback: SimTime) -> Self {
        let mut adjacency = vec![Vec::new(); nodes];
        for ch in channels {
            let l = ch.latency();
            adjacency[ch.a.index()].push((ch.b.index(), l));
            adjacency[ch.b.index()].push((ch.a.index(), l));
        }
        ClassicalFabric {
            adjacency,
            loopback,
            cache: vec![None; nodes],
        }
    }

    pub fn loopback(&self) -> SimTime {
        self.loopback
    }

    pub fn latency(&mut self, src: NodeAddr, dst: NodeAddr) -> Result<SimTime, KernelError> {
        let n = self.adjacency.len();
        if src.index() >= n {
            return Err(KernelError::UnknownNode(src));
        }
        if dst.index() >= n {
            return Err(KernelError::UnknownNode(dst));
        }
        if src == dst {
            return Ok(self.loopback);
        }
        if self.cache[src.index()].is_none() {
            let d = self.dijkstra(src.index());
            self.cache[src.index()] = Some(d);
        }
        self.cache[src.index()].as_ref().unwrap()[dst.index()]
            .ok_or(KernelError::Unreachable { src, dst })
    }

    fn dijkstra(&self, src: usize) -> Vec<Option<SimTime>> {
        let mut dist: Vec<Option<SimTime>> = vec![None; self.adjacency.len()];
        let mut heap = BinaryHeap::new();
        dist[src] = Some(SimTime::ZERO);
        heap.push(Reverse((SimTime::ZERO, src)));
        while let Some(Reverse((d, u))) = heap.pop() {
            if dist[u].is_some_and(|best| d > best) {
                continue;
            }
            for &(v, w) in &self.adjacency[u] {
                let nd = d + w;
                if dist[v].is_none_or(|cur| nd < cur) {
                    dist[v] = Some(nd);
                    heap.push(Reverse((nd, v)));
                }
            }
        }
        dist
    }
}
