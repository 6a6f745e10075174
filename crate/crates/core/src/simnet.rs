//! Deterministic discrete-event scheduler and simulated network.
//!
//! Events are ordered by `(fire_at, seq)`; `seq` is assigned at scheduling
//! time, so events sharing a timestamp fire in insertion order. All
//! randomness comes from one seeded ChaCha stream owned by the simulator.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt::{self, Write as _};
use std::ops::{Add, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::ContextUpdate;
use crate::NodeId;

/// Simulated time in whole microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_secs(secs: f64) -> Self {
        SimTime((secs * 1e6).round().max(0.0) as u64)
    }

    pub fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1000)
    }

    pub fn as_secs(self) -> f64 {
        self.0 as f64 / 1e6
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
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
        write!(f, "{}.{:06}", self.0 / 1_000_000, self.0 % 1_000_000)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    JoinAdvert,
    LeaveAdvert,
    RegistryCopy,
    Bid,
    ElectionResult,
    ChallengeRequest,
    ChallengeResponse,
    FitnessUpdate,
    ResignAdvert,
    SpecUpdate,
    SensorReport,
    AggregateReport,
    BackendRequest,
    ReviewRequest,
    ReviewVerdict,
}

impl MessageKind {
    pub const ALL: [MessageKind; 15] = [
        MessageKind::JoinAdvert,
        MessageKind::LeaveAdvert,
        MessageKind::RegistryCopy,
        MessageKind::Bid,
        MessageKind::ElectionResult,
        MessageKind::ChallengeRequest,
        MessageKind::ChallengeResponse,
        MessageKind::FitnessUpdate,
        MessageKind::ResignAdvert,
        MessageKind::SpecUpdate,
        MessageKind::SensorReport,
        MessageKind::AggregateReport,
        MessageKind::BackendRequest,
        MessageKind::ReviewRequest,
        MessageKind::ReviewVerdict,
    ];
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum NetMode {
    #[default]
    Unicast,
    Broadcast,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Destination {
    Node(NodeId),
    /// A known receiver set: one transmission per receiver in unicast
    /// mode, a single transmission in broadcast mode.
    Many(Vec<NodeId>),
    /// Every alive node in the sender's partition.
    BroadcastAll,
    Backend,
}

impl fmt::Display for Destination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Destination::Node(n) => write!(f, "{n}"),
            Destination::Many(list) => write!(f, "many[{}]", list.len()),
            Destination::BroadcastAll => f.write_str("*"),
            Destination::Backend => f.write_str("backend"),
        }
    }
}

/// Message payloads name their own kind.
pub trait Body: Clone {
    fn kind(&self) -> MessageKind;
    fn size_hint(&self) -> u32 {
        1
    }
}

#[derive(Debug, Clone)]
pub struct Message<P> {
    pub kind: MessageKind,
    pub from: NodeId,
    pub to: Destination,
    pub group: String,
    pub size_hint: u32,
    pub payload: P,
}

impl<P: Body> Message<P> {
    pub fn new(from: NodeId, to: Destination, group: &str, payload: P) -> Self {
        Message { kind: payload.kind(), from, to, group: group.to_string(), size_hint: payload.size_hint(), payload }
    }
}

/// Step function of backend reachability for one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachabilityStep {
    pub from: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub start: f64,
    pub end: f64,
    pub nodes: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub mode: NetMode,
    /// Seconds per device-to-device hop.
    pub d2d_latency: f64,
    /// Seconds per backend request.
    pub backend_latency: f64,
    pub default_reachability: f64,
    pub backend_reachability: BTreeMap<NodeId, Vec<ReachabilityStep>>,
    pub partitions: Vec<Partition>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            mode: NetMode::Unicast,
            d2d_latency: 0.010,
            backend_latency: 0.100,
            default_reachability: 1.0,
            backend_reachability: BTreeMap::new(),
            partitions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("event at {at} scheduled before current time {now}")]
    SchedulingInPast { at: SimTime, now: SimTime },
    #[error("sender {0} is not alive")]
    SenderDead(NodeId),
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.default_reachability) {
            return Err(SimError::InvalidConfig("default_reachability outside [0, 1]".into()));
        }
        for (node, steps) in &self.backend_reachability {
            if steps.iter().any(|s| !prob(s.probability)) {
                return Err(SimError::InvalidConfig(format!("reachability of {node} outside [0, 1]")));
            }
        }
        if self.d2d_latency < 0.0 || self.backend_latency < 0.0 {
            return Err(SimError::InvalidConfig("negative latency".into()));
        }
        for (i, a) in self.partitions.iter().enumerate() {
            if a.end < a.start {
                return Err(SimError::InvalidConfig(format!("partition {i} ends before it starts")));
            }
            for b in &self.partitions[i + 1..] {
                let overlap = a.start < b.end && b.start < a.end;
                if overlap && !a.nodes.is_disjoint(&b.nodes) {
                    return Err(SimError::InvalidConfig(format!("partition {i} overlaps another node set")));
                }
            }
        }
        Ok(())
    }

    pub fn reachability(&self, node: NodeId, at: f64) -> f64 {
        self.backend_reachability
            .get(&node)
            .and_then(|steps| steps.iter().rfind(|s| s.from <= at))
            .map_or(self.default_reachability, |s| s.probability)
    }

    /// Index of the active partition holding `node`; `None` is the residual component.
    fn component(&self, node: NodeId, at: f64) -> Option<usize> {
        self.partitions.iter().position(|p| p.start <= at && at < p.end && p.nodes.contains(&node))
    }

    pub fn connected(&self, a: NodeId, b: NodeId, at: f64) -> bool {
        self.component(a, at) == self.component(b, at)
    }
}

/// Per-kind message tallies.
///
/// `transmitted` counts radio/backend sends (a broadcast counts once).
/// `receptions` counts the individual deliveries those sends were meant
/// to produce; each reception ends up either `delivered` or `lost`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MessageCounters {
    pub transmitted: BTreeMap<(MessageKind, NetMode), u64>,
    pub receptions: BTreeMap<MessageKind, u64>,
    pub delivered: BTreeMap<MessageKind, u64>,
    pub lost: BTreeMap<MessageKind, u64>,
}

impl MessageCounters {
    pub fn transmitted(&self, kind: MessageKind) -> u64 {
        self.transmitted.iter().filter(|((k, _), _)| *k == kind).map(|(_, v)| v).sum()
    }

    pub fn transmitted_in(&self, kind: MessageKind, mode: NetMode) -> u64 {
        self.transmitted.get(&(kind, mode)).copied().unwrap_or(0)
    }

    pub fn delivered(&self, kind: MessageKind) -> u64 {
        self.delivered.get(&kind).copied().unwrap_or(0)
    }

    pub fn lost(&self, kind: MessageKind) -> u64 {
        self.lost.get(&kind).copied().unwrap_or(0)
    }

    pub fn receptions(&self, kind: MessageKind) -> u64 {
        self.receptions.get(&kind).copied().unwrap_or(0)
    }

    pub fn total_transmitted(&self) -> u64 {
        self.transmitted.values().sum()
    }

    /// Per-kind difference `self - earlier`, for measuring a protocol phase.
    pub fn since(&self, earlier: &MessageCounters) -> MessageCounters {
        fn diff<K: Ord + Clone>(a: &BTreeMap<K, u64>, b: &BTreeMap<K, u64>) -> BTreeMap<K, u64> {
            a.iter()
                .map(|(k, v)| (k.clone(), v - b.get(k).copied().unwrap_or(0)))
                .filter(|(_, v)| *v > 0)
                .collect()
        }
        MessageCounters {
            transmitted: diff(&self.transmitted, &earlier.transmitted),
            receptions: diff(&self.receptions, &earlier.receptions),
            delivered: diff(&self.delivered, &earlier.delivered),
            lost: diff(&self.lost, &earlier.lost),
        }
    }

    /// Receptions not yet resolved as delivered or lost.
    pub fn in_flight(&self) -> u64 {
        MessageKind::ALL.iter().map(|&k| self.receptions(k) - self.delivered(k) - self.lost(k)).sum()
    }

    /// `Kind=count` pairs joined by `;`, for CSV cells.
    pub fn by_kind_string(&self) -> String {
        MessageKind::ALL
            .iter()
            .filter_map(|&k| {
                let n = self.transmitted(k);
                (n > 0).then(|| format!("{k}={n}"))
            })
            .collect::<Vec<_>>()
            .join(";")
    }

    fn bump<K: Ord>(map: &mut BTreeMap<K, u64>, key: K, by: u64) {
        *map.entry(key).or_insert(0) += by;
    }
}

#[derive(Debug, Clone)]
pub enum EventPayload<P, T> {
    Deliver { to: NodeId, msg: Message<P> },
    Timer { node: NodeId, timer: T },
    ContextChange { node: NodeId, update: ContextUpdate },
    NodeJoin(NodeId),
    NodeCrash(NodeId),
    NodeShutdown(NodeId),
}

impl<P, T> EventPayload<P, T> {
    fn label(&self) -> &'static str {
        match self {
            EventPayload::Deliver { .. } => "deliver",
            EventPayload::Timer { .. } => "timer",
            EventPayload::ContextChange { .. } => "context",
            EventPayload::NodeJoin(_) => "node-join",
            EventPayload::NodeCrash(_) => "node-crash",
            EventPayload::NodeShutdown(_) => "node-shutdown",
        }
    }

    fn node(&self) -> NodeId {
        match self {
            EventPayload::Deliver { to, .. } => *to,
            EventPayload::Timer { node, .. } | EventPayload::ContextChange { node, .. } => *node,
            EventPayload::NodeJoin(n) | EventPayload::NodeCrash(n) | EventPayload::NodeShutdown(n) => *n,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimEvent<P, T> {
    pub fire_at: SimTime,
    pub seq: u64,
    pub payload: EventPayload<P, T>,
}

impl<P, T> PartialEq for SimEvent<P, T> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.seq == other.seq
    }
}

impl<P, T> Eq for SimEvent<P, T> {}

impl<P, T> PartialOrd for SimEvent<P, T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P, T> Ord for SimEvent<P, T> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        (other.fire_at, other.seq).cmp(&(self.fire_at, self.seq))
    }
}

/// Line-oriented event log: `time node event kind from to detail`, tab separated.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    enabled: bool,
    lines: Vec<String>,
}

impl Trace {
    pub fn new(enabled: bool) -> Self {
        Trace { enabled, lines: Vec::new() }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn record(&mut self, at: SimTime, node: impl fmt::Display, event: &str, kind: Option<MessageKind>, from: Option<NodeId>, to: &str, detail: &str) {
        if !self.enabled {
            return;
        }
        let kind = kind.map_or_else(|| "-".to_string(), |k| k.to_string());
        let from = from.map_or_else(|| "-".to_string(), |n| n.to_string());
        let mut line = format!("{at}\t{node}\t{event}\t{kind}\t{from}\t{to}");
        if !detail.is_empty() {
            let _ = write!(line, "\t{detail}");
        }
        self.lines.push(line);
    }

    /// A free-form annotation (registry dumps, election audits, controller decisions).
    pub fn note(&mut self, at: SimTime, node: impl fmt::Display, event: &str, detail: impl FnOnce() -> String) {
        if self.enabled {
            let d = detail();
            self.record(at, node, event, None, None, "-", &d);
        }
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for line in &self.lines {
            out.push_str(line);
            out.push('\n');
        }
        out
    }
}

pub struct Simulator<P, T> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<SimEvent<P, T>>,
    rng: ChaCha8Rng,
    net: NetConfig,
    nodes: BTreeSet<NodeId>,
    alive: BTreeSet<NodeId>,
    counters: MessageCounters,
    pub trace: Trace,
    processed: u64,
}

impl<P: Body, T: Clone> Simulator<P, T> {
    pub fn new(seed: u64, net: NetConfig) -> Self {
        Simulator {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            net,
            nodes: BTreeSet::new(),
            alive: BTreeSet::new(),
            counters: MessageCounters::default(),
            trace: Trace::new(false),
            processed: 0,
        }
    }

    pub fn with_trace(mut self, enabled: bool) -> Self {
        self.trace = Trace::new(enabled);
        self
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn net(&self) -> &NetConfig {
        &self.net
    }

    pub fn counters(&self) -> &MessageCounters {
        &self.counters
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn events_processed(&self) -> u64 {
        self.processed
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    pub fn add_node(&mut self, node: NodeId, alive: bool) {
        self.nodes.insert(node);
        if alive {
            self.alive.insert(node);
        }
    }

    pub fn is_alive(&self, node: NodeId) -> bool {
        self.alive.contains(&node)
    }

    pub fn kill(&mut self, node: NodeId) {
        self.alive.remove(&node);
    }

    pub fn revive(&mut self, node: NodeId) {
        self.nodes.insert(node);
        self.alive.insert(node);
    }

    pub fn alive_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.alive.iter().copied()
    }

    /// Alive nodes sharing `node`'s partition, excluding `node`.
    pub fn neighbors(&self, node: NodeId) -> Vec<NodeId> {
        let at = self.now.as_secs();
        self.alive.iter().copied().filter(|&n| n != node && self.net.connected(node, n, at)).collect()
    }

    pub fn schedule(&mut self, fire_at: SimTime, payload: EventPayload<P, T>) -> Result<u64, SimError> {
        if fire_at < self.now {
            return Err(SimError::SchedulingInPast { at: fire_at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(SimEvent { fire_at, seq, payload });
        Ok(seq)
    }

    pub fn schedule_in(&mut self, delay: SimTime, payload: EventPayload<P, T>) -> u64 {
        self.schedule(self.now + delay, payload).expect("relative schedule is never in the past")
    }

    pub fn set_timer(&mut self, node: NodeId, at: SimTime, timer: T) {
        let at = at.max(self.now);
        self.schedule(at, EventPayload::Timer { node, timer }).expect("clamped to now");
    }

    pub fn send(&mut self, msg: Message<P>) -> Result<(), SimError> {
        if !self.is_alive(msg.from) {
            return Err(SimError::SenderDead(msg.from));
        }
        let mode = self.net.mode;
        let kind = msg.kind;
        let latency = SimTime::from_secs(self.net.d2d_latency);
        let to_label = msg.to.to_string();
        self.trace.record(self.now, msg.from, "send", Some(kind), Some(msg.from), &to_label, "");
        match &msg.to {
            Destination::Backend => {
                MessageCounters::bump(&mut self.counters.transmitted, (kind, NetMode::Unicast), 1);
                MessageCounters::bump(&mut self.counters.receptions, kind, 1);
                let p = self.net.reachability(msg.from, self.now.as_secs());
                let reached = self.rng.random::<f64>() < p;
                let outcome = if reached { "backend-ok" } else { "backend-lost" };
                if reached {
                    MessageCounters::bump(&mut self.counters.delivered, kind, 1);
                } else {
                    MessageCounters::bump(&mut self.counters.lost, kind, 1);
                }
                self.trace.record(self.now, msg.from, outcome, Some(kind), Some(msg.from), "backend", "");
            }
            Destination::Node(to) => {
                let to = *to;
                MessageCounters::bump(&mut self.counters.transmitted, (kind, NetMode::Unicast), 1);
                MessageCounters::bump(&mut self.counters.receptions, kind, 1);
                self.schedule_in(latency, EventPayload::Deliver { to, msg });
            }
            Destination::Many(targets) => {
                let targets: Vec<NodeId> = targets.iter().copied().filter(|&t| t != msg.from).collect();
                self.fan_out(msg, targets, mode, latency);
            }
            Destination::BroadcastAll => {
                let targets = self.neighbors(msg.from);
                self.fan_out(msg, targets, mode, latency);
            }
        }
        Ok(())
    }

    fn fan_out(&mut self, msg: Message<P>, targets: Vec<NodeId>, mode: NetMode, latency: SimTime) {
        let kind = msg.kind;
        let sends = match mode {
            NetMode::Unicast => targets.len() as u64,
            NetMode::Broadcast => 1,
        };
        if sends > 0 {
            MessageCounters::bump(&mut self.counters.transmitted, (kind, mode), sends);
        }
        MessageCounters::bump(&mut self.counters.receptions, kind, targets.len() as u64);
        for to in targets {
            let copy = Message { to: Destination::Node(to), ..msg.clone() };
            self.schedule_in(latency, EventPayload::Deliver { to, msg: copy });
        }
    }

    /// Pops the next event with `fire_at <= t_end`. Deliveries to dead or
    /// partitioned receivers are counted lost and skipped; crashes mark
    /// the node dead before the event is returned.
    pub fn next_event(&mut self, t_end: SimTime) -> Option<SimEvent<P, T>> {
        loop {
            if self.queue.peek()?.fire_at > t_end {
                return None;
            }
            let ev = self.queue.pop()?;
            self.now = ev.fire_at;
            self.processed += 1;
            match &ev.payload {
                EventPayload::Deliver { to, msg } => {
                    let ok = self.is_alive(*to) && self.net.connected(msg.from, *to, self.now.as_secs());
                    let label = if ok { "deliver" } else { "drop" };
                    self.trace.record(self.now, to, label, Some(msg.kind), Some(msg.from), &to.to_string(), "");
                    if !ok {
                        MessageCounters::bump(&mut self.counters.lost, msg.kind, 1);
                        continue;
                    }
                    MessageCounters::bump(&mut self.counters.delivered, msg.kind, 1);
                }
                EventPayload::Timer { .. } => {
                    if !self.is_alive(ev.payload.node()) {
                        continue;
                    }
                }
                other => {
                    let node = other.node();
                    self.trace.record(self.now, node, other.label(), None, None, "-", "");
                    match other {
                        EventPayload::NodeCrash(n) => {
                            self.alive.remove(n);
                        }
                        EventPayload::NodeJoin(n) => {
                            self.nodes.insert(*n);
                            self.alive.insert(*n);
                        }
                        EventPayload::ContextChange { node, .. } if !self.is_alive(*node) => continue,
                        _ => {}
                    }
                }
            }
            return Some(ev);
        }
    }

    /// Processes every event up to `t_end` and advances the clock to it.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> MessageCounters
    where
        F: FnMut(&mut Self, SimEvent<P, T>),
    {
        while let Some(ev) = self.next_event(t_end) {
            handler(self, ev);
        }
        self.now = self.now.max(t_end);
        self.counters.clone()
    }
}
