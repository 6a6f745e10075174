//! Drives a set of [`NodeAgent`]s over the simulator, plus the optional
//! crowd-sensing application run on top of the elected roles.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::adapt::{plan_cardinality_change, CardinalityController};
use crate::context::{Evaluator, NodeContext};
use crate::election::{ElectionTrigger, TriggerKind};
use crate::membership::PositionKey;
use crate::protocol::{Effects, Msg, NodeAgent, Payload, ProtocolConfig};
use crate::simnet::{Destination, EventPayload, Message, MessageCounters, NetConfig, SimEvent, SimTime, Simulator};
use crate::spec::GroupSpec;
use crate::NodeId;

#[derive(Debug, Clone, PartialEq)]
pub enum Timer {
    Tick,
    Close(PositionKey),
    /// Mid-window sensing by role holders.
    Sense,
    /// Window end: backend uploads.
    Flush,
}

/// A timer tagged with the node incarnation that set it; timers from
/// before a restart are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeTimer {
    pub epoch: u32,
    pub timer: Timer,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phasing {
    /// Node `i` of `n` ticks at offset `tick * i / n`.
    #[default]
    Spread,
    /// Every node ticks on whole multiples of the period.
    Aligned,
}

/// Which layer uploads to the backend.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Every node uploads each reading itself.
    ClientServer,
    /// Role holders report to the elected aggregator, which uploads one batch per window.
    #[default]
    Sois,
}

pub const GEOLOCATOR: &str = "geolocator";
pub const ACCELEROMETER: &str = "accelerometer";
pub const AGGREGATOR: &str = "aggregator";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensingConfig {
    pub mode: Mode,
    /// Seconds per sensing window.
    pub period: f64,
    pub windows: u64,
    /// GPS signal percentage below which the GPS sensor yields nothing.
    pub gps_threshold: f64,
}

/// A membership transition seen by the driver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipEvent {
    pub at: SimTime,
    pub node: NodeId,
    pub joined: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SensingStats {
    /// Windows whose end found some alive node holding the aggregator role.
    pub aggregator_windows: u64,
    pub samples_per_window: Vec<u32>,
    /// Feedback decisions: new `k` and the election event it raised.
    pub adaptations: Vec<(u32, ElectionTrigger)>,
}

struct Sensing {
    cfg: SensingConfig,
    buffer: u32,
    last_flushed: Option<u64>,
    controller: Option<CardinalityController>,
    stats: SensingStats,
}

pub struct World {
    pub sim: Simulator<Payload, NodeTimer>,
    pub agents: BTreeMap<NodeId, NodeAgent>,
    pub eval: Evaluator,
    pub proto: ProtocolConfig,
    phases: BTreeMap<NodeId, SimTime>,
    phasing: Phasing,
    epochs: BTreeMap<NodeId, u32>,
    sensing: Option<Sensing>,
    pub membership_log: Vec<MembershipEvent>,
}

impl World {
    /// One agent per context; all nodes start alive.
    pub fn new(
        seed: u64,
        net: NetConfig,
        proto: ProtocolConfig,
        eval: Evaluator,
        spec: &GroupSpec,
        contexts: Vec<NodeContext>,
        phasing: Phasing,
    ) -> Self {
        let mut world = World {
            sim: Simulator::new(seed, net),
            agents: BTreeMap::new(),
            eval,
            proto,
            phases: BTreeMap::new(),
            phasing,
            epochs: BTreeMap::new(),
            sensing: None,
            membership_log: Vec::new(),
        };
        let n = contexts.len().max(1) as u64;
        let tick = world.proto.tick_period();
        for (i, ctx) in contexts.into_iter().enumerate() {
            let id = ctx.node_id;
            let phase = match phasing {
                Phasing::Spread => SimTime(tick.0 * i as u64 / n),
                Phasing::Aligned => SimTime::ZERO,
            };
            world.phases.insert(id, phase);
            world.sim.add_node(id, true);
            world.agents.insert(id, NodeAgent::new(id, spec.clone(), ctx));
            world.set_timer(id, phase, Timer::Tick);
        }
        world
    }

    pub fn with_trace(mut self, enabled: bool) -> Self {
        self.sim.trace = crate::simnet::Trace::new(enabled);
        self
    }

    /// Attaches the sensing application. Ticks stop in client-server mode.
    pub fn with_sensing(mut self, cfg: SensingConfig, controller: Option<CardinalityController>) -> Self {
        let ids: Vec<NodeId> = self.agents.keys().copied().collect();
        for id in ids {
            self.schedule_sensing(id, SimTime::ZERO, &cfg);
        }
        self.sensing = Some(Sensing { cfg, buffer: 0, last_flushed: None, controller, stats: SensingStats::default() });
        self
    }

    fn schedule_sensing(&mut self, id: NodeId, from: SimTime, cfg: &SensingConfig) {
        let period = SimTime::from_secs(cfg.period);
        for w in 0..cfg.windows {
            let start = SimTime(period.0 * w);
            let mid = start + SimTime(period.0 / 2);
            let end = SimTime(period.0 * (w + 1));
            if cfg.mode == Mode::Sois && mid >= from {
                self.set_timer(id, mid, Timer::Sense);
            }
            if end >= from {
                self.set_timer(id, end, Timer::Flush);
            }
        }
    }

    fn set_timer(&mut self, node: NodeId, at: SimTime, timer: Timer) {
        let epoch = self.epochs.get(&node).copied().unwrap_or(0);
        self.sim.set_timer(node, at, NodeTimer { epoch, timer });
    }

    pub fn phasing(&self) -> Phasing {
        self.phasing
    }

    pub fn sensing_stats(&self) -> Option<&SensingStats> {
        self.sensing.as_ref().map(|s| &s.stats)
    }

    pub fn now(&self) -> SimTime {
        self.sim.now()
    }

    pub fn counters(&self) -> &MessageCounters {
        self.sim.counters()
    }

    pub fn schedule_event(&mut self, at: SimTime, ev: EventPayload<Payload, NodeTimer>) {
        self.sim.schedule(at.max(self.sim.now()), ev).expect("clamped to now");
    }

    pub fn run_until(&mut self, t_end: SimTime) -> MessageCounters {
        while let Some(ev) = self.sim.next_event(t_end) {
            self.dispatch(ev);
        }
        self.sim.run_until(t_end, |_, _| {})
    }

    /// Runs until no message or election is pending and `settle` more
    /// seconds pass without any message, or until `limit`.
    pub fn run_to_quiescence(&mut self, settle: f64, limit: SimTime) -> bool {
        let step = SimTime::from_secs(settle);
        loop {
            let before = self.sim.counters().total_transmitted();
            let next = (self.now() + step).min(limit);
            self.run_until(next);
            let quiet = self.sim.counters().total_transmitted() == before
                && self.agents.iter().all(|(id, a)| !self.sim.is_alive(*id) || a.elections.is_empty());
            if quiet {
                return true;
            }
            if next >= limit {
                return false;
            }
        }
    }

    /// Opens an election at `node` as if it had observed `trigger`.
    pub fn inject_trigger(&mut self, node: NodeId, trigger: ElectionTrigger) {
        let now = self.now();
        let Some(agent) = self.agents.get_mut(&node) else { return };
        let fx = agent.open(trigger, now, &self.eval, &self.proto);
        self.apply(node, fx);
    }

    /// Sends a message on behalf of `node` (ignored when it is dead).
    pub fn send(&mut self, msg: Msg) {
        let _ = self.sim.send(msg);
    }

    fn apply(&mut self, node: NodeId, fx: Effects) {
        let now = self.now();
        for note in fx.notes {
            if note == "join" || note == "leave" {
                self.membership_log.push(MembershipEvent { at: now, node, joined: note == "join" });
            }
            self.sim.trace.note(now, node, "protocol", || note);
        }
        for (at, key) in fx.deadlines {
            self.set_timer(node, at, Timer::Close(key));
        }
        for m in fx.messages {
            let _ = self.sim.send(m);
        }
    }

    fn dispatch(&mut self, ev: SimEvent<Payload, NodeTimer>) {
        let now = self.now();
        match ev.payload {
            EventPayload::Deliver { to, msg } => {
                if let Payload::SensorReport { samples, .. } = &msg.payload {
                    if let Some(s) = &mut self.sensing {
                        if self.agents.get(&to).is_some_and(|a| a.holds(AGGREGATOR)) {
                            s.buffer += samples;
                        }
                    }
                    return;
                }
                let Some(agent) = self.agents.get_mut(&to) else { return };
                let fx = agent.handle(&msg, now, &self.eval, &self.proto);
                self.apply(to, fx);
            }
            EventPayload::Timer { node, timer } => {
                if self.epochs.get(&node).copied().unwrap_or(0) == timer.epoch {
                    self.on_timer(node, timer.timer);
                }
            }
            EventPayload::ContextChange { node, update } => {
                if let Some(agent) = self.agents.get_mut(&node) {
                    agent.ctx.apply(&update, now.as_secs());
                }
            }
            EventPayload::NodeCrash(node) => {
                if self.agents.get(&node).is_some_and(|a| a.is_member()) {
                    self.membership_log.push(MembershipEvent { at: now, node, joined: false });
                }
            }
            EventPayload::NodeJoin(node) => {
                let Some(agent) = self.agents.get_mut(&node) else { return };
                agent.reset();
                *self.epochs.entry(node).or_default() += 1;
                let tick = self.proto.tick_period();
                let phase = self.phases.get(&node).copied().unwrap_or_default();
                // next tick on the node's own phase grid
                let k = now.0.saturating_sub(phase.0).div_ceil(tick.0.max(1));
                self.set_timer(node, SimTime(phase.0 + k * tick.0), Timer::Tick);
                if let Some(cfg) = self.sensing.as_ref().map(|s| s.cfg.clone()) {
                    self.schedule_sensing(node, now, &cfg);
                }
            }
            EventPayload::NodeShutdown(node) => {
                if let Some(agent) = self.agents.get_mut(&node) {
                    if agent.is_member() {
                        let msg = Message::new(node, Destination::BroadcastAll, &agent.spec.name, Payload::Leave { at: now });
                        let _ = self.sim.send(msg);
                        self.membership_log.push(MembershipEvent { at: now, node, joined: false });
                    }
                    agent.reset();
                }
                self.sim.kill(node);
            }
        }
    }

    fn on_timer(&mut self, node: NodeId, timer: Timer) {
        let now = self.now();
        match timer {
            Timer::Tick => {
                if self.sensing.as_ref().is_some_and(|s| s.cfg.mode == Mode::ClientServer) {
                    return;
                }
                let neighbors = self.sim.neighbors(node);
                let Some(agent) = self.agents.get_mut(&node) else { return };
                let fx = agent.tick(now, &neighbors, &self.eval, &self.proto);
                self.apply(node, fx);
                self.set_timer(node, now + self.proto.tick_period(), Timer::Tick);
            }
            Timer::Close(key) => {
                let Some(agent) = self.agents.get_mut(&node) else { return };
                let fx = agent.close(&key, now);
                self.apply(node, fx);
            }
            Timer::Sense => self.sense(node),
            Timer::Flush => self.flush(node),
        }
    }

    fn sense(&mut self, node: NodeId) {
        let Some(agent) = self.agents.get(&node) else { return };
        let Some(aggregator) = agent.registry().positions(AGGREGATOR).first().and_then(|p| p.holder_node()) else {
            return;
        };
        for role in [GEOLOCATOR, ACCELEROMETER] {
            if !agent.holds(role) {
                continue;
            }
            if aggregator == node {
                if let Some(s) = &mut self.sensing {
                    s.buffer += 1;
                }
            } else {
                let msg = Message::new(
                    node,
                    Destination::Node(aggregator),
                    &agent.spec.name,
                    Payload::SensorReport { role: role.to_string(), samples: 1 },
                );
                let _ = self.sim.send(msg);
            }
        }
    }

    fn active_sensors(&self, node: NodeId, threshold: f64) -> u32 {
        let Some(agent) = self.agents.get(&node) else { return 0 };
        let ctx = &agent.ctx;
        let accel = ctx.booleans.get("ACCELEROMETER").copied().unwrap_or(false);
        let gps = ctx.booleans.get("GPS").copied().unwrap_or(false)
            && ctx.scalars.get("GPS_SIGNAL").is_none_or(|s| *s >= threshold);
        accel as u32 + gps as u32
    }

    fn flush(&mut self, node: NodeId) {
        let now = self.now();
        let Some(s) = &self.sensing else { return };
        let window = (now.0 / SimTime::from_secs(s.cfg.period).0.max(1)).saturating_sub(1);
        match s.cfg.mode {
            Mode::ClientServer => {
                let count = self.active_sensors(node, s.cfg.gps_threshold);
                let group = self.agents.get(&node).map(|a| a.spec.name.clone()).unwrap_or_default();
                for _ in 0..count {
                    let msg = Message::new(node, Destination::Backend, &group, Payload::BackendRequest { samples: 1 });
                    let _ = self.sim.send(msg);
                }
            }
            Mode::Sois => {
                let Some(agent) = self.agents.get(&node) else { return };
                if !agent.holds(AGGREGATOR) {
                    return;
                }
                let s = self.sensing.as_mut().expect("checked above");
                if s.last_flushed == Some(window) {
                    return;
                }
                s.last_flushed = Some(window);
                s.stats.aggregator_windows += 1;
                let samples = std::mem::take(&mut s.buffer);
                s.stats.samples_per_window.push(samples);
                let group = agent.spec.name.clone();
                let msg = Message::new(node, Destination::Backend, &group, Payload::BackendRequest { samples });
                let _ = self.sim.send(msg);
                self.adapt(node, samples);
            }
        }
    }

    /// Aggregator feedback on the controlled role's cardinality.
    fn adapt(&mut self, node: NodeId, samples: u32) {
        let now = self.now();
        let Some(s) = &mut self.sensing else { return };
        let Some(ctrl) = &mut s.controller else { return };
        let Some(new_k) = ctrl.feedback(samples) else { return };
        let role = ctrl.role.clone();
        let agent = self.agents.get_mut(&node).expect("aggregator exists");
        let (change, trigger) = plan_cardinality_change(agent.registry(), &role, new_k, now);
        agent.apply_spec_change(&change, now);
        s.stats.adaptations.push((new_k, trigger.clone()));
        let peers = agent.membership.peers();
        let group = agent.spec.name.clone();
        self.sim.trace.note(now, node, "adapt", || format!("{role} k={new_k} {} {}", trigger.kind, trigger.position));
        let msg = Message::new(node, Destination::Many(peers), &group, Payload::SpecUpdate { change, at: now });
        let _ = self.sim.send(msg);
    }

    /// Alive members according to their own state.
    pub fn alive_members(&self) -> Vec<NodeId> {
        self.agents
            .iter()
            .filter(|(id, a)| self.sim.is_alive(**id) && a.is_member())
            .map(|(id, _)| *id)
            .collect()
    }

    /// True when every alive member holds the same replica view.
    pub fn registries_agree(&self) -> bool {
        let views: BTreeSet<_> =
            self.alive_members().iter().map(|id| self.agents[id].registry().agreement_view()).collect();
        views.len() <= 1
    }

    /// True when every alive member's member set equals the set of alive members.
    pub fn membership_consistent(&self) -> bool {
        let alive: BTreeSet<NodeId> = self.alive_members().into_iter().collect();
        alive.iter().all(|id| {
            let known: BTreeSet<NodeId> = self.agents[id].registry().members.keys().copied().collect();
            known == alive
        })
    }

    /// Elections decided, summed over agents.
    pub fn elections(&self) -> BTreeMap<TriggerKind, u64> {
        let mut out = BTreeMap::new();
        for a in self.agents.values() {
            for (k, v) in &a.stats.elections {
                *out.entry(*k).or_default() += v;
            }
        }
        out
    }
}
