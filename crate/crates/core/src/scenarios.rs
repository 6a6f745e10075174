//! Scenario harness: the bus-monitoring comparison of a client-server
//! baseline against self-organized roles, bus-ride detection, peer
//! review, and parameter sweeps.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::CardinalityController;
use crate::context::{ContextUpdate, Evaluator, NodeContext};
use crate::election::TriggerKind;
use crate::protocol::{Payload, ProtocolConfig};
use crate::review::{assign_reviewers, review_update, round_rng, ReviewStats, Verdict};
use crate::simnet::{
    Destination, EventPayload, Message, MessageCounters, MessageKind, NetConfig, NetMode, Partition, ReachabilityStep,
    SimTime,
};
use crate::spec::{bind_cardinality, parse_spec, Criterion, GroupSpec, SpecError};
use crate::world::{MembershipEvent, Mode, Phasing, SensingConfig, World, ACCELEROMETER, AGGREGATOR, GEOLOCATOR};
use crate::{par, NodeId};

pub const BUS_MONITORING_XML: &str = include_str!("../data/specs/bus-monitoring.xml");
pub const BUS_RIDE_XML: &str = include_str!("../data/specs/bus-ride.xml");
pub const MUSIC_STREAMING_XML: &str = include_str!("../data/specs/music-streaming.xml");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("override `{0}` is not of the form key=value")]
    MalformedOverride(String),
    #[error("config file: {0}")]
    Format(String),
    #[error("spec does not define role `{0}`")]
    ConfigSpecMismatch(String),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { path: path.to_string(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InternetType {
    Cellular,
    WiFi,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KBindings {
    pub k1: u32,
    pub k2: u32,
}

/// Network settings as they appear in a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioNet {
    pub mode: NetMode,
    pub d2d_latency: f64,
    pub backend_latency: f64,
    pub cellular_reachability: f64,
    pub wifi_reachability: f64,
    /// Later reachability changes: `{ node, from, probability }`.
    pub reachability: Vec<ReachabilityChange>,
    pub partitions: Vec<Partition>,
}

impl Default for ScenarioNet {
    fn default() -> Self {
        let base = NetConfig::default();
        ScenarioNet {
            mode: base.mode,
            d2d_latency: base.d2d_latency,
            backend_latency: base.backend_latency,
            cellular_reachability: 0.95,
            wifi_reachability: 0.99,
            reachability: Vec::new(),
            partitions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReachabilityChange {
    pub node: u32,
    pub from: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioEvent {
    Crash { at: f64, node: u32 },
    Revive { at: f64, node: u32 },
    Shutdown { at: f64, node: u32 },
    SetScalar { at: f64, node: u32, term: String, value: f64 },
    SetBool { at: f64, node: u32, term: String, value: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptConfig {
    pub role: String,
    pub target_samples_per_window: u32,
    pub k_min: u32,
    pub k_max: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub mode: Mode,
    pub node_count: u32,
    /// Per-node battery percentages; empty means a descending default.
    pub battery_levels: Vec<f64>,
    /// Per-node Internet access; empty means all cellular.
    pub internet_type: Vec<InternetType>,
    /// Per-node GPS signal percentages; empty means 80 for all.
    pub gps_signal: Vec<f64>,
    /// Per-node accelerometer availability; empty means present on all.
    pub accelerometer: Vec<bool>,
    pub duration: f64,
    pub sensing_period: f64,
    pub seed: u64,
    pub gps_threshold: f64,
    pub net: ScenarioNet,
    pub k_bindings: KBindings,
    pub protocol: ProtocolConfig,
    pub events: Vec<ScenarioEvent>,
    pub adapt: Option<AdaptConfig>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "bus".into(),
            mode: Mode::Sois,
            node_count: 4,
            battery_levels: Vec::new(),
            internet_type: Vec::new(),
            gps_signal: Vec::new(),
            accelerometer: Vec::new(),
            duration: 100.0,
            sensing_period: 10.0,
            seed: 1,
            gps_threshold: 10.0,
            net: ScenarioNet::default(),
            k_bindings: KBindings { k1: 2, k2: 2 },
            protocol: ProtocolConfig::default(),
            events: Vec::new(),
            adapt: None,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn windows(&self) -> u64 {
        (self.duration / self.sensing_period + 1e-9).floor() as u64
    }

    pub fn battery(&self, i: usize) -> f64 {
        self.battery_levels.get(i).copied().unwrap_or_else(|| (90.0 - 10.0 * i as f64).max(10.0))
    }

    pub fn internet(&self, i: usize) -> InternetType {
        self.internet_type.get(i).copied().unwrap_or(InternetType::Cellular)
    }

    pub fn gps(&self, i: usize) -> f64 {
        self.gps_signal.get(i).copied().unwrap_or(80.0)
    }

    pub fn has_accelerometer(&self, i: usize) -> bool {
        self.accelerometer.get(i).copied().unwrap_or(true)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = self.node_count as usize;
        if !(2..=10).contains(&self.node_count) {
            return Err(invalid("node_count", format!("{} is outside [2, 10]", self.node_count)));
        }
        fn per_node<T>(path: &str, v: &[T], n: usize) -> Result<(), ConfigError> {
            if v.is_empty() || v.len() == n {
                Ok(())
            } else {
                Err(invalid(path, format!("has {} entries for {n} nodes", v.len())))
            }
        }
        per_node("battery_levels", &self.battery_levels, n)?;
        per_node("internet_type", &self.internet_type, n)?;
        per_node("gps_signal", &self.gps_signal, n)?;
        per_node("accelerometer", &self.accelerometer, n)?;
        for (i, b) in self.battery_levels.iter().enumerate() {
            if !(10.0..=90.0).contains(b) {
                return Err(invalid(&format!("battery_levels[{i}]"), format!("{b} is outside [10, 90]")));
            }
        }
        for (i, g) in self.gps_signal.iter().enumerate() {
            if !(0.0..=100.0).contains(g) {
                return Err(invalid(&format!("gps_signal[{i}]"), format!("{g} is outside [0, 100]")));
            }
        }
        if !(self.duration > 0.0) {
            return Err(invalid("duration", "must be positive"));
        }
        if !(self.sensing_period > 0.0) {
            return Err(invalid("sensing_period", "must be positive"));
        }
        if self.k_bindings.k1 == 0 {
            return Err(invalid("k_bindings.k1", "must be at least 1"));
        }
        if self.k_bindings.k2 == 0 {
            return Err(invalid("k_bindings.k2", "must be at least 1"));
        }
        if !(self.protocol.tick > 0.0) {
            return Err(invalid("protocol.tick", "must be positive"));
        }
        self.protocol.election.validate().map_err(|e| invalid("protocol.election", e.to_string()))?;
        for p in [("net.cellular_reachability", self.net.cellular_reachability), ("net.wifi_reachability", self.net.wifi_reachability)] {
            if !(0.0..=1.0).contains(&p.1) {
                return Err(invalid(p.0, "probability outside [0, 1]"));
            }
        }
        self.net_config().validate().map_err(|e| invalid("net", e.to_string()))?;
        if let Some(a) = &self.adapt {
            CardinalityController::new(&a.role, a.target_samples_per_window, self.sensing_period, a.k_min, a.k_max, a.k_min)
                .map_err(|e| invalid("adapt", e.to_string()))?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides; dotted keys reach nested tables.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut root = toml::Table::try_from(self).expect("config serializes to a table");
        for raw in overrides {
            let (key, value) = raw.split_once('=').ok_or_else(|| ConfigError::MalformedOverride(raw.clone()))?;
            let (key, value) = (key.trim(), value.trim());
            let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(value.to_string()));
            let mut table = &mut root;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let last = i + 1 == parts.len();
                let entry = table.get_mut(*part).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
                if last {
                    *entry = parsed.clone();
                    break;
                }
                table = entry.as_table_mut().ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
            }
        }
        let cfg: ScenarioConfig = root.try_into().map_err(|e: toml::de::Error| ConfigError::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn reachability_of(&self, i: usize) -> f64 {
        match self.internet(i) {
            InternetType::Cellular => self.net.cellular_reachability,
            InternetType::WiFi => self.net.wifi_reachability,
            InternetType::None => 0.0,
        }
    }

    pub fn net_config(&self) -> NetConfig {
        let mut reach: BTreeMap<NodeId, Vec<ReachabilityStep>> = (0..self.node_count as usize)
            .map(|i| (NodeId(i as u32), vec![ReachabilityStep { from: 0.0, probability: self.reachability_of(i) }]))
            .collect();
        for c in &self.net.reachability {
            let steps = reach.entry(NodeId(c.node)).or_default();
            steps.push(ReachabilityStep { from: c.from, probability: c.probability });
            steps.sort_by(|a, b| a.from.total_cmp(&b.from));
        }
        NetConfig {
            mode: self.net.mode,
            d2d_latency: self.net.d2d_latency,
            backend_latency: self.net.backend_latency,
            default_reachability: 0.0,
            backend_reachability: reach,
            partitions: self.net.partitions.clone(),
        }
    }

    /// Initial context of node `i`.
    pub fn context(&self, i: usize) -> NodeContext {
        let gps = self.gps(i);
        NodeContext::new(NodeId(i as u32))
            .with_scalar("BATTERY_LEVEL", self.battery(i))
            .with_scalar("GPS_SIGNAL", gps)
            .with_bool("GPS", gps >= self.gps_threshold)
            .with_bool("ACCELEROMETER", self.has_accelerometer(i))
            .with_bool("INTERNET", self.internet(i) != InternetType::None)
    }

    /// Sensors that produce readings on node `i`.
    pub fn active_sensors(&self, i: usize) -> u32 {
        self.has_accelerometer(i) as u32 + (self.gps(i) >= self.gps_threshold) as u32
    }

    pub fn bindings(&self) -> BTreeMap<String, u32> {
        BTreeMap::from([("k1".to_string(), self.k_bindings.k1), ("k2".to_string(), self.k_bindings.k2)])
    }
}

/// The bus-monitoring specification bound with the config's `k1`/`k2`.
pub fn bus_monitoring(cfg: &ScenarioConfig) -> Result<GroupSpec, ConfigError> {
    let spec = parse_spec(BUS_MONITORING_XML).expect("bundled spec parses");
    Ok(bind_cardinality(&spec, &cfg.bindings())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub mode: Mode,
    pub seed: u64,
    pub node_count: u32,
    pub windows: u64,
    /// Requests fired to the backend.
    pub m1_requests: u64,
    /// Requests lost to intermittent connectivity.
    pub m2_failed: u64,
    pub counters: MessageCounters,
    pub elections: BTreeMap<TriggerKind, u64>,
    pub aggregator_windows: u64,
    pub review: Option<ReviewStats>,
    /// Simulated seconds covered by the run.
    pub runtime: f64,
    pub trace: Option<String>,
}

impl MetricsReport {
    pub fn elections_total(&self) -> u64 {
        self.elections.values().sum()
    }

    pub fn m2_rate(&self) -> f64 {
        if self.m1_requests == 0 {
            0.0
        } else {
            self.m2_failed as f64 / self.m1_requests as f64
        }
    }

    pub fn elections_string(&self) -> String {
        [TriggerKind::Vacancy, TriggerKind::Resignation, TriggerKind::Challenge]
            .iter()
            .map(|k| format!("{k}={}", self.elections.get(k).copied().unwrap_or(0)))
            .collect::<Vec<_>>()
            .join(";")
    }
}

fn schedule_events(world: &mut World, events: &[ScenarioEvent]) {
    for ev in events {
        let (at, payload) = match ev {
            ScenarioEvent::Crash { at, node } => (*at, EventPayload::NodeCrash(NodeId(*node))),
            ScenarioEvent::Revive { at, node } => (*at, EventPayload::NodeJoin(NodeId(*node))),
            ScenarioEvent::Shutdown { at, node } => (*at, EventPayload::NodeShutdown(NodeId(*node))),
            ScenarioEvent::SetScalar { at, node, term, value } => {
                (*at, EventPayload::ContextChange { node: NodeId(*node), update: ContextUpdate::scalar(term, *value) })
            }
            ScenarioEvent::SetBool { at, node, term, value } => {
                (*at, EventPayload::ContextChange { node: NodeId(*node), update: ContextUpdate::boolean(term, *value) })
            }
        };
        world.schedule_event(SimTime::from_secs(at), payload);
    }
}

/// A world for `cfg` under `spec` with sensing attached, not yet run.
pub fn scenario_world(cfg: &ScenarioConfig, spec: &GroupSpec, mode: Mode, trace: bool) -> World {
    let contexts = (0..cfg.node_count as usize).map(|i| cfg.context(i)).collect();
    let controller = cfg.adapt.as_ref().and_then(|a| {
        let k = spec.role(&a.role)?.cardinality.current()?;
        CardinalityController::new(&a.role, a.target_samples_per_window, cfg.sensing_period, a.k_min, a.k_max, k).ok()
    });
    let sensing = SensingConfig {
        mode,
        period: cfg.sensing_period,
        windows: cfg.windows(),
        gps_threshold: cfg.gps_threshold,
    };
    let mut world = World::new(
        cfg.seed,
        cfg.net_config(),
        cfg.protocol.clone(),
        Evaluator::default(),
        spec,
        contexts,
        Phasing::Spread,
    )
    .with_trace(trace)
    .with_sensing(sensing, controller);
    schedule_events(&mut world, &cfg.events);
    world
}

fn report(cfg: &ScenarioConfig, mode: Mode, world: &World) -> MetricsReport {
    let c = world.counters();
    MetricsReport {
        scenario: cfg.name.clone(),
        mode,
        seed: cfg.seed,
        node_count: cfg.node_count,
        windows: cfg.windows(),
        m1_requests: c.transmitted(MessageKind::BackendRequest),
        m2_failed: c.lost(MessageKind::BackendRequest),
        counters: c.clone(),
        elections: world.elections(),
        aggregator_windows: world.sensing_stats().map_or(0, |s| s.aggregator_windows),
        review: None,
        runtime: world.now().as_secs(),
        trace: world.sim.trace.enabled().then(|| world.sim.trace.render()),
    }
}

/// Every node uploads each of its readings itself.
pub fn run_client_server(cfg: &ScenarioConfig, trace: bool) -> Result<MetricsReport, ConfigError> {
    cfg.validate()?;
    let spec = bus_monitoring(cfg)?;
    let mut world = scenario_world(cfg, &spec, Mode::ClientServer, trace);
    world.run_until(SimTime::from_secs(cfg.duration));
    Ok(report(cfg, Mode::ClientServer, &world))
}

/// The self-organized world for `cfg`, run to the end of its duration.
pub fn sois_world(cfg: &ScenarioConfig, spec: &GroupSpec, trace: bool) -> Result<World, ConfigError> {
    cfg.validate()?;
    for role in [GEOLOCATOR, ACCELEROMETER, AGGREGATOR] {
        if spec.role(role).is_none() {
            return Err(ConfigError::ConfigSpecMismatch(role.to_string()));
        }
    }
    if let Some(p) = spec.unbound_parameters().first() {
        return Err(ConfigError::Spec(SpecError::MissingBinding(p.clone())));
    }
    let mut world = scenario_world(cfg, spec, Mode::Sois, trace);
    world.run_until(SimTime::from_secs(cfg.duration));
    Ok(world)
}

/// Self-organized run: role holders report to the elected aggregator.
pub fn run_sois(cfg: &ScenarioConfig, spec: &GroupSpec, trace: bool) -> Result<MetricsReport, ConfigError> {
    let world = sois_world(cfg, spec, trace)?;
    Ok(report(cfg, Mode::Sois, &world))
}

/// Runs `cfg.mode` against the bus-monitoring spec, or `spec` when given.
pub fn run(cfg: &ScenarioConfig, spec: Option<&GroupSpec>, trace: bool) -> Result<MetricsReport, ConfigError> {
    match cfg.mode {
        Mode::ClientServer => run_client_server(cfg, trace),
        Mode::Sois => {
            let bound;
            let spec = match spec {
                Some(s) => {
                    bound = bind_cardinality(s, &cfg.bindings())?;
                    &bound
                }
                None => {
                    bound = bus_monitoring(cfg)?;
                    &bound
                }
            };
            run_sois(cfg, spec, trace)
        }
    }
}

/// One rider in the bus-ride detection scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rider {
    pub bssid: String,
    pub wifi_signal: f64,
    /// Seconds at which the device starts moving, if ever.
    pub moving_from: Option<f64>,
    pub battery: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RideConfig {
    pub riders: Vec<Rider>,
    pub duration: f64,
    pub seed: u64,
}

/// The bus-monitoring roles under the bus-ride group criteria.
pub fn bus_ride_spec() -> GroupSpec {
    let ride = parse_spec(BUS_RIDE_XML).expect("bundled spec parses");
    let bus = parse_spec(BUS_MONITORING_XML).expect("bundled spec parses");
    let bus = bind_cardinality(&bus, &BTreeMap::from([("k1".into(), 2), ("k2".into(), 2)])).expect("bindings");
    bus.with_group_criteria(&ride.criteria)
}

/// Join and leave times of riders under `spec`.
pub fn run_bus_ride_detection(cfg: &RideConfig, spec: &GroupSpec) -> Vec<MembershipEvent> {
    let contexts: Vec<NodeContext> = cfg
        .riders
        .iter()
        .enumerate()
        .map(|(i, r)| {
            NodeContext::new(NodeId(i as u32))
                .with_string("BSSID", &r.bssid)
                .with_scalar("WIFI_SIGNAL", r.wifi_signal)
                .with_scalar("BATTERY_LEVEL", r.battery)
                .with_bool("ACCELEROMETER", true)
                .with_bool("MOOVING", false)
        })
        .collect();
    let mut world = World::new(
        cfg.seed,
        NetConfig::default(),
        ProtocolConfig::default(),
        Evaluator::default(),
        spec,
        contexts,
        Phasing::Aligned,
    );
    for (i, r) in cfg.riders.iter().enumerate() {
        if let Some(at) = r.moving_from {
            world.schedule_event(
                SimTime::from_secs(at),
                EventPayload::ContextChange { node: NodeId(i as u32), update: ContextUpdate::boolean("MOOVING", true) },
            );
        }
    }
    world.run_until(SimTime::from_secs(cfg.duration));
    world.membership_log
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewScenario {
    pub node_count: u32,
    pub rounds: u64,
    pub cheat_rate: f64,
    pub accuracy: f64,
    pub seed: u64,
    pub mode: NetMode,
}

/// Forms the group, then runs `rounds` review rounds over the converged
/// member set. Each member's update goes to its reviewer as a
/// `ReviewRequest` and comes back as a `ReviewVerdict`.
pub fn run_review_scenario(sc: &ReviewScenario) -> Result<MetricsReport, ConfigError> {
    if sc.node_count < 2 {
        return Err(invalid("node_count", "peer review needs at least two nodes"));
    }
    let spec = parse_spec(MUSIC_STREAMING_XML).expect("bundled spec parses");
    let contexts: Vec<NodeContext> = (0..sc.node_count)
        .map(|i| {
            NodeContext::new(NodeId(i))
                .with_bool("INTERNET", true)
                .with_bool("BLUETOOTH", true)
                .with_scalar("BATTERY_LEVEL", 30.0 + (i % 7) as f64 * 10.0)
        })
        .collect();
    let net = NetConfig { mode: sc.mode, ..NetConfig::default() };
    let mut world =
        World::new(sc.seed, net, ProtocolConfig::default(), Evaluator::default(), &spec, contexts, Phasing::Spread);
    world.run_to_quiescence(2.0, SimTime::from_secs(60.0));

    let members: BTreeSet<NodeId> = world.alive_members().into_iter().collect();
    let mut stats = ReviewStats::new(sc.accuracy);
    for round in 0..sc.rounds {
        let r = assign_reviewers(&members, round, sc.seed).map_err(|e| invalid("node_count", e.to_string()))?;
        stats.record_round(&r);
        let mut rng = round_rng(sc.seed ^ 0x9e37_79b9_7f4a_7c15, round);
        for (&updater, &reviewer) in &r.assignment {
            let valid = rng.random::<f64>() >= sc.cheat_rate;
            world.send(Message::new(
                updater,
                Destination::Node(reviewer),
                &spec.name,
                Payload::ReviewRequest { round, valid },
            ));
            let verdict = review_update(updater, valid, &mut stats, &mut rng);
            world.send(Message::new(
                reviewer,
                Destination::Node(updater),
                &spec.name,
                Payload::ReviewVerdict { round, accepted: verdict == Verdict::Accept },
            ));
        }
        let next = world.now() + SimTime::from_secs(1.0);
        world.run_until(next);
    }
    let c = world.counters();
    Ok(MetricsReport {
        scenario: "review".into(),
        mode: Mode::Sois,
        seed: sc.seed,
        node_count: sc.node_count,
        windows: sc.rounds,
        m1_requests: 0,
        m2_failed: 0,
        counters: c.clone(),
        elections: world.elections(),
        aggregator_windows: 0,
        review: Some(stats),
        runtime: world.now().as_secs(),
        trace: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    NodeCount,
    Battery,
    InternetType,
    Gps,
    Delta,
}

impl std::str::FromStr for SweepAxis {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "node_count" => SweepAxis::NodeCount,
            "battery" => SweepAxis::Battery,
            "internet_type" => SweepAxis::InternetType,
            "gps" => SweepAxis::Gps,
            "delta" => SweepAxis::Delta,
            other => return Err(invalid("axis", format!("unknown sweep axis `{other}`"))),
        })
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::NodeCount => "node_count",
            SweepAxis::Battery => "battery",
            SweepAxis::InternetType => "internet_type",
            SweepAxis::Gps => "gps",
            SweepAxis::Delta => "delta",
        })
    }
}

/// The config with `axis` set to `value` on every node.
pub fn apply_axis(cfg: &ScenarioConfig, axis: SweepAxis, value: &str) -> Result<ScenarioConfig, ConfigError> {
    let mut out = cfg.clone();
    let num = || value.parse::<f64>().map_err(|_| invalid(&axis.to_string(), format!("`{value}` is not a number")));
    match axis {
        SweepAxis::NodeCount => {
            let n: u32 = value.parse().map_err(|_| invalid("node_count", format!("`{value}` is not an integer")))?;
            let resize = |v: &mut Vec<_>| v.clear();
            out.node_count = n;
            if cfg.node_count != n {
                resize(&mut out.battery_levels);
                out.internet_type.clear();
                out.gps_signal.clear();
                out.accelerometer.clear();
            }
        }
        SweepAxis::Battery => out.battery_levels = vec![num()?; out.node_count as usize],
        SweepAxis::Gps => out.gps_signal = vec![num()?; out.node_count as usize],
        SweepAxis::Delta => out.protocol.election.delta = num()?,
        SweepAxis::InternetType => {
            let t = match value {
                "Cellular" | "cellular" => InternetType::Cellular,
                "WiFi" | "wifi" => InternetType::WiFi,
                "None" | "none" => InternetType::None,
                other => return Err(invalid("internet_type", format!("unknown internet type `{other}`"))),
            };
            out.internet_type = vec![t; out.node_count as usize];
        }
    }
    out.validate()?;
    Ok(out)
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scenario: String,
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub mode: Mode,
    pub nodes: u32,
    pub m1: u64,
    pub m2: u64,
    pub messages_by_kind: String,
    pub elections_by_trigger: String,
    pub runtime: f64,
}

impl SweepRow {
    pub fn from_report(axis: &str, value: &str, r: &MetricsReport) -> Self {
        SweepRow {
            scenario: r.scenario.clone(),
            axis: axis.to_string(),
            value: value.to_string(),
            seed: r.seed,
            mode: r.mode,
            nodes: r.node_count,
            m1: r.m1_requests,
            m2: r.m2_failed,
            messages_by_kind: r.counters.by_kind_string(),
            elections_by_trigger: r.elections_string(),
            runtime: r.runtime,
        }
    }
}

/// Runs both modes for every value and seed. Rows are ordered by
/// (value, seed, mode) whatever the execution order.
pub fn sweep(
    template: &ScenarioConfig,
    axis: SweepAxis,
    values: &[String],
    seeds: &[u64],
) -> Result<Vec<SweepRow>, ConfigError> {
    let mut cells = Vec::new();
    for value in values {
        let base = apply_axis(template, axis, value)?;
        for &seed in seeds {
            for mode in [Mode::ClientServer, Mode::Sois] {
                let mut cfg = base.clone();
                cfg.seed = seed;
                cfg.mode = mode;
                cells.push((value.clone(), cfg));
            }
        }
    }
    let results = par::map(&cells, |(value, cfg)| {
        run(cfg, None, false).map(|r| SweepRow::from_report(&axis.to_string(), value, &r))
    });
    results.into_iter().collect()
}

/// CSV text with a header row.
pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record([
            "scenario",
            "axis",
            "value",
            "seed",
            "mode",
            "nodes",
            "m1",
            "m2",
            "messages_by_kind",
            "elections_by_trigger",
            "runtime",
        ])
        .expect("in-memory write");
    }
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

/// Group-level criteria of the bus-ride specification.
pub fn ride_criteria() -> Vec<Criterion> {
    parse_spec(BUS_RIDE_XML).expect("bundled spec parses").criteria
}
