//! Node context and the restrictive/comparative evaluation of criteria.

use std::collections::BTreeMap;

use regex::RegexBuilder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spec::{effective_criteria, Condition, Criterion, GroupSpec};
use crate::NodeId;

/// Terms whose scalar values are percentages.
pub const PERCENT_TERMS: &[&str] = &["BATTERY_LEVEL", "WIFI_SIGNAL", "GPS_SIGNAL"];

/// A node's measurable facts at one instant of simulated time.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeContext {
    pub node_id: NodeId,
    #[serde(default)]
    pub now: f64,
    #[serde(default)]
    pub booleans: BTreeMap<String, bool>,
    #[serde(default)]
    pub scalars: BTreeMap<String, f64>,
    #[serde(default)]
    pub strings: BTreeMap<String, String>,
    /// When each currently-true boolean last became true.
    #[serde(default)]
    pub boolean_since: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContextError {
    #[error("{term} = {value} is outside [0, 100]")]
    PercentOutOfRange { term: String, value: f64 },
    #[error("{term} became true at {since}, after now = {now}")]
    SinceInFuture { term: String, since: f64, now: f64 },
    #[error("invalid context file: {0}")]
    Format(String),
}

impl NodeContext {
    pub fn new(node_id: NodeId) -> Self {
        NodeContext { node_id, ..Default::default() }
    }

    pub fn with_bool(mut self, term: &str, value: bool) -> Self {
        self.booleans.insert(term.to_string(), value);
        if value {
            self.boolean_since.entry(term.to_string()).or_insert(self.now);
        }
        self
    }

    pub fn with_bool_since(mut self, term: &str, since: f64) -> Self {
        self.booleans.insert(term.to_string(), true);
        self.boolean_since.insert(term.to_string(), since);
        self
    }

    pub fn with_scalar(mut self, term: &str, value: f64) -> Self {
        self.scalars.insert(term.to_string(), value);
        self
    }

    pub fn with_string(mut self, term: &str, value: &str) -> Self {
        self.strings.insert(term.to_string(), value.to_string());
        self
    }

    pub fn at(mut self, now: f64) -> Self {
        self.now = now;
        self
    }

    pub fn validate(&self) -> Result<(), ContextError> {
        for term in PERCENT_TERMS {
            if let Some(&value) = self.scalars.get(*term) {
                if !(0.0..=100.0).contains(&value) {
                    return Err(ContextError::PercentOutOfRange { term: term.to_string(), value });
                }
            }
        }
        for (term, &on) in &self.booleans {
            if let (true, Some(&since)) = (on, self.boolean_since.get(term)) {
                if since > self.now {
                    return Err(ContextError::SinceInFuture { term: term.clone(), since, now: self.now });
                }
            }
        }
        Ok(())
    }

    /// Reads a TOML context snapshot.
    pub fn from_toml(text: &str) -> Result<Self, ContextError> {
        let ctx: NodeContext = toml::from_str(text).map_err(|e| ContextError::Format(e.to_string()))?;
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("context serializes")
    }

    /// Applies a context change observed at `now`.
    pub fn apply(&mut self, update: &ContextUpdate, now: f64) {
        self.now = now;
        for (term, &value) in &update.booleans {
            let was = self.booleans.insert(term.clone(), value).unwrap_or(false);
            if value && !was {
                self.boolean_since.insert(term.clone(), now);
            } else if !value {
                self.boolean_since.remove(term);
            }
        }
        for (term, &value) in &update.scalars {
            self.scalars.insert(term.clone(), value);
        }
        for (term, value) in &update.strings {
            self.strings.insert(term.clone(), value.clone());
        }
    }
}

/// A batch of fact changes delivered to one node.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ContextUpdate {
    #[serde(default)]
    pub booleans: BTreeMap<String, bool>,
    #[serde(default)]
    pub scalars: BTreeMap<String, f64>,
    #[serde(default)]
    pub strings: BTreeMap<String, String>,
}

impl ContextUpdate {
    pub fn boolean(term: &str, value: bool) -> Self {
        let mut u = ContextUpdate::default();
        u.booleans.insert(term.to_string(), value);
        u
    }

    pub fn scalar(term: &str, value: f64) -> Self {
        let mut u = ContextUpdate::default();
        u.scalars.insert(term.to_string(), value);
        u
    }

    pub fn is_empty(&self) -> bool {
        self.booleans.is_empty() && self.scalars.is_empty() && self.strings.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessScore {
    pub value: f64,
    pub measured_at: f64,
}

impl FitnessScore {
    pub fn new(value: f64, measured_at: f64) -> Self {
        FitnessScore { value, measured_at }
    }
}

/// How string `pattern` criteria are matched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternMatcher {
    /// Case-insensitive substring.
    #[default]
    Substring,
    Exact,
    Regex,
}

impl PatternMatcher {
    pub fn matches(self, pattern: &str, value: &str) -> bool {
        match self {
            PatternMatcher::Substring => value.to_lowercase().contains(&pattern.to_lowercase()),
            PatternMatcher::Exact => value == pattern,
            PatternMatcher::Regex => RegexBuilder::new(pattern)
                .case_insensitive(true)
                .build()
                .map(|re| re.is_match(value))
                .unwrap_or(false),
        }
    }
}

/// Criterion evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Evaluator {
    pub matcher: PatternMatcher,
    /// Normalization divisor per comparative term; unlisted terms use `default_scale`.
    pub scale: BTreeMap<String, f64>,
    pub default_scale: f64,
}

impl Default for Evaluator {
    fn default() -> Self {
        Evaluator { matcher: PatternMatcher::Substring, scale: BTreeMap::new(), default_scale: 100.0 }
    }
}

impl Evaluator {
    pub fn eval_criterion(&self, ctx: &NodeContext, c: &Criterion) -> bool {
        match &c.condition {
            Condition::Flag { value, after_seconds } => {
                let Some(&actual) = ctx.booleans.get(&c.term) else {
                    return false;
                };
                if actual != *value {
                    return false;
                }
                match after_seconds {
                    None => true,
                    // held continuously: only meaningful for a true fact with a known onset
                    Some(after) => match (actual, ctx.boolean_since.get(&c.term)) {
                        (true, Some(&since)) => ctx.now - since >= *after as f64,
                        _ => false,
                    },
                }
            }
            Condition::Minimum(min) => ctx.scalars.get(&c.term).is_some_and(|v| *v >= *min),
            Condition::Pattern(p) => ctx.strings.get(&c.term).is_some_and(|v| self.matcher.matches(p, v)),
        }
    }

    /// Conjunction over all criteria. Float criteria contribute their minimum check.
    pub fn rrc(&self, ctx: &NodeContext, effective: &[Criterion]) -> bool {
        effective.iter().all(|c| self.eval_criterion(ctx, c))
    }

    /// Product of the comparative terms normalized to [0, 1].
    pub fn fitness(&self, ctx: &NodeContext, effective: &[Criterion]) -> FitnessScore {
        let value = effective
            .iter()
            .filter(|c| c.is_comparative())
            .map(|c| {
                let raw = ctx.scalars.get(&c.term).copied().unwrap_or(0.0);
                let scale = self.scale.get(&c.term).copied().unwrap_or(self.default_scale);
                (raw / scale).clamp(0.0, 1.0)
            })
            .product();
        FitnessScore { value, measured_at: ctx.now }
    }

    pub fn role_rrc(&self, ctx: &NodeContext, spec: &GroupSpec, role: &str) -> bool {
        effective_criteria(spec, role).is_ok_and(|eff| self.rrc(ctx, &eff))
    }

    /// Roles whose restrictive criteria the node satisfies, in spec order.
    pub fn eligible_roles(&self, ctx: &NodeContext, spec: &GroupSpec) -> Vec<String> {
        spec.roles.iter().filter(|r| self.role_rrc(ctx, spec, &r.name)).map(|r| r.name.clone()).collect()
    }

    /// True iff the node satisfies at least one role's restrictive criteria.
    pub fn group_membership(&self, ctx: &NodeContext, spec: &GroupSpec) -> bool {
        spec.roles.iter().any(|r| self.role_rrc(ctx, spec, &r.name))
    }
}

pub fn eval_criterion(ctx: &NodeContext, c: &Criterion) -> bool {
    Evaluator::default().eval_criterion(ctx, c)
}

pub fn rrc(ctx: &NodeContext, effective: &[Criterion]) -> bool {
    Evaluator::default().rrc(ctx, effective)
}

pub fn fitness(ctx: &NodeContext, effective: &[Criterion]) -> FitnessScore {
    Evaluator::default().fitness(ctx, effective)
}

pub fn group_membership(ctx: &NodeContext, spec: &GroupSpec) -> bool {
    Evaluator::default().group_membership(ctx, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::parse_spec;

    fn bus() -> GroupSpec {
        parse_spec(include_str!("../data/specs/bus-monitoring.xml")).unwrap()
    }

    fn music() -> GroupSpec {
        parse_spec(include_str!("../data/specs/music-streaming.xml")).unwrap()
    }

    fn ctx() -> NodeContext {
        NodeContext::new(NodeId(1))
    }

    #[test]
    fn minimum_is_inclusive() {
        let c = Criterion::minimum("BATTERY_LEVEL", 30.0);
        assert!(eval_criterion(&ctx().with_scalar("BATTERY_LEVEL", 30.0), &c));
        assert!(!eval_criterion(&ctx().with_scalar("BATTERY_LEVEL", 29.99), &c));
    }

    #[test]
    fn temporal_criterion_needs_duration() {
        let c = Criterion::flag_after("MOOVING", true, 300);
        let moving_100s = ctx().at(1000.0).with_bool_since("MOOVING", 900.0);
        assert!(!eval_criterion(&moving_100s, &c));
        let moving_300s = ctx().at(1200.0).with_bool_since("MOOVING", 900.0);
        assert!(eval_criterion(&moving_300s, &c));
    }

    #[test]
    fn missing_facts_fail() {
        assert!(!eval_criterion(&ctx(), &Criterion::flag("GPS", true)));
        assert!(!eval_criterion(&ctx(), &Criterion::minimum("BATTERY_LEVEL", 0.0)));
        assert!(!eval_criterion(&ctx(), &Criterion::pattern("BSSID", "bus")));
    }

    #[test]
    fn false_flag_matches_false_fact() {
        let c = Criterion::flag("ROAMING", false);
        assert!(eval_criterion(&ctx().with_bool("ROAMING", false), &c));
        assert!(!eval_criterion(&ctx().with_bool("ROAMING", true), &c));
    }

    #[test]
    fn pattern_matchers() {
        let c = Criterion::pattern("BSSID", "COMPANY_NAME");
        let ctx = ctx().with_string("BSSID", "company_name-bus-042");
        assert!(eval_criterion(&ctx, &c));
        let exact = Evaluator { matcher: PatternMatcher::Exact, ..Default::default() };
        assert!(!exact.eval_criterion(&ctx, &c));
        let re = Evaluator { matcher: PatternMatcher::Regex, ..Default::default() };
        assert!(re.eval_criterion(&ctx, &Criterion::pattern("BSSID", r"^company_name-bus-\d+$")));
        assert!(!re.eval_criterion(&ctx, &Criterion::pattern("BSSID", "(")));
    }

    #[test]
    fn rrc_examples() {
        let spec = bus();
        let geo = effective_criteria(&spec, "geolocator").unwrap();
        let c = ctx().with_bool("GPS", true).with_scalar("BATTERY_LEVEL", 25.0);
        assert!(!rrc(&c, &geo));
        let agg = effective_criteria(&spec, "aggregator").unwrap();
        let c = ctx().with_bool("INTERNET", true).with_scalar("BATTERY_LEVEL", 16.0);
        assert!(rrc(&c, &agg));
        assert!(rrc(&ctx(), &[]));
    }

    #[test]
    fn fitness_examples() {
        let spec = music();
        let streamer = effective_criteria(&spec, "streamer").unwrap();
        let c = ctx()
            .at(7.0)
            .with_scalar("BATTERY_LEVEL", 80.0)
            .with_bool("INTERNET", true)
            .with_bool("BLUETOOTH", true);
        let fs = fitness(&c, &streamer);
        assert!((fs.value - 0.80).abs() < 1e-12);
        assert_eq!(fs.measured_at, 7.0);

        let geo = effective_criteria(&bus(), "geolocator").unwrap();
        let c = ctx().with_scalar("BATTERY_LEVEL", 50.0).with_bool("GPS", true);
        assert!((fitness(&c, &geo).value - 0.50).abs() < 1e-12);

        assert_eq!(fitness(&ctx(), &[Criterion::flag("GPS", true)]).value, 1.0);
    }

    #[test]
    fn fitness_uses_configured_scale() {
        let eval = Evaluator { scale: BTreeMap::from([("RAM_MB".to_string(), 4096.0)]), ..Default::default() };
        let c = ctx().with_scalar("RAM_MB", 1024.0);
        assert_eq!(eval.fitness(&c, &[Criterion::minimum("RAM_MB", 512.0)]).value, 0.25);
    }

    #[test]
    fn group_membership_examples() {
        let spec = bus();
        let accel_only = ctx().with_bool("ACCELEROMETER", true).with_scalar("BATTERY_LEVEL", 20.0);
        assert!(group_membership(&accel_only, &spec));
        let low = ctx()
            .with_scalar("BATTERY_LEVEL", 10.0)
            .with_bool("ACCELEROMETER", true)
            .with_bool("GPS", true)
            .with_bool("INTERNET", true);
        assert!(!group_membership(&low, &spec));
        let empty = GroupSpec { name: "g".into(), criteria: vec![], roles: vec![] };
        assert!(!group_membership(&accel_only, &empty));
    }

    #[test]
    fn apply_tracks_boolean_onset() {
        let mut c = ctx();
        c.apply(&ContextUpdate::boolean("MOOVING", true), 200.0);
        c.apply(&ContextUpdate::boolean("MOOVING", true), 250.0);
        assert_eq!(c.boolean_since["MOOVING"], 200.0);
        c.apply(&ContextUpdate::boolean("MOOVING", false), 300.0);
        assert!(!c.boolean_since.contains_key("MOOVING"));
        c.apply(&ContextUpdate::boolean("MOOVING", true), 310.0);
        assert_eq!(c.boolean_since["MOOVING"], 310.0);
    }

    #[test]
    fn toml_snapshot_roundtrip_and_validation() {
        let c = ctx().at(5.0).with_bool("GPS", true).with_scalar("BATTERY_LEVEL", 42.0).with_string("BSSID", "x");
        assert_eq!(NodeContext::from_toml(&c.to_toml()).unwrap(), c);
        let bad = ctx().with_scalar("BATTERY_LEVEL", 120.0);
        assert!(matches!(bad.validate(), Err(ContextError::PercentOutOfRange { .. })));
        let future = ctx().at(1.0).with_bool_since("GPS", 3.0);
        assert!(matches!(future.validate(), Err(ContextError::SinceInFuture { .. })));
        assert!(matches!(NodeContext::from_toml("node_id = 1\ncolour = 3"), Err(ContextError::Format(_))));
    }
}
