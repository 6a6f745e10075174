#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sois::context::{ContextUpdate, Evaluator, NodeContext};
use sois::protocol::ProtocolConfig;
use sois::simnet::{EventPayload, NetConfig, NetMode, SimTime};
use sois::spec::{Cardinality, Criterion, GroupSpec, RoleSpec};
use sois::world::{Phasing, World};
use sois::NodeId;

/// One role `r` with `k` positions; fitness is `SCORE / 100`.
pub fn scored_spec(k: u32) -> GroupSpec {
    GroupSpec {
        name: "g".into(),
        criteria: vec![],
        roles: vec![RoleSpec {
            name: "r".into(),
            cardinality: Cardinality::Fixed(k),
            criteria: vec![Criterion::minimum("SCORE", 0.0)],
        }],
    }
}

/// Role `m` (flag `M`) keeps everyone a member; role `r` needs flag `E`
/// and ranks by `SCORE`.
pub fn two_role_spec() -> GroupSpec {
    GroupSpec {
        name: "g".into(),
        criteria: vec![],
        roles: vec![
            RoleSpec { name: "m".into(), cardinality: Cardinality::Fixed(1), criteria: vec![Criterion::flag("M", true)] },
            RoleSpec {
                name: "r".into(),
                cardinality: Cardinality::Fixed(1),
                criteria: vec![Criterion::flag("E", true), Criterion::minimum("SCORE", 0.0)],
            },
        ],
    }
}

pub fn scored(id: u32, score: f64) -> NodeContext {
    NodeContext::new(NodeId(id)).with_scalar("SCORE", score)
}

pub fn world(seed: u64, mode: NetMode, spec: &GroupSpec, contexts: Vec<NodeContext>, delta: f64) -> World {
    let mut proto = ProtocolConfig::default();
    proto.election.delta = delta;
    World::new(seed, NetConfig { mode, ..Default::default() }, proto, Evaluator::default(), spec, contexts, Phasing::Spread)
}

pub fn t(s: f64) -> SimTime {
    SimTime::from_secs(s)
}

/// Distinct scores drawn from a 1%-spaced grid in [5, 100].
pub fn distinct_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut grid: Vec<u32> = (5..=100).collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let i = rng.random_range(0..grid.len());
        out.push(grid.swap_remove(i) as f64);
    }
    out
}

/// Churn schedule: crashes, restarts, and eligibility toggles.
#[derive(Debug, Clone)]
pub enum Churn {
    Crash(u32),
    Revive(u32),
    Leave(u32),
    Return(u32),
    Score(u32, f64),
}

pub fn random_churn(rng: &mut ChaCha8Rng, n: u32, events: usize, from: f64, to: f64) -> Vec<(f64, Churn)> {
    let mut out: Vec<(f64, Churn)> = (0..events)
        .map(|_| {
            let at = (rng.random_range(from..to) * 1000.0).round() / 1000.0;
            let node = rng.random_range(0..n);
            let ev = match rng.random_range(0..5) {
                0 => Churn::Crash(node),
                1 => Churn::Revive(node),
                2 => Churn::Leave(node),
                3 => Churn::Return(node),
                _ => Churn::Score(node, rng.random_range(5..=100) as f64),
            };
            (at, ev)
        })
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Schedules churn on a world built from [`scored_spec`]: leaving drops
/// the `SCORE` fact, returning restores it.
pub fn schedule_churn(w: &mut World, churn: &[(f64, Churn)], scores: &BTreeMap<u32, f64>) {
    for (at, ev) in churn {
        let payload = match ev {
            Churn::Crash(n) => EventPayload::NodeCrash(NodeId(*n)),
            Churn::Revive(n) => EventPayload::NodeJoin(NodeId(*n)),
            Churn::Leave(n) => EventPayload::ContextChange { node: NodeId(*n), update: ContextUpdate::scalar("SCORE", -1.0) },
            Churn::Return(n) => {
                EventPayload::ContextChange { node: NodeId(*n), update: ContextUpdate::scalar("SCORE", scores[n]) }
            }
            Churn::Score(n, s) => EventPayload::ContextChange { node: NodeId(*n), update: ContextUpdate::scalar("SCORE", *s) },
        };
        w.schedule_event(t(*at), payload);
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
