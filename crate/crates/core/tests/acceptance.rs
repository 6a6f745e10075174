//! End-to-end acceptance suite. Runs every criterion, prints one line each,
//! and exits non-zero when any of them fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::{Duration, Instant};

use common::*;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::Rng;
use sois::adapt::CardinalityController;
use sois::context::{ContextUpdate, Evaluator, NodeContext};
use sois::election::{
    close_election, fitness_drift_tick, maybe_challenge, ElectionConfig, ElectionState, ElectionTrigger, TriggerKind,
};
use sois::membership::{GroupRegistry, MemberRecord, Position, PositionKey};
use sois::par;
use sois::review::{assign_reviewers, ReviewStats};
use sois::scenarios::{
    bus_monitoring, bus_ride_spec, rows_to_csv, run, run_bus_ride_detection, run_review_scenario,
    scenario_world, sweep, InternetType, ReviewScenario, Rider, RideConfig, ScenarioConfig, SweepAxis, SweepRow,
    AdaptConfig, BUS_MONITORING_XML, BUS_RIDE_XML, MUSIC_STREAMING_XML,
};
use sois::simnet::{EventPayload, MessageKind, NetMode, SimTime};
use sois::spec::{effective_criteria, Condition};
use sois::world::{Mode, AGGREGATOR};
use sois::{parse_spec, Cardinality, Criterion, FitnessScore, GroupSpec, NodeId, RoleSpec};

type Outcome = Result<String, String>;

fn parse_spec_checked(xml: &str) -> Result<GroupSpec, String> {
    parse_spec(xml).map_err(|e| e.to_string())
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() {
    let criteria: Vec<(&str, u64, fn() -> Outcome)> = vec![
        ("spec fidelity", 1, c1_spec_fidelity),
        ("message counts", 5, c2_message_counts),
        ("election correctness", 60, c3_election_correctness),
        ("delta band", 30, c4_delta_band),
        ("membership convergence", 60, c5_membership_convergence),
        ("M1 dominance", 60, c6_m1_dominance),
        ("M2 robustness", 30, c7_m2_robustness),
        ("bus-ride detection", 5, c8_bus_ride),
        ("reviewer fairness", 60, c9_reviews),
        ("determinism", 10, c10_determinism),
        ("cardinality adaptation", 30, c11_adaptation),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut out = std::io::stdout();
    for (i, (name, limit, f)) in criteria.into_iter().enumerate() {
        let id = i + 1;
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str()) || *p == id.to_string()) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > Duration::from_secs(limit) => {
                Err(format!("{detail}; took {:.2}s, limit {limit}s", elapsed.as_secs_f64()))
            }
            other => other,
        };
        let line = match &result {
            Ok(detail) => format!("criterion {id:>2} {name}: PASS ({detail}; {:.2}s)", elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                format!("criterion {id:>2} {name}: FAIL ({why})")
            }
        };
        writeln!(out, "{line}").unwrap();
    }
    if failed > 0 {
        writeln!(out, "{failed} criteria failed").unwrap();
        std::process::exit(1);
    }
}

// 1 ------------------------------------------------------------------

fn c1_spec_fidelity() -> Outcome {
    let bus = parse_spec_checked(BUS_MONITORING_XML)?;
    let expected = GroupSpec {
        name: "bus-monitoring".into(),
        criteria: vec![Criterion::minimum("BATTERY_LEVEL", 15.0)],
        roles: vec![
            RoleSpec {
                name: "geolocator".into(),
                cardinality: Cardinality::Parameter { name: "k1".into(), current: None },
                criteria: vec![Criterion::flag("GPS", true), Criterion::minimum("BATTERY_LEVEL", 30.0)],
            },
            RoleSpec {
                name: "accelerometer".into(),
                cardinality: Cardinality::Parameter { name: "k2".into(), current: None },
                criteria: vec![Criterion::flag("ACCELEROMETER", true)],
            },
            RoleSpec {
                name: "aggregator".into(),
                cardinality: Cardinality::Fixed(1),
                criteria: vec![Criterion::flag("INTERNET", true)],
            },
        ],
    };
    check(bus == expected, || format!("bus-monitoring parsed as {bus:?}"))?;
    let geo = effective_criteria(&bus, "geolocator").map_err(|e| e.to_string())?;
    let battery: Vec<_> = geo.iter().filter(|c| c.term == "BATTERY_LEVEL").collect();
    check(battery.len() == 1 && battery[0].condition == Condition::Minimum(30.0), || {
        format!("geolocator battery criteria {battery:?}")
    })?;

    let ride = parse_spec_checked(BUS_RIDE_XML)?;
    let expected = GroupSpec {
        name: "bus-monitoring".into(),
        criteria: vec![
            Criterion::pattern("BSSID", "COMPANY_NAME"),
            Criterion::minimum("WIFI_SIGNAL", 50.0),
            Criterion::flag_after("MOOVING", true, 300),
        ],
        roles: vec![],
    };
    check(ride == expected, || format!("bus-ride parsed as {ride:?}"))?;

    let music = parse_spec_checked(MUSIC_STREAMING_XML)?;
    let expected = GroupSpec {
        name: "music-streaming".into(),
        criteria: vec![],
        roles: vec![RoleSpec {
            name: "streamer".into(),
            cardinality: Cardinality::Fixed(1),
            criteria: vec![
                Criterion::flag("INTERNET", true),
                Criterion::flag("BLUETOOTH", true),
                Criterion::minimum("BATTERY_LEVEL", 20.0),
            ],
        }],
    };
    check(music == expected, || format!("music-streaming parsed as {music:?}"))?;
    Ok("3 bundled specifications match".into())
}

// 2 ------------------------------------------------------------------

fn kinds(d: &sois::MessageCounters) -> BTreeMap<MessageKind, u64> {
    MessageKind::ALL.iter().map(|k| (*k, d.transmitted(*k))).filter(|(_, v)| *v > 0).collect()
}

fn settle(w: &mut sois::world::World) -> Result<(), String> {
    let limit = w.now() + t(120.0);
    check(w.run_to_quiescence(3.0, limit), || format!("no quiescence by {:.1}s", limit.as_secs()))
}

fn fan(n: u32, mode: NetMode) -> u64 {
    match mode {
        NetMode::Unicast => (n - 1) as u64,
        NetMode::Broadcast => 1,
    }
}

fn join_leave_counts(n: u32, mode: NetMode) -> Result<(), String> {
    let newcomer = n - 1;
    let ctxs = (0..n)
        .map(|i| if i == newcomer { NodeContext::new(NodeId(i)) } else { scored(i, 50.0 + i as f64) })
        .collect();
    let mut w = world(7, mode, &scored_spec(1), ctxs, 1.2);
    settle(&mut w)?;
    let before = w.counters().clone();
    let at = w.now() + t(0.3);
    w.schedule_event(at, EventPayload::ContextChange { node: NodeId(newcomer), update: ContextUpdate::scalar("SCORE", 10.0) });
    settle(&mut w)?;
    let d = kinds(&w.counters().since(&before));
    let want = BTreeMap::from([(MessageKind::JoinAdvert, fan(n, mode)), (MessageKind::RegistryCopy, 1)]);
    check(d == want, || format!("join n={n} {mode:?}: {d:?}, want {want:?}"))?;

    let before = w.counters().clone();
    let at = w.now() + t(0.3);
    w.schedule_event(at, EventPayload::ContextChange { node: NodeId(newcomer), update: ContextUpdate::scalar("SCORE", -1.0) });
    settle(&mut w)?;
    let d = kinds(&w.counters().since(&before));
    let want = BTreeMap::from([(MessageKind::LeaveAdvert, fan(n, mode))]);
    check(d == want, || format!("leave n={n} {mode:?}: {d:?}, want {want:?}"))
}

fn vacancy_counts(n: u32, e: u32, mode: NetMode) -> Result<(), String> {
    let ctxs = (0..n)
        .map(|i| {
            let c = NodeContext::new(NodeId(i)).with_bool("M", true);
            if i < e {
                c.with_bool("E", true).with_scalar("SCORE", 20.0 + 7.0 * i as f64)
            } else {
                c
            }
        })
        .collect();
    let mut w = world(11, mode, &two_role_spec(), ctxs, 1.2);
    settle(&mut w)?;
    let key = PositionKey::new("r", 0);
    for a in w.agents.values_mut() {
        a.membership.registry.vacate(&key);
    }
    let before = w.counters().clone();
    let trigger = ElectionTrigger::new("g", key, TriggerKind::Vacancy, w.now());
    w.inject_trigger(NodeId(0), trigger);
    settle(&mut w)?;
    let d = kinds(&w.counters().since(&before));
    let bids = match mode {
        NetMode::Unicast => (e * (e - 1)) as u64,
        NetMode::Broadcast => e as u64,
    };
    let want = BTreeMap::from([(MessageKind::Bid, bids), (MessageKind::ElectionResult, fan(n, mode))]);
    let want: BTreeMap<_, _> = want.into_iter().filter(|(_, v)| *v > 0).collect();
    check(d == want, || format!("vacancy n={n} e={e} {mode:?}: {d:?}, want {want:?}"))?;
    check(w.registries_agree(), || format!("vacancy n={n} e={e}: registries diverge"))
}

fn challenge_counts(n: u32, mode: NetMode) -> Result<(), String> {
    let ctxs = (0..n).map(|i| scored(i, 10.0 + i as f64)).collect();
    let mut w = world(13, mode, &scored_spec(1), ctxs, 1.2);
    settle(&mut w)?;
    let before = w.counters().clone();
    let at = w.now() + t(0.3);
    w.schedule_event(at, EventPayload::ContextChange { node: NodeId(0), update: ContextUpdate::scalar("SCORE", 100.0) });
    settle(&mut w)?;
    let d = kinds(&w.counters().since(&before));
    let want = BTreeMap::from([
        (MessageKind::ChallengeRequest, 1),
        (MessageKind::ChallengeResponse, 1),
        (MessageKind::ElectionResult, fan(n, mode)),
    ]);
    check(d == want, || format!("challenge n={n} {mode:?}: {d:?}, want {want:?}"))?;
    let holder = w.agents[&NodeId(1)].registry().position(&PositionKey::new("r", 0)).and_then(|p| p.holder);
    check(holder.map(|h| h.node) == Some(NodeId(0)), || format!("challenge n={n}: holder {holder:?}"))
}

fn c2_message_counts() -> Outcome {
    let mut cases = 0;
    for mode in [NetMode::Unicast, NetMode::Broadcast] {
        for n in 2..=10u32 {
            join_leave_counts(n, mode)?;
            for e in 1..=n {
                vacancy_counts(n, e, mode)?;
            }
            challenge_counts(n, mode)?;
            cases += 2 + n;
        }
    }
    Ok(format!("{cases} exact count checks"))
}

// 3 ------------------------------------------------------------------

fn churn_instance(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let n = r.random_range(2..=10u32);
    let k = r.random_range(1..=3u32.min(n));
    let scores = distinct_scores(&mut r, n as usize);
    let map: BTreeMap<u32, f64> = scores.iter().enumerate().map(|(i, s)| (i as u32, *s)).collect();
    let ctxs = (0..n).map(|i| scored(i, map[&i])).collect();
    let mode = if seed.is_multiple_of(2) { NetMode::Unicast } else { NetMode::Broadcast };
    let mut w = world(seed, mode, &scored_spec(k), ctxs, 1.2);
    let churn = random_churn(&mut r, n, 10, 5.0, 40.0);
    schedule_churn(&mut w, &churn, &map);
    w.run_until(t(45.0));
    settle(&mut w).map_err(|e| format!("seed {seed}: {e}"))?;
    check(w.registries_agree(), || format!("seed {seed}: surviving registries diverge"))
}

fn top_k(scores: &BTreeMap<u32, f64>, k: usize) -> BTreeSet<NodeId> {
    let mut v: Vec<(u32, f64)> = scores.iter().map(|(i, s)| (*i, *s)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().take(k).map(|(i, _)| NodeId(i)).collect()
}

fn assigned(w: &sois::world::World, role: &str) -> (BTreeSet<NodeId>, Vec<f64>) {
    let id = w.alive_members()[0];
    let ps = w.agents[&id].registry().positions(role);
    let holders: BTreeSet<NodeId> = ps.iter().filter_map(|p| p.holder.map(|h| h.node)).collect();
    let fs: Vec<f64> = ps.iter().filter_map(|p| p.holder.map(|h| h.fs_e.value)).collect();
    (holders, fs)
}

fn static_instance(seed: u64) -> Result<(), String> {
    let mut r = rng(seed ^ 0xa5a5);
    let n = r.random_range(2..=10u32);
    let k = r.random_range(1..=3u32.min(n));
    let scores = distinct_scores(&mut r, n as usize);
    let map: BTreeMap<u32, f64> = scores.iter().enumerate().map(|(i, s)| (i as u32, *s)).collect();
    let ctxs = (0..n).map(|i| scored(i, map[&i])).collect();
    let mode = if seed.is_multiple_of(2) { NetMode::Unicast } else { NetMode::Broadcast };
    let mut w = world(seed, mode, &scored_spec(k), ctxs, 1.001);
    settle(&mut w)?;
    check(w.registries_agree(), || format!("static seed {seed}: registries diverge"))?;
    let (holders, fs) = assigned(&w, "r");
    let want = top_k(&map, k as usize);
    check(holders == want, || format!("static seed {seed}: assigned {holders:?}, top-{k} {want:?}"))?;
    // recorded fitness is the holder's own score
    let mut want_fs: Vec<f64> = want.iter().map(|id| map[&id.0] / 100.0).collect();
    let mut got = fs;
    want_fs.sort_by(f64::total_cmp);
    got.sort_by(f64::total_cmp);
    check(got.iter().zip(&want_fs).all(|(a, b)| (a - b).abs() < 1e-12), || format!("static seed {seed}: fs_e {got:?}"))
}

fn tie_instance(seed: u64) -> Result<(), String> {
    let mut r = rng(seed ^ 0x7e7e);
    let n = r.random_range(2..=10u32);
    let k = r.random_range(1..=3u32.min(n));
    let ctxs = (0..n).map(|i| scored(i, 60.0)).collect();
    let mut w = world(seed, NetMode::Unicast, &scored_spec(k), ctxs, 1.001);
    settle(&mut w)?;
    let (holders, _) = assigned(&w, "r");
    let want: BTreeSet<NodeId> = (0..k).map(NodeId).collect();
    check(holders == want, || format!("tie seed {seed}: assigned {holders:?}, want {want:?}"))
}

fn c3_election_correctness() -> Outcome {
    let seeds: Vec<u64> = (0..600).collect();
    let churn: Vec<_> = par::map(&seeds, |s| churn_instance(*s));
    let fixed: Vec<_> = par::map(&seeds[..500], |s| static_instance(*s));
    let ties: Vec<_> = par::map(&seeds[..100], |s| tie_instance(*s));
    let bad: Vec<&String> = churn.iter().chain(&fixed).chain(&ties).filter_map(|r| r.as_ref().err()).collect();
    check(bad.is_empty(), || format!("{} failures, first: {:?}", bad.len(), &bad[..bad.len().min(4)]))?;
    // direct tie-break on equal bids
    let trigger = ElectionTrigger::new("g", PositionKey::new("r", 0), TriggerKind::Vacancy, SimTime::ZERO);
    let mut st = ElectionState::new(trigger, SimTime::ZERO);
    for id in [5, 2, 9] {
        st.bids.insert(NodeId(id), FitnessScore::new(0.5, 0.0));
    }
    let (winner, _) = close_election(&mut st).map_err(|e| e.to_string())?;
    check(winner == NodeId(2), || format!("equal bids went to {winner}"))?;
    Ok(format!("{} churn, {} top-k, {} tie instances", churn.len(), fixed.len(), ties.len()))
}

// 4 ------------------------------------------------------------------

fn band_registry(spec: &GroupSpec, fs_e: f64) -> GroupRegistry {
    let mut reg = GroupRegistry::new(spec);
    for id in [1, 2] {
        reg.members.insert(
            NodeId(id),
            MemberRecord { joined_at: SimTime::ZERO, last_seen: SimTime::ZERO, eligible: BTreeSet::from(["r".into()]) },
        );
    }
    let held = Position::held(NodeId(1), FitnessScore::new(fs_e, 0.0), SimTime::from_secs(1.0));
    reg.apply_position(&PositionKey::new("r", 0), held);
    reg
}

fn delta_sweep_challenges(delta: f64, seeds: &[u64]) -> u64 {
    let counts = par::map(seeds, |&seed| {
        let mut r = rng(seed);
        let n = 6;
        let scores = distinct_scores(&mut r, n as usize);
        let ctxs = (0..n).map(|i| scored(i, scores[i as usize])).collect();
        let mut w = world(seed, NetMode::Unicast, &scored_spec(2), ctxs, delta);
        for _ in 0..30 {
            let at = r.random_range(5.0..60.0);
            let node = NodeId(r.random_range(0..n));
            let s = r.random_range(5..=100) as f64;
            w.schedule_event(t(at), EventPayload::ContextChange { node, update: ContextUpdate::scalar("SCORE", s) });
        }
        w.run_until(t(70.0));
        w.counters().transmitted(MessageKind::ChallengeRequest)
    });
    counts.iter().sum()
}

fn c4_delta_band() -> Outcome {
    let spec = scored_spec(1);
    let eval = Evaluator::default();
    let eff = effective_criteria(&spec, "r").map_err(|e| e.to_string())?;
    let mut runner = TestRunner::new(PropConfig { cases: 2000, ..PropConfig::default() });
    runner
        .run(&(1.0001f64..2.0, 0.05f64..1.0, 0u32..=10_000), |(delta, fs_e, score)| {
            let cfg = ElectionConfig { delta, ..ElectionConfig::default() };
            let ctx = NodeContext::new(NodeId(2)).with_scalar("SCORE", score as f64 / 100.0);
            let fs_a = eval.fitness(&ctx, &eff).value;
            let reg = band_registry(&spec, fs_e);
            let challenged = maybe_challenge(NodeId(2), "r", &reg, &spec, &ctx, &eval, &cfg).is_some();
            prop_assert_eq!(challenged, fs_a >= delta * fs_e);

            let mut reg = band_registry(&spec, fs_e);
            let holder_ctx = NodeContext::new(NodeId(1)).with_scalar("SCORE", score as f64 / 100.0);
            let key = PositionKey::new("r", 0);
            let drift =
                fitness_drift_tick(NodeId(1), &key, &mut reg, &spec, &holder_ctx, &eval, &cfg, SimTime::from_secs(2.0));
            let inside = fs_a > (2.0 - delta) * fs_e && fs_a < delta * fs_e;
            prop_assert_eq!(drift.is_some(), !inside && fs_a != fs_e);
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    // boundary: exactly delta * fs_e fires, the next float below does not
    let mut runner = TestRunner::new(PropConfig { cases: 2000, ..PropConfig::default() });
    runner
        .run(&(1.0001f64..2.0, 0.05f64..1.0), |(delta, fs_e)| {
            let cfg = ElectionConfig { delta, ..ElectionConfig::default() };
            let edge = delta * fs_e;
            prop_assert!(cfg.challenge_fires(edge, fs_e));
            prop_assert!(!cfg.challenge_fires(edge.next_down(), fs_e));
            prop_assert!(cfg.drift_fires(edge, fs_e));
            let low = (2.0 - delta) * fs_e;
            prop_assert!(cfg.drift_fires(low, fs_e));
            prop_assert!(!cfg.drift_fires(low.next_up(), fs_e) || low.next_up() >= edge);
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    let seeds: Vec<u64> = (0..24).collect();
    let counts: Vec<u64> = [1.05, 1.2, 1.5].iter().map(|d| delta_sweep_challenges(*d, &seeds)).collect();
    check(counts.windows(2).all(|w| w[0] >= w[1]), || format!("challenge counts {counts:?} not decreasing"))?;
    Ok(format!("4000 property cases; challenges by delta 1.05/1.2/1.5 = {counts:?}"))
}

// 5 ------------------------------------------------------------------

fn convergence_trial(seed: u64) -> Result<(), String> {
    let mut r = rng(seed ^ 0x5eed);
    let n = r.random_range(2..=20u32);
    let k = r.random_range(1..=3u32.min(n));
    let scores = distinct_scores(&mut r, n as usize);
    let map: BTreeMap<u32, f64> = scores.iter().enumerate().map(|(i, s)| (i as u32, *s)).collect();
    // a third of the nodes start outside the group and join later
    let ctxs = (0..n)
        .map(|i| if r.random_bool(1.0 / 3.0) { scored(i, -1.0) } else { scored(i, map[&i]) })
        .collect();
    let mode = if seed.is_multiple_of(2) { NetMode::Unicast } else { NetMode::Broadcast };
    let spec = scored_spec(k);
    let mut w = world(seed, mode, &spec, ctxs, 1.2);
    let mut churn = random_churn(&mut r, n, 12, 3.0, 40.0);
    churn.retain(|(_, c)| !matches!(c, Churn::Score(..)));
    schedule_churn(&mut w, &churn, &map);
    w.run_until(t(45.0));
    settle(&mut w).map_err(|e| format!("trial {seed}: {e}"))?;
    check(w.membership_consistent(), || format!("trial {seed}: member sets differ"))?;
    check(w.registries_agree(), || format!("trial {seed}: registries differ"))?;
    for (id, a) in &w.agents {
        if !w.sim.is_alive(*id) {
            continue;
        }
        let gm = w.eval.group_membership(&a.ctx, &spec);
        check(a.is_member() == gm, || format!("trial {seed}: {id} member={} gm={gm}", a.is_member()))?;
    }
    Ok(())
}

fn c5_membership_convergence() -> Outcome {
    let seeds: Vec<u64> = (0..500).collect();
    let results = par::map(&seeds, |s| convergence_trial(*s));
    let bad: Vec<&String> = results.iter().filter_map(|r| r.as_ref().err()).collect();
    check(bad.is_empty(), || format!("{} failures, first: {:?}", bad.len(), &bad[..bad.len().min(4)]))?;
    Ok(format!("{} trials, n up to 20", seeds.len()))
}

// 6 ------------------------------------------------------------------

fn c6_m1_dominance() -> Outcome {
    let cells: Vec<(u32, u64)> = (2..=10).flat_map(|n| (0..10).map(move |s| (n, s))).collect();
    let results = par::map(&cells, |&(n, seed)| -> Result<(), String> {
        let cfg = ScenarioConfig { node_count: n, seed, ..ScenarioConfig::default() };
        let windows = cfg.windows();
        check(windows == 10, || format!("{windows} windows"))?;
        let cs = run(&ScenarioConfig { mode: Mode::ClientServer, ..cfg.clone() }, None, false).map_err(|e| e.to_string())?;
        let active: u64 = (0..n as usize)
            .map(|i| {
                let gps = cfg.gps_signal.get(i).copied().unwrap_or(80.0) >= cfg.gps_threshold;
                let acc = cfg.accelerometer.get(i).copied().unwrap_or(true);
                gps as u64 + acc as u64
            })
            .sum();
        check(cs.m1_requests == active * windows, || {
            format!("n={n} seed={seed}: client-server M1 {} != {}", cs.m1_requests, active * windows)
        })?;
        let sois = run(&cfg, None, false).map_err(|e| e.to_string())?;
        // no churn: an aggregator is up at every window end
        check(sois.m1_requests == windows && sois.aggregator_windows == windows, || {
            format!("n={n} seed={seed}: SOIS M1 {} aggregator windows {}", sois.m1_requests, sois.aggregator_windows)
        })?;
        check(sois.m1_requests < cs.m1_requests, || format!("n={n} seed={seed}: SOIS M1 not below client-server"))
    });
    for r in results {
        r?;
    }

    // an aggregator outage: windows ending with no aggregator alive upload nothing
    let cfg = ScenarioConfig {
        node_count: 3,
        internet_type: vec![InternetType::Cellular, InternetType::None, InternetType::None],
        events: vec![
            sois::scenarios::ScenarioEvent::Crash { at: 25.0, node: 0 },
            sois::scenarios::ScenarioEvent::Revive { at: 55.0, node: 0 },
        ],
        ..ScenarioConfig::default()
    };
    let sois = run(&cfg, None, false).map_err(|e| e.to_string())?;
    // windows ending at 30, 40, 50 have no aggregator; at 60 it is re-elected
    check(sois.aggregator_windows == 7 && sois.m1_requests == 7, || {
        format!("outage: aggregator windows {} M1 {}", sois.aggregator_windows, sois.m1_requests)
    })?;
    Ok(format!("{} cells exact; outage run uptime 7/10", cells.len()))
}

// 7 ------------------------------------------------------------------

fn m2_config(seed: u64) -> ScenarioConfig {
    let n = 5;
    let mut cfg = ScenarioConfig { node_count: n, seed, ..ScenarioConfig::default() };
    cfg.internet_type = (0..n).map(|i| if i == 0 { InternetType::WiFi } else { InternetType::Cellular }).collect();
    cfg.battery_levels = (0..n).map(|i| 90.0 - 10.0 * i as f64).collect();
    cfg.net.wifi_reachability = 0.99;
    cfg.net.cellular_reachability = 0.5;
    cfg
}

fn c7_m2_robustness() -> Outcome {
    let mut totals = (0u64, 0u64, 0u64, 0u64);
    for seed in 0..10 {
        let cfg = m2_config(seed);
        check((0..5).all(|i| cfg.reachability_of(i) == if i == 0 { 0.99 } else { 0.5 }), || "reachability".into())?;
        let spec = bus_monitoring(&cfg).map_err(|e| e.to_string())?;
        let w = scenario_world(&cfg, &spec, Mode::Sois, false);
        let mut w = w;
        w.run_until(SimTime::from_secs(cfg.duration));
        let members = w.alive_members();
        let holder = w.agents[&members[0]].registry().positions(AGGREGATOR)[0].holder.map(|h| h.node);
        check(holder == Some(NodeId(0)), || format!("seed {seed}: aggregator {holder:?}"))?;
        check(w.registries_agree(), || format!("seed {seed}: registries diverge"))?;

        let sois = run(&cfg, None, false).map_err(|e| e.to_string())?;
        let cs = run(&ScenarioConfig { mode: Mode::ClientServer, ..cfg.clone() }, None, false).map_err(|e| e.to_string())?;
        check(sois.m2_rate() <= cs.m2_rate(), || {
            format!("seed {seed}: SOIS M2 {}/{} above client-server {}/{}", sois.m2_failed, sois.m1_requests, cs.m2_failed, cs.m1_requests)
        })?;
        let again = run(&cfg, None, false).map_err(|e| e.to_string())?;
        let cs_again = run(&ScenarioConfig { mode: Mode::ClientServer, ..cfg.clone() }, None, false).map_err(|e| e.to_string())?;
        check(
            (again.m1_requests, again.m2_failed, cs_again.m1_requests, cs_again.m2_failed)
                == (sois.m1_requests, sois.m2_failed, cs.m1_requests, cs.m2_failed),
            || format!("seed {seed}: counts not reproducible"),
        )?;
        totals.0 += sois.m2_failed;
        totals.1 += sois.m1_requests;
        totals.2 += cs.m2_failed;
        totals.3 += cs.m1_requests;
    }
    Ok(format!("10 seeds; SOIS failed {}/{}, client-server failed {}/{}", totals.0, totals.1, totals.2, totals.3))
}

// 8 ------------------------------------------------------------------

fn c8_bus_ride() -> Outcome {
    let spec = bus_ride_spec();
    let rider = |bssid: &str, wifi: f64, moving: Option<f64>| Rider {
        bssid: bssid.into(),
        wifi_signal: wifi,
        moving_from: moving,
        battery: 80.0,
    };
    let cfg = RideConfig {
        riders: vec![
            rider("COMPANY_NAME_BUS_42", 70.0, Some(200.0)),
            rider("COMPANY_NAME_BUS_42", 45.0, Some(200.0)),
            rider("HOME_ROUTER", 70.0, Some(200.0)),
            rider("COMPANY_NAME_BUS_42", 70.0, None),
            rider("COMPANY_NAME_BUS_42", 70.0, Some(137.25)),
        ],
        duration: 1000.0,
        seed: 3,
    };
    let log = run_bus_ride_detection(&cfg, &spec);
    let joins = |n: u32| -> Vec<SimTime> { log.iter().filter(|e| e.node == NodeId(n) && e.joined).map(|e| e.at).collect() };
    check(joins(0) == vec![SimTime::from_secs(500.0)], || format!("rider 0 joins at {:?}", joins(0)))?;
    check(joins(1).is_empty(), || format!("weak signal joins at {:?}", joins(1)))?;
    check(joins(2).is_empty(), || format!("foreign BSSID joins at {:?}", joins(2)))?;
    check(joins(3).is_empty(), || format!("stationary rider joins at {:?}", joins(3)))?;
    // first whole-second tick at or after 437.25
    check(joins(4) == vec![SimTime::from_secs(438.0)], || format!("rider 4 joins at {:?}", joins(4)))?;
    Ok("joins at onset + 300 s; weak signal, foreign BSSID and stationary never join".into())
}

// 9 ------------------------------------------------------------------

fn c9_reviews() -> Outcome {
    for n in 2..=10u32 {
        let members: BTreeSet<NodeId> = (0..n).map(NodeId).collect();
        let mut stats = ReviewStats::new(1.0);
        for round in 0..100 {
            let r = assign_reviewers(&members, round, 42 + n as u64).map_err(|e| e.to_string())?;
            let reviewers: BTreeSet<NodeId> = r.assignment.values().copied().collect();
            let ok = r.assignment.len() == n as usize
                && reviewers == members
                && r.assignment.iter().all(|(u, v)| u != v && members.contains(u));
            check(ok && r.is_derangement(), || format!("n={n} round {round}: {:?} is not a derangement", r.assignment))?;
            stats.record_round(&r);
        }
        check(stats.load_spread() <= 1, || format!("n={n}: load spread {}", stats.load_spread()))?;

        let sc = ReviewScenario { node_count: n, rounds: 100, cheat_rate: 0.3, accuracy: 1.0, seed: n as u64, mode: NetMode::Unicast };
        let rep = run_review_scenario(&sc).map_err(|e| e.to_string())?;
        let st = rep.review.unwrap();
        check(st.injected() > 0 && st.detected() == st.injected(), || {
            format!("n={n}: detected {} of {} at accuracy 1", st.detected(), st.injected())
        })?;
        check(st.load_spread() <= 1, || format!("n={n}: scenario load spread {}", st.load_spread()))?;
    }
    let sc = ReviewScenario { node_count: 10, rounds: 1000, cheat_rate: 1.0, accuracy: 0.9, seed: 9, mode: NetMode::Broadcast };
    let st = run_review_scenario(&sc).map_err(|e| e.to_string())?.review.unwrap();
    let frac = st.detected() as f64 / st.injected() as f64;
    check(st.injected() >= 10_000, || format!("only {} cheats injected", st.injected()))?;
    check((frac - 0.9).abs() <= 0.01, || format!("detection fraction {frac:.4}"))?;
    Ok(format!("n=2..10 derangements; accuracy 0.9 detected {}/{} = {frac:.4}", st.detected(), st.injected()))
}

// 10 -----------------------------------------------------------------

fn artefacts(dir: &std::path::Path, tag: &str) -> Result<(Vec<u8>, Vec<u8>), String> {
    let mut cfg = m2_config(5);
    cfg.events = vec![sois::scenarios::ScenarioEvent::Crash { at: 33.0, node: 0 }];
    let rep = run(&cfg, None, true).map_err(|e| e.to_string())?;
    let mut rows = vec![SweepRow::from_report("none", "-", &rep)];
    let values: Vec<String> = ["3", "6"].iter().map(|s| s.to_string()).collect();
    rows.extend(sweep(&cfg, SweepAxis::NodeCount, &values, &[1, 2]).map_err(|e| e.to_string())?);
    let csv_path = dir.join(format!("{tag}.csv"));
    let trace_path = dir.join(format!("{tag}.trace"));
    std::fs::write(&csv_path, rows_to_csv(&rows)).map_err(|e| e.to_string())?;
    std::fs::write(&trace_path, rep.trace.unwrap_or_default()).map_err(|e| e.to_string())?;
    Ok((std::fs::read(csv_path).map_err(|e| e.to_string())?, std::fs::read(trace_path).map_err(|e| e.to_string())?))
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (csv_a, trace_a) = artefacts(dir.path(), "a")?;
    let (csv_b, trace_b) = artefacts(dir.path(), "b")?;
    check(!trace_a.is_empty() && csv_a.len() > 100, || "empty artefacts".into())?;
    check(csv_a == csv_b, || "CSV files differ".into())?;
    check(trace_a == trace_b, || "trace files differ".into())?;
    Ok(format!("CSV {} bytes and trace {} bytes identical", csv_a.len(), trace_a.len()))
}

// 11 -----------------------------------------------------------------

fn adaptation_run(cfg: &ScenarioConfig) -> Result<usize, String> {
    let spec = bus_monitoring(cfg).map_err(|e| e.to_string())?;
    let a = cfg.adapt.clone().unwrap();
    let mut w = scenario_world(cfg, &spec, Mode::Sois, true);
    let mut seen = 0;
    let period = cfg.sensing_period;
    for window in 1..=cfg.windows() {
        w.run_until(SimTime::from_secs(period * window as f64 + period / 2.0 - 0.5));
        check(w.registries_agree(), || format!("window {window}: registries diverge"))?;
        let members = w.alive_members();
        let k = w.agents[&members[0]].registry().positions(&a.role).len() as u32;
        check((a.k_min..=a.k_max).contains(&k), || format!("window {window}: k={k} outside bounds"))?;
        let adaptations = w.sensing_stats().unwrap().adaptations.clone();
        for (new_k, trigger) in &adaptations[seen..] {
            let grew = trigger.kind == TriggerKind::Vacancy;
            check(grew || trigger.kind == TriggerKind::Resignation, || format!("trigger kind {}", trigger.kind))?;
            check(trigger.position.role == a.role, || format!("trigger on {}", trigger.position))?;
            if grew {
                check(trigger.position.index as u32 == new_k - 1, || format!("growth to {new_k} opened {}", trigger.position))?;
            } else {
                check((trigger.position.index as u32) <= *new_k, || format!("shrink to {new_k} retired {}", trigger.position))?;
            }
        }
        seen = adaptations.len();
    }
    let trace = w.sim.trace.render();
    let adapt_lines = trace.lines().filter(|l| l.split('\t').nth(2) == Some("adapt")).count();
    check(adapt_lines == seen, || format!("{adapt_lines} adapt events for {seen} changes"))?;
    // each growth elects exactly one holder for the opened position
    for (_, trigger) in w.sensing_stats().unwrap().adaptations.iter().filter(|(_, t)| t.kind == TriggerKind::Vacancy) {
        let closes = trace
            .lines()
            .filter(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                f.len() > 6
                    && f[6].starts_with(&format!("close Vacancy {} ", trigger.position))
                    && f[6].contains(&format!("winner={} ", f[1]))
            })
            .count();
        check(closes >= 1, || format!("no election decided for {}", trigger.position))?;
    }
    Ok(seen)
}

fn c11_adaptation() -> Outcome {
    let mut runner = TestRunner::new(PropConfig { cases: 1000, ..PropConfig::default() });
    runner
        .run(&(1u32..4, 0u32..4, 1u32..12, prop::collection::vec(0u32..30, 1..60)), |(k_min, span, target, samples)| {
            let k_max = k_min + span;
            let mut c = CardinalityController::new("accelerometer", target, 10.0, k_min, k_max, k_min).unwrap();
            for s in samples {
                let before = c.current_k;
                let next = c.feedback(s);
                prop_assert!((k_min..=k_max).contains(&c.current_k));
                if let Some(k) = next {
                    prop_assert_eq!(k, c.current_k);
                    prop_assert_eq!(k.abs_diff(before), 1);
                    prop_assert_eq!(k > before, s < target);
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    let mut changes = 0;
    for (k2, target, k_min, k_max) in [(1, 6, 1, 4), (4, 2, 1, 4)] {
        for seed in 0..4 {
            let cfg = ScenarioConfig {
                node_count: 8,
                seed,
                duration: 120.0,
                k_bindings: sois::scenarios::KBindings { k1: 2, k2 },
                adapt: Some(AdaptConfig { role: "accelerometer".into(), target_samples_per_window: target, k_min, k_max }),
                ..ScenarioConfig::default()
            };
            let n = adaptation_run(&cfg)?;
            check(n > 0, || format!("k2={k2} target={target}: no adaptation happened"))?;
            changes += n;
        }
    }
    Ok(format!("1000 controller cases; {changes} changes in 8 runs, registries agree throughout"))
}
