//! Wire payloads and the per-node protocol agent.
//!
//! A [`NodeAgent`] owns one node's membership replica and its open
//! elections. The driver feeds it ticks, deliveries and election
//! deadlines; every handler returns the messages to send and the
//! deadlines to schedule.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::context::{Evaluator, FitnessScore, NodeContext};
use crate::election::{
    bid_message, bid_score, close_election, fitness_drift_tick, maybe_challenge, on_challenge, ChallengeOutcome,
    ElectionConfig, ElectionState, ElectionTrigger, TriggerKind,
};
use crate::membership::{
    grouping_tick, on_join_advert, on_leave_advert, on_registry_copy, GroupRegistry, MembershipState, Position,
    PositionKey,
};
use crate::simnet::{Body, Destination, Message, MessageKind, SimTime};
use crate::spec::{Criterion, GroupSpec};
use crate::NodeId;

pub type Msg = Message<Payload>;

/// A change to the group specification pushed by the aggregator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SpecChange {
    /// New position count for `role`; `retire` names the removed position when shrinking.
    Cardinality { role: String, k: u32, retire: Option<usize> },
    GroupMinimum { term: String, minimum: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Join { joined_at: SimTime, eligible: BTreeSet<String> },
    Leave { at: SimTime },
    RegistryCopy(Box<GroupRegistry>),
    Resign { position: PositionKey, at: SimTime },
    Bid { position: PositionKey, trigger: TriggerKind, score: FitnessScore },
    ElectionResult { position: PositionKey, assignment: Position },
    ChallengeRequest { position: PositionKey, score: FitnessScore },
    ChallengeResponse { position: PositionKey, outcome: ChallengeOutcome, assignment: Position },
    FitnessUpdate { position: PositionKey, assignment: Position },
    SpecUpdate { change: SpecChange, at: SimTime },
    SensorReport { role: String, samples: u32 },
    AggregateReport { samples: u32 },
    BackendRequest { samples: u32 },
    ReviewRequest { round: u64, valid: bool },
    ReviewVerdict { round: u64, accepted: bool },
}

impl Body for Payload {
    fn kind(&self) -> MessageKind {
        match self {
            Payload::Join { .. } => MessageKind::JoinAdvert,
            Payload::Leave { .. } => MessageKind::LeaveAdvert,
            Payload::RegistryCopy(_) => MessageKind::RegistryCopy,
            Payload::Resign { .. } => MessageKind::ResignAdvert,
            Payload::Bid { .. } => MessageKind::Bid,
            Payload::ElectionResult { .. } => MessageKind::ElectionResult,
            Payload::ChallengeRequest { .. } => MessageKind::ChallengeRequest,
            Payload::ChallengeResponse { .. } => MessageKind::ChallengeResponse,
            Payload::FitnessUpdate { .. } => MessageKind::FitnessUpdate,
            Payload::SpecUpdate { .. } => MessageKind::SpecUpdate,
            Payload::SensorReport { .. } => MessageKind::SensorReport,
            Payload::AggregateReport { .. } => MessageKind::AggregateReport,
            Payload::BackendRequest { .. } => MessageKind::BackendRequest,
            Payload::ReviewRequest { .. } => MessageKind::ReviewRequest,
            Payload::ReviewVerdict { .. } => MessageKind::ReviewVerdict,
        }
    }

    fn size_hint(&self) -> u32 {
        match self {
            Payload::RegistryCopy(r) => {
                (r.members.len() + r.assignments.values().map(Vec::len).sum::<usize>()).max(1) as u32
            }
            Payload::SensorReport { samples, .. }
            | Payload::AggregateReport { samples }
            | Payload::BackendRequest { samples } => (*samples).max(1),
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Grouping tick period in seconds.
    pub tick: f64,
    /// Ticks without contact before a member is evicted.
    pub liveness_ticks: u32,
    pub election: ElectionConfig,
    pub challenges: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig { tick: 1.0, liveness_ticks: 3, election: ElectionConfig::default(), challenges: true }
    }
}

impl ProtocolConfig {
    pub fn tick_period(&self) -> SimTime {
        SimTime::from_secs(self.tick)
    }

    pub fn liveness_timeout(&self) -> SimTime {
        SimTime::from_secs(self.tick * self.liveness_ticks as f64)
    }

    /// How long a newcomer waits for a registry copy before trusting its own replica.
    pub fn copy_wait(&self) -> SimTime {
        self.tick_period()
    }
}

/// What a handler wants the driver to do.
#[derive(Debug, Default)]
pub struct Effects {
    pub messages: Vec<Msg>,
    /// Election deadlines to schedule.
    pub deadlines: Vec<(SimTime, PositionKey)>,
    /// Audit lines for the event trace.
    pub notes: Vec<String>,
}

impl Effects {
    fn extend(&mut self, other: Effects) {
        self.messages.extend(other.messages);
        self.deadlines.extend(other.deadlines);
        self.notes.extend(other.notes);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentStats {
    /// Elections decided at this node: by the winner for vacancies and
    /// resignations, by the incumbent for challenges.
    pub elections: BTreeMap<TriggerKind, u64>,
    pub elections_opened: BTreeMap<TriggerKind, u64>,
    pub challenges_sent: u64,
}

/// One node's protocol state for one group.
#[derive(Debug, Clone)]
pub struct NodeAgent {
    pub id: NodeId,
    pub ctx: NodeContext,
    pub spec: GroupSpec,
    pub membership: MembershipState,
    pub elections: BTreeMap<PositionKey, ElectionState>,
    closed: BTreeMap<PositionKey, SimTime>,
    pending_challenge: Option<(PositionKey, SimTime)>,
    evicted: BTreeSet<NodeId>,
    spec_versions: BTreeMap<String, SimTime>,
    /// Set by a restart of a member; an ineligible first tick then announces a leave.
    restarted_member: bool,
    /// Newcomer -> (member expected to send it a copy, that member's join time, when owed).
    owed: BTreeMap<NodeId, (NodeId, SimTime, SimTime)>,
    pub stats: AgentStats,
}

impl NodeAgent {
    pub fn new(id: NodeId, spec: GroupSpec, ctx: NodeContext) -> Self {
        NodeAgent {
            id,
            membership: MembershipState::new(id, &spec),
            ctx,
            spec,
            elections: BTreeMap::new(),
            closed: BTreeMap::new(),
            pending_challenge: None,
            evicted: BTreeSet::new(),
            spec_versions: BTreeMap::new(),
            restarted_member: false,
            owed: BTreeMap::new(),
            stats: AgentStats::default(),
        }
    }

    /// Forgets all protocol state, as after a crash. Context and spec are kept.
    pub fn reset(&mut self) {
        self.restarted_member = self.membership.member;
        self.membership = MembershipState::new(self.id, &self.spec);
        self.elections.clear();
        self.closed.clear();
        self.pending_challenge = None;
        self.evicted.clear();
        self.owed.clear();
    }

    fn copier_for(&self, joiner: NodeId) -> Option<(NodeId, SimTime)> {
        let c = self.registry().oldest_excluding(Some(joiner))?;
        Some((c, self.registry().members[&c].joined_at))
    }

    /// Hands a copy to newcomers whose designated sender has since gone.
    fn settle_owed(&mut self, now: SimTime, cfg: &ProtocolConfig) -> Vec<Msg> {
        let mut out = Vec::new();
        let expiry = cfg.liveness_timeout() + cfg.copy_wait();
        let owed = std::mem::take(&mut self.owed);
        for (joiner, (copier, incarnation, at)) in owed {
            if !self.registry().is_member(joiner) {
                continue;
            }
            if self.registry().members.get(&copier).is_some_and(|r| r.joined_at == incarnation) {
                if at + expiry >= now {
                    self.owed.insert(joiner, (copier, incarnation, at));
                }
                continue;
            }
            match self.copier_for(joiner) {
                Some((c, _)) if c == self.id => {
                    let copy = Box::new(self.registry().clone());
                    out.push(self.msg(Destination::Node(joiner), Payload::RegistryCopy(copy)));
                }
                Some((c, inc)) => {
                    self.owed.insert(joiner, (c, inc, now));
                }
                None => {}
            }
        }
        out
    }

    pub fn is_member(&self) -> bool {
        self.membership.member
    }

    pub fn registry(&self) -> &GroupRegistry {
        &self.membership.registry
    }

    /// Roles this node holds according to its own replica.
    pub fn holds(&self, role: &str) -> bool {
        self.membership.member && self.registry().held_index(self.id, role).is_some()
    }

    fn peers(&self) -> Vec<NodeId> {
        self.membership.peers()
    }

    fn msg(&self, to: Destination, payload: Payload) -> Msg {
        Message::new(self.id, to, &self.spec.name, payload)
    }

    fn recently_closed(&self, key: &PositionKey, now: SimTime, cfg: &ProtocolConfig) -> bool {
        self.closed.get(key).is_some_and(|&t| now < t + cfg.election.bid_window() + cfg.election.bid_window())
    }

    /// Periodic work: neighbour discovery, eviction, the grouping check
    /// and, for synced members, resignations, fitness drift, vacancy
    /// elections and challenges.
    pub fn tick(&mut self, now: SimTime, neighbors: &[NodeId], eval: &Evaluator, cfg: &ProtocolConfig) -> Effects {
        self.ctx.now = now.as_secs();
        let mut fx = Effects::default();
        for &n in neighbors {
            self.membership.refresh_seen(n, now);
        }
        self.membership.check_sync(now);

        let before: BTreeSet<NodeId> = self.registry().members.keys().copied().collect();
        let triggers = self.membership.evict_stale(now, cfg.liveness_timeout());
        let gone: Vec<NodeId> = before.into_iter().filter(|n| !self.registry().is_member(*n)).collect();
        for gone in gone {
            self.evicted.insert(gone);
            fx.notes.push(format!("evict {gone}"));
        }
        fx.messages.extend(self.settle_owed(now, cfg));

        let was_member = self.membership.member;
        fx.messages.extend(grouping_tick(&mut self.membership, &self.spec, &self.ctx, eval, now, cfg.copy_wait()));
        let restarted = std::mem::take(&mut self.restarted_member);
        if !self.membership.member {
            if was_member {
                fx.notes.push("leave".into());
            } else if restarted {
                fx.messages.push(self.msg(Destination::BroadcastAll, Payload::Leave { at: now }));
            }
            self.elections.clear();
            self.pending_challenge = None;
            return fx;
        }
        if !was_member {
            fx.notes.push("join".into());
            self.evicted.clear();
        }

        // partition heal: the oldest member hands its replica to returning nodes
        if self.membership.synced && self.registry().oldest() == Some(self.id) {
            let back: Vec<NodeId> = self.evicted.iter().copied().filter(|n| neighbors.contains(n)).collect();
            for n in back {
                self.evicted.remove(&n);
                let copy = Box::new(self.registry().clone());
                fx.messages.push(self.msg(Destination::Node(n), Payload::RegistryCopy(copy)));
            }
        }

        for t in triggers {
            fx.extend(self.open(t, now, eval, cfg));
        }
        if !self.membership.synced {
            return fx;
        }
        fx.extend(self.resign_ineligible(now, eval));
        for key in self.registry().held_by(self.id) {
            let drift = fitness_drift_tick(
                self.id,
                &key,
                &mut self.membership.registry,
                &self.spec,
                &self.ctx,
                eval,
                &cfg.election,
                now,
            );
            if let Some(m) = drift {
                fx.notes.push(format!("drift {key}"));
                fx.messages.push(m);
            }
        }
        fx.extend(self.fill_vacancies(now, eval, cfg));
        if cfg.challenges {
            fx.extend(self.challenge(now, eval, cfg));
        }
        fx
    }

    /// Steps down from positions whose criteria no longer hold, and from
    /// duplicate positions of one role.
    fn resign_ineligible(&mut self, now: SimTime, eval: &Evaluator) -> Effects {
        let mut fx = Effects::default();
        let mut seen = BTreeSet::new();
        for key in self.registry().held_by(self.id) {
            let duplicate = !seen.insert(key.role.clone());
            if duplicate || !eval.role_rrc(&self.ctx, &self.spec, &key.role) {
                self.membership.registry.apply_position(&key, Position { holder: None, stamp: now });
                let peers = self.peers();
                fx.notes.push(format!("resign {key}"));
                fx.messages.push(self.msg(Destination::Many(peers), Payload::Resign { position: key, at: now }));
            }
        }
        fx
    }

    fn fill_vacancies(&mut self, now: SimTime, eval: &Evaluator, cfg: &ProtocolConfig) -> Effects {
        let mut fx = Effects::default();
        let roles: Vec<String> = self.spec.roles.iter().map(|r| r.name.clone()).collect();
        for role in roles {
            let Some(index) = self.registry().first_vacant(&role) else { continue };
            let key = PositionKey::new(&role, index);
            if self.elections.contains_key(&key) || self.recently_closed(&key, now, cfg) {
                continue;
            }
            let trigger = ElectionTrigger::new(&self.spec.name, key, TriggerKind::Vacancy, now);
            fx.extend(self.open(trigger, now, eval, cfg));
        }
        fx
    }

    fn challenge(&mut self, now: SimTime, eval: &Evaluator, cfg: &ProtocolConfig) -> Effects {
        let mut fx = Effects::default();
        if let Some((_, sent)) = &self.pending_challenge {
            if now < *sent + cfg.tick_period() + cfg.tick_period() {
                return fx;
            }
            self.pending_challenge = None;
        }
        for role in self.spec.roles.iter().map(|r| &r.name) {
            if self.elections.keys().any(|k| &k.role == role) {
                continue;
            }
            if let Some(m) = maybe_challenge(self.id, role, self.registry(), &self.spec, &self.ctx, eval, &cfg.election) {
                if let Payload::ChallengeRequest { position, .. } = &m.payload {
                    fx.notes.push(format!("challenge {position}"));
                    self.pending_challenge = Some((position.clone(), now));
                }
                self.stats.challenges_sent += 1;
                fx.messages.push(m);
                break;
            }
        }
        fx
    }

    fn bid_targets(&self, role: &str, st: &ElectionState) -> Vec<NodeId> {
        let mut to: BTreeSet<NodeId> = self.registry().eligible_for(role).into_iter().collect();
        to.extend(st.bids.keys().copied());
        to.remove(&self.id);
        to.into_iter().collect()
    }

    /// Opens an election at this node if it may bid for the position.
    pub fn open(&mut self, trigger: ElectionTrigger, now: SimTime, eval: &Evaluator, cfg: &ProtocolConfig) -> Effects {
        let mut fx = Effects::default();
        if !self.membership.synced || self.elections.contains_key(&trigger.position) {
            return fx;
        }
        self.ctx.now = now.as_secs();
        let role = trigger.position.role.clone();
        let Some(mine) = bid_score(self.id, &role, self.registry(), &self.spec, &self.ctx, eval) else {
            return fx;
        };
        let key = trigger.position.clone();
        let mut st = ElectionState::new(trigger, now + cfg.election.bid_window());
        st.bids.insert(self.id, mine);
        let to = self.bid_targets(&role, &st);
        *self.stats.elections_opened.entry(st.trigger.kind).or_default() += 1;
        fx.notes.push(format!("open {} {key} bid={:.4}", st.trigger.kind, mine.value));
        fx.messages.push(bid_message(self.id, &st.trigger, mine, to));
        fx.deadlines.push((st.deadline, key.clone()));
        self.elections.insert(key, st);
        fx
    }

    /// Handles one delivered message.
    pub fn handle(&mut self, msg: &Msg, now: SimTime, eval: &Evaluator, cfg: &ProtocolConfig) -> Effects {
        self.ctx.now = now.as_secs();
        let mut fx = Effects::default();
        if msg.group != self.spec.name {
            return fx;
        }
        self.membership.refresh_seen(msg.from, now);
        match &msg.payload {
            Payload::Join { joined_at, .. } => {
                self.evicted.remove(&msg.from);
                let fresh = self.registry().members.get(&msg.from).is_none_or(|r| r.joined_at != *joined_at);
                if let Some(copy) = on_join_advert(&mut self.membership, msg, now) {
                    fx.notes.push(format!("copy -> {}", msg.from));
                    fx.messages.push(copy);
                } else if fresh && self.membership.member {
                    if let Some((c, inc)) = self.copier_for(msg.from) {
                        self.owed.insert(msg.from, (c, inc, now));
                    }
                }
            }
            Payload::Leave { .. } => {
                let was = self.registry().is_member(msg.from);
                for t in on_leave_advert(&mut self.membership, msg) {
                    fx.extend(self.open(t, now, eval, cfg));
                }
                if was {
                    fx.notes.push(format!("left {}", msg.from));
                }
                fx.messages.extend(self.settle_owed(now, cfg));
            }
            Payload::RegistryCopy(copy) => {
                let was_synced = self.membership.synced;
                on_registry_copy(&mut self.membership, msg, now);
                if self.membership.member {
                    self.adopt_copied_cardinalities();
                    if !was_synced {
                        fx.notes.push(format!("synced from {}", msg.from));
                    }
                    // positions the sender has wrong are re-advertised by their holder
                    for key in self.registry().held_by(self.id) {
                        let Some(mine) = self.registry().position(&key).copied() else { continue };
                        if copy.position(&key).copied() != Some(mine) {
                            let payload = Payload::ElectionResult { position: key.clone(), assignment: mine };
                            fx.messages.push(self.msg(Destination::Many(self.peers()), payload));
                        }
                    }
                }
            }
            Payload::Resign { position, at } => {
                if self.membership.member {
                    let reg = &mut self.membership.registry;
                    if reg.position(position).is_some_and(|p| p.holder_node() == Some(msg.from)) {
                        reg.apply_position(position, Position { holder: None, stamp: *at });
                    }
                    if reg.position(position).is_some_and(|p| p.holder.is_none()) {
                        let t = ElectionTrigger::new(&self.spec.name, position.clone(), TriggerKind::Resignation, now);
                        fx.extend(self.open(t, now, eval, cfg));
                    }
                }
            }
            Payload::Bid { position, trigger, score } => fx.extend(self.on_bid(msg.from, position, *trigger, *score, now, eval, cfg)),
            Payload::ElectionResult { position, assignment } | Payload::FitnessUpdate { position, assignment } => {
                if self.membership.member {
                    self.membership.registry.apply_position(position, *assignment);
                    let superseded = self
                        .elections
                        .get(position)
                        .is_some_and(|st| assignment.holder.is_some() && assignment.stamp >= st.trigger.opened_at);
                    if superseded {
                        self.elections.remove(position);
                        self.closed.insert(position.clone(), now);
                    }
                }
            }
            Payload::ChallengeRequest { .. } => {
                if self.membership.member {
                    let (outcome, msgs) =
                        on_challenge(self.id, &mut self.membership.registry, msg, &self.spec, &self.ctx, eval, now);
                    if outcome != ChallengeOutcome::Stale {
                        *self.stats.elections.entry(TriggerKind::Challenge).or_default() += 1;
                    }
                    fx.notes.push(format!("challenge from {} {outcome:?}", msg.from));
                    fx.messages.extend(msgs);
                }
            }
            Payload::ChallengeResponse { position, assignment, .. } => {
                if self.membership.member {
                    self.membership.registry.apply_position(position, *assignment);
                }
                if self.pending_challenge.as_ref().is_some_and(|(k, _)| k == position) {
                    self.pending_challenge = None;
                }
            }
            Payload::SpecUpdate { change, at }
                if self.apply_spec_change(change, *at) => {
                    fx.notes.push(format!("spec update {change:?}"));
                }
            _ => {}
        }
        fx
    }

    #[allow(clippy::too_many_arguments)]
    fn on_bid(
        &mut self,
        from: NodeId,
        position: &PositionKey,
        trigger: TriggerKind,
        score: FitnessScore,
        now: SimTime,
        eval: &Evaluator,
        cfg: &ProtocolConfig,
    ) -> Effects {
        let mut fx = Effects::default();
        if !self.membership.member || !self.membership.synced {
            return fx;
        }
        if let Some(st) = self.elections.get_mut(position) {
            st.bids.insert(from, score);
            return fx;
        }
        if self.recently_closed(position, now, cfg) {
            return fx;
        }
        let t = ElectionTrigger::new(&self.spec.name, position.clone(), trigger, now);
        let mut st = ElectionState::new(t, now + cfg.election.bid_window());
        st.bids.insert(from, score);
        if let Some(mine) = bid_score(self.id, &position.role, self.registry(), &self.spec, &self.ctx, eval) {
            st.bids.insert(self.id, mine);
            let to = self.bid_targets(&position.role, &st);
            fx.messages.push(bid_message(self.id, &st.trigger, mine, to));
        }
        fx.deadlines.push((st.deadline, position.clone()));
        self.elections.insert(position.clone(), st);
        fx
    }

    /// Closes the election for `key` once its deadline has passed.
    pub fn close(&mut self, key: &PositionKey, now: SimTime) -> Effects {
        let mut fx = Effects::default();
        let Some(mut st) = self.elections.remove(key) else { return fx };
        if now < st.deadline {
            self.elections.insert(key.clone(), st);
            return fx;
        }
        self.closed.insert(key.clone(), now);
        let Ok((winner, fs_e)) = close_election(&mut st) else { return fx };
        let Some(entry) = st.winning_position() else { return fx };
        fx.notes.push(format!("close {} {key} bids={} winner={winner} fs={:.4}", st.trigger.kind, st.bids.len(), fs_e.value));
        // only the winner's announcement is authoritative; bid sets can differ between nodes
        if winner == self.id {
            self.membership.registry.apply_position(key, entry);
            *self.stats.elections.entry(st.trigger.kind).or_default() += 1;
            let peers = self.peers();
            fx.messages
                .push(self.msg(Destination::Many(peers), Payload::ElectionResult { position: key.clone(), assignment: entry }));
        }
        fx
    }

    /// Applies a specification change once per originating time stamp.
    pub fn apply_spec_change(&mut self, change: &SpecChange, at: SimTime) -> bool {
        let slot = match change {
            SpecChange::Cardinality { role, .. } => format!("k:{role}"),
            SpecChange::GroupMinimum { term, .. } => format!("min:{term}"),
        };
        if self.spec_versions.get(&slot).is_some_and(|&v| v >= at) {
            return false;
        }
        self.spec_versions.insert(slot, at);
        match change {
            SpecChange::Cardinality { role, k, retire } => {
                let Some(r) = self.spec.role_mut(role) else { return false };
                r.cardinality.rebind(*k);
                self.membership.registry.resize_role(role, *k as usize, *retire);
                self.elections.retain(|key, _| &key.role != role);
                self.closed.retain(|key, _| &key.role != role);
            }
            SpecChange::GroupMinimum { term, minimum } => {
                self.spec = self.spec.clone().with_group_criteria(&[Criterion::minimum(term.clone(), *minimum)]);
            }
        }
        true
    }

    fn adopt_copied_cardinalities(&mut self) {
        let lengths: Vec<(String, usize)> =
            self.registry().assignments.iter().map(|(r, p)| (r.clone(), p.len())).collect();
        for (role, len) in lengths {
            if let Some(r) = self.spec.role_mut(&role) {
                if r.cardinality.current() != Some(len as u32) {
                    r.cardinality.rebind(len as u32);
                }
            }
        }
    }
}
