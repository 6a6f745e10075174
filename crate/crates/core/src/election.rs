//! Event-triggered role elections.
//!
//! A position is (re)filled after a vacancy (unannounced loss of its
//! holder), a resignation (announced departure), or a challenge by a node
//! whose current fitness beats the holder's recorded fitness by a factor
//! of at least `delta`. Holders re-advertise their fitness when it leaves
//! the band `((2 - delta) * fs_e, delta * fs_e)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{Evaluator, FitnessScore, NodeContext};
use crate::membership::{GroupRegistry, Position, PositionKey};
use crate::protocol::{Msg, Payload};
use crate::simnet::{Destination, Message, SimTime};
use crate::spec::{effective_criteria, GroupSpec};
use crate::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TriggerKind {
    Vacancy,
    Resignation,
    Challenge,
}

impl std::fmt::Display for TriggerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        std::fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectionTrigger {
    pub group: String,
    pub position: PositionKey,
    pub kind: TriggerKind,
    pub opened_at: SimTime,
    pub challenger: Option<NodeId>,
}

impl ElectionTrigger {
    pub fn new(group: &str, position: PositionKey, kind: TriggerKind, opened_at: SimTime) -> Self {
        debug_assert!(kind != TriggerKind::Challenge, "challenges carry a challenger");
        ElectionTrigger { group: group.to_string(), position, kind, opened_at, challenger: None }
    }

    pub fn challenge(group: &str, position: PositionKey, challenger: NodeId, opened_at: SimTime) -> Self {
        ElectionTrigger {
            group: group.to_string(),
            position,
            kind: TriggerKind::Challenge,
            opened_at,
            challenger: Some(challenger),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElectionConfig {
    pub delta: f64,
    /// Seconds a node collects bids after it learns of an election.
    pub bid_window: f64,
}

impl Default for ElectionConfig {
    fn default() -> Self {
        ElectionConfig { delta: 1.2, bid_window: 0.5 }
    }
}

impl ElectionConfig {
    pub fn validate(&self) -> Result<(), ElectionError> {
        if !(self.delta > 1.0) || !self.delta.is_finite() {
            return Err(ElectionError::InvalidDelta(self.delta));
        }
        if !(self.bid_window > 0.0) {
            return Err(ElectionError::InvalidBidWindow(self.bid_window));
        }
        Ok(())
    }

    pub fn bid_window(&self) -> SimTime {
        SimTime::from_secs(self.bid_window)
    }

    /// `fs_a >= delta * fs_e`.
    pub fn challenge_fires(&self, fs_a: f64, fs_e: f64) -> bool {
        fs_a >= self.delta * fs_e
    }

    /// Outside the band `((2 - delta) * fs_e, delta * fs_e)`.
    pub fn drift_fires(&self, fs_a: f64, fs_e: f64) -> bool {
        fs_a != fs_e && (fs_a >= self.delta * fs_e || fs_a <= (2.0 - self.delta) * fs_e)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ElectionError {
    #[error("no eligible node for {0}")]
    NoEligibleNodes(PositionKey),
    #[error("election closed without bids")]
    EmptyBidSet,
    #[error("delta must be > 1, got {0}")]
    InvalidDelta(f64),
    #[error("bid window must be positive, got {0}")]
    InvalidBidWindow(f64),
}

/// One node's view of an open election.
#[derive(Debug, Clone, PartialEq)]
pub struct ElectionState {
    pub trigger: ElectionTrigger,
    pub bids: BTreeMap<NodeId, FitnessScore>,
    pub deadline: SimTime,
    pub elected: Option<(NodeId, FitnessScore)>,
}

impl ElectionState {
    pub fn new(trigger: ElectionTrigger, deadline: SimTime) -> Self {
        ElectionState { trigger, bids: BTreeMap::new(), deadline, elected: None }
    }

    /// Registry entry the winner records and announces. The stamp is the
    /// latest bid time.
    pub fn winning_position(&self) -> Option<Position> {
        let (node, fs_e) = self.elected?;
        let stamp = self.bids.values().map(|s| SimTime::from_secs(s.measured_at)).max()?;
        Some(Position::held(node, fs_e, stamp.max(self.trigger.opened_at)))
    }
}

/// The node's fitness for `role` if it may bid: it satisfies the role's
/// restrictive criteria and holds no other position of the same role.
pub fn bid_score(
    me: NodeId,
    role: &str,
    registry: &GroupRegistry,
    spec: &GroupSpec,
    ctx: &NodeContext,
    eval: &Evaluator,
) -> Option<FitnessScore> {
    if !registry.is_member(me) || registry.held_index(me, role).is_some() {
        return None;
    }
    let eff = effective_criteria(spec, role).ok()?;
    eval.rrc(ctx, &eff).then(|| eval.fitness(ctx, &eff))
}

pub fn bid_message(me: NodeId, trigger: &ElectionTrigger, score: FitnessScore, to: Vec<NodeId>) -> Msg {
    Message::new(
        me,
        Destination::Many(to),
        &trigger.group,
        Payload::Bid { position: trigger.position.clone(), trigger: trigger.kind, score },
    )
}

/// Opens a vacancy or resignation election across the group: every
/// eligible member computes its fitness and sends a bid to every other
/// eligible member. Returns the collected state and the bid messages.
pub fn open_election(
    trigger: &ElectionTrigger,
    registry: &GroupRegistry,
    contexts: &BTreeMap<NodeId, NodeContext>,
    spec: &GroupSpec,
    eval: &Evaluator,
    cfg: &ElectionConfig,
) -> Result<(ElectionState, Vec<Msg>), ElectionError> {
    debug_assert!(trigger.kind != TriggerKind::Challenge);
    let role = &trigger.position.role;
    let bidders: Vec<(NodeId, FitnessScore)> = registry
        .members
        .keys()
        .filter_map(|&id| {
            let ctx = contexts.get(&id)?;
            bid_score(id, role, registry, spec, ctx, eval).map(|s| (id, s))
        })
        .collect();
    if bidders.is_empty() {
        return Err(ElectionError::NoEligibleNodes(trigger.position.clone()));
    }
    let mut state = ElectionState::new(trigger.clone(), trigger.opened_at + cfg.bid_window());
    let mut messages = Vec::with_capacity(bidders.len());
    for &(id, score) in &bidders {
        let others = bidders.iter().map(|(o, _)| *o).filter(|o| *o != id).collect();
        messages.push(bid_message(id, trigger, score, others));
        state.bids.insert(id, score);
    }
    Ok((state, messages))
}

fn peers(registry: &GroupRegistry, me: NodeId) -> Vec<NodeId> {
    registry.members.keys().copied().filter(|&n| n != me).collect()
}

/// Highest bid wins; equal bids go to the smaller node id.
pub fn close_election(state: &mut ElectionState) -> Result<(NodeId, FitnessScore), ElectionError> {
    let winner = state
        .bids
        .iter()
        .max_by(|(a_id, a), (b_id, b)| a.value.total_cmp(&b.value).then_with(|| b_id.cmp(a_id)))
        .map(|(id, s)| (*id, *s))
        .ok_or(ElectionError::EmptyBidSet)?;
    state.elected = Some(winner);
    Ok(winner)
}

/// Challenges the weakest filled position of `role` when this node's
/// current fitness reaches `delta` times that position's recorded fitness.
pub fn maybe_challenge(
    me: NodeId,
    role: &str,
    registry: &GroupRegistry,
    spec: &GroupSpec,
    ctx: &NodeContext,
    eval: &Evaluator,
    cfg: &ElectionConfig,
) -> Option<Msg> {
    let positions = registry.positions(role);
    if positions.is_empty() || positions.iter().any(|p| p.holder.is_none()) {
        return None;
    }
    let score = bid_score(me, role, registry, spec, ctx, eval)?;
    let (index, target) = positions
        .iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| {
            let (a, b) = (a.holder.unwrap(), b.holder.unwrap());
            a.fs_e.value.total_cmp(&b.fs_e.value).then(i.cmp(j))
        })
        .map(|(i, p)| (i, p.holder.unwrap()))?;
    if target.node == me || !cfg.challenge_fires(score.value, target.fs_e.value) {
        return None;
    }
    Some(Message::new(
        me,
        Destination::Node(target.node),
        &registry.group,
        Payload::ChallengeRequest { position: PositionKey::new(role, index), score },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChallengeOutcome {
    ChallengerWins,
    IncumbentRetains,
    /// The receiver does not hold the contested position.
    Stale,
}

/// The incumbent's handling of a challenge: compare against its current
/// fitness, record the outcome, answer the challenger and advertise the
/// new entry to the group.
pub fn on_challenge(
    me: NodeId,
    registry: &mut GroupRegistry,
    msg: &Msg,
    spec: &GroupSpec,
    ctx: &NodeContext,
    eval: &Evaluator,
    now: SimTime,
) -> (ChallengeOutcome, Vec<Msg>) {
    let Payload::ChallengeRequest { position, score } = &msg.payload else {
        return (ChallengeOutcome::Stale, Vec::new());
    };
    let respond = |outcome, assignment: Position| {
        Message::new(
            me,
            Destination::Node(msg.from),
            &msg.group,
            Payload::ChallengeResponse { position: position.clone(), outcome, assignment },
        )
    };
    let current = registry.position(position).copied();
    let Some(current) = current.filter(|p| p.holder_node() == Some(me)) else {
        return (ChallengeOutcome::Stale, vec![respond(ChallengeOutcome::Stale, current.unwrap_or(Position::VACANT))]);
    };

    let eff = effective_criteria(spec, &position.role).unwrap_or_default();
    let mine = if eval.rrc(ctx, &eff) {
        eval.fitness(ctx, &eff)
    } else {
        FitnessScore::new(0.0, ctx.now)
    };
    let stamp = now.max(current.stamp);
    let (outcome, entry, advert) = if score.value > mine.value {
        let entry = Position::held(msg.from, *score, stamp);
        (ChallengeOutcome::ChallengerWins, entry, Payload::ElectionResult { position: position.clone(), assignment: entry })
    } else {
        let entry = Position::held(me, mine, stamp);
        (ChallengeOutcome::IncumbentRetains, entry, Payload::FitnessUpdate { position: position.clone(), assignment: entry })
    };
    registry.apply_position(position, entry);
    let advert = Message::new(me, Destination::Many(peers(registry, me)), &msg.group, advert);
    (outcome, vec![respond(outcome, entry), advert])
}

/// A holder's periodic check: advertise the current fitness when it left
/// the `delta` band around the recorded one.
pub fn fitness_drift_tick(
    me: NodeId,
    position: &PositionKey,
    registry: &mut GroupRegistry,
    spec: &GroupSpec,
    ctx: &NodeContext,
    eval: &Evaluator,
    cfg: &ElectionConfig,
    now: SimTime,
) -> Option<Msg> {
    let current = *registry.position(position)?;
    let holder = current.holder.filter(|h| h.node == me)?;
    let eff = effective_criteria(spec, &position.role).ok()?;
    let fs_a = eval.fitness(ctx, &eff);
    if !cfg.drift_fires(fs_a.value, holder.fs_e.value) {
        return None;
    }
    let entry = Position::held(me, fs_a, now.max(current.stamp));
    registry.apply_position(position, entry);
    Some(Message::new(
        me,
        Destination::Many(peers(registry, me)),
        &registry.group,
        Payload::FitnessUpdate { position: position.clone(), assignment: entry },
    ))
}

/// Fills the `k` positions of `role` by successive single-position
/// elections over the given contexts. Entry `i` is the holder of
/// position `i`, or `None` when the eligible nodes ran out.
pub fn allocate_k_positions(
    role: &str,
    k: usize,
    registry: &GroupRegistry,
    contexts: &BTreeMap<NodeId, NodeContext>,
    spec: &GroupSpec,
    eval: &Evaluator,
    cfg: &ElectionConfig,
    now: SimTime,
) -> Vec<Option<NodeId>> {
    let mut working = registry.clone();
    working.resize_role(role, k, None);
    for p in working.assignments.get_mut(role).unwrap() {
        *p = Position::VACANT;
    }
    let mut out = Vec::with_capacity(k);
    for index in 0..k {
        let key = PositionKey::new(role, index);
        let trigger = ElectionTrigger::new(&registry.group, key.clone(), TriggerKind::Vacancy, now);
        let winner = open_election(&trigger, &working, contexts, spec, eval, cfg)
            .ok()
            .and_then(|(mut state, _)| close_election(&mut state).ok());
        if let Some((node, fs)) = winner {
            working.apply_position(&key, Position::held(node, fs, now + SimTime(1 + index as u64)));
        }
        out.push(winner.map(|(n, _)| n));
    }
    out
}
