//! Self-grouping: local RRC checks, join/leave adverts and the registry
//! replica handed to newcomers by the oldest member.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::context::{Evaluator, FitnessScore, NodeContext};
use crate::election::{ElectionTrigger, TriggerKind};
use crate::protocol::{Msg, Payload};
use crate::simnet::{Destination, Message, SimTime};
use crate::spec::GroupSpec;
use crate::NodeId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberRecord {
    pub joined_at: SimTime,
    pub last_seen: SimTime,
    /// Roles whose restrictive criteria the member last advertised as satisfied.
    pub eligible: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Holder {
    pub node: NodeId,
    /// Fitness recorded when the holder was elected or last advertised.
    pub fs_e: FitnessScore,
}

/// One role position. Replicas converge by keeping the entry with the
/// greatest `(stamp, holder, fs_e)` key.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub holder: Option<Holder>,
    pub stamp: SimTime,
}

impl Position {
    pub const VACANT: Position = Position { holder: None, stamp: SimTime::ZERO };

    pub fn held(node: NodeId, fs_e: FitnessScore, stamp: SimTime) -> Self {
        Position { holder: Some(Holder { node, fs_e }), stamp }
    }

    pub fn holder_node(&self) -> Option<NodeId> {
        self.holder.map(|h| h.node)
    }

    fn key(&self) -> (SimTime, Option<NodeId>, u64) {
        (self.stamp, self.holder_node(), self.holder.map_or(0, |h| h.fs_e.value.to_bits()))
    }

    pub fn supersedes(&self, other: &Position) -> bool {
        self.key() > other.key()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PositionKey {
    pub role: String,
    pub index: usize,
}

impl PositionKey {
    pub fn new(role: &str, index: usize) -> Self {
        PositionKey { role: role.to_string(), index }
    }
}

impl std::fmt::Display for PositionKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}#{}", self.role, self.index)
    }
}

/// A node's replica of group membership and role assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRegistry {
    pub group: String,
    pub members: BTreeMap<NodeId, MemberRecord>,
    pub assignments: BTreeMap<String, Vec<Position>>,
}

impl GroupRegistry {
    /// Empty registry with vacant positions for every role of `spec`.
    pub fn new(spec: &GroupSpec) -> Self {
        let assignments = spec
            .roles
            .iter()
            .map(|r| (r.name.clone(), vec![Position::VACANT; r.cardinality.current().unwrap_or(0) as usize]))
            .collect();
        GroupRegistry { group: spec.name.clone(), members: BTreeMap::new(), assignments }
    }

    pub fn is_member(&self, node: NodeId) -> bool {
        self.members.contains_key(&node)
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// Oldest member by join time, ties broken by the smaller id.
    pub fn oldest(&self) -> Option<NodeId> {
        self.oldest_excluding(None)
    }

    pub fn oldest_excluding(&self, skip: Option<NodeId>) -> Option<NodeId> {
        self.members
            .iter()
            .filter(|(id, _)| Some(**id) != skip)
            .min_by_key(|(id, rec)| (rec.joined_at, **id))
            .map(|(id, _)| *id)
    }

    pub fn position(&self, key: &PositionKey) -> Option<&Position> {
        self.assignments.get(&key.role).and_then(|v| v.get(key.index))
    }

    pub fn positions(&self, role: &str) -> &[Position] {
        self.assignments.get(role).map_or(&[], Vec::as_slice)
    }

    /// Position index of `role` held by `node`, if any.
    pub fn held_index(&self, node: NodeId, role: &str) -> Option<usize> {
        self.positions(role).iter().position(|p| p.holder_node() == Some(node))
    }

    pub fn held_by(&self, node: NodeId) -> Vec<PositionKey> {
        let mut out = Vec::new();
        for (role, positions) in &self.assignments {
            for (i, p) in positions.iter().enumerate() {
                if p.holder_node() == Some(node) {
                    out.push(PositionKey::new(role, i));
                }
            }
        }
        out
    }

    pub fn first_vacant(&self, role: &str) -> Option<usize> {
        self.positions(role).iter().position(|p| p.holder.is_none())
    }

    /// Members advertising eligibility for `role` that hold none of its positions.
    pub fn eligible_for(&self, role: &str) -> Vec<NodeId> {
        self.members
            .iter()
            .filter(|(id, rec)| rec.eligible.contains(role) && self.held_index(**id, role).is_none())
            .map(|(id, _)| *id)
            .collect()
    }

    /// Last-writer-wins update of one position. Holders that are not
    /// members of this replica are not recorded.
    pub fn apply_position(&mut self, key: &PositionKey, incoming: Position) -> bool {
        if let Some(h) = incoming.holder {
            if !self.members.contains_key(&h.node) {
                return false;
            }
        }
        let Some(slot) = self.assignments.get_mut(&key.role).and_then(|v| v.get_mut(key.index)) else {
            return false;
        };
        if incoming.supersedes(slot) {
            *slot = incoming;
            true
        } else {
            false
        }
    }

    /// Clears the position without advancing its stamp, so any newer
    /// election result replaces it.
    pub fn vacate(&mut self, key: &PositionKey) {
        if let Some(slot) = self.assignments.get_mut(&key.role).and_then(|v| v.get_mut(key.index)) {
            slot.holder = None;
        }
    }

    /// Removes a member and every position it held. Cleared positions
    /// keep their stamps; `at`, when given, advances them (an advertised
    /// departure).
    pub fn remove_member(&mut self, node: NodeId, at: Option<SimTime>) -> Vec<PositionKey> {
        self.members.remove(&node);
        let held = self.held_by(node);
        for key in &held {
            let slot = &mut self.assignments.get_mut(&key.role).unwrap()[key.index];
            slot.holder = None;
            if let Some(at) = at {
                slot.stamp = slot.stamp.max(at);
            }
        }
        held
    }

    /// Changes the number of positions of `role`. Shrinking removes
    /// `retire` (or the last position) and shifts later positions down.
    pub fn resize_role(&mut self, role: &str, k: usize, retire: Option<usize>) {
        let positions = self.assignments.entry(role.to_string()).or_default();
        while positions.len() > k {
            let idx = retire.filter(|&i| i < positions.len()).unwrap_or(positions.len() - 1);
            positions.remove(idx);
        }
        while positions.len() < k {
            positions.push(Position::VACANT);
        }
    }

    /// Deterministic one-line dump for traces.
    pub fn dump(&self) -> String {
        let mut out = String::from("members=[");
        let ids: Vec<String> = self.members.keys().map(|n| n.to_string()).collect();
        out.push_str(&ids.join(","));
        out.push(']');
        for (role, positions) in &self.assignments {
            let _ = write!(out, " {role}=[");
            let cells: Vec<String> = positions
                .iter()
                .map(|p| match p.holder {
                    Some(h) => format!("{}:{:.4}", h.node, h.fs_e.value),
                    None => "-".to_string(),
                })
                .collect();
            out.push_str(&cells.join(","));
            out.push(']');
        }
        out
    }

    /// Members plus `(role, index) -> (holder, fs_e)` with stamps dropped;
    /// the part of the replica all members must agree on.
    pub fn agreement_view(&self) -> (BTreeSet<NodeId>, BTreeMap<(String, usize), Option<(NodeId, u64)>>) {
        let members = self.members.keys().copied().collect();
        let mut positions = BTreeMap::new();
        for (role, list) in &self.assignments {
            for (i, p) in list.iter().enumerate() {
                positions.insert((role.clone(), i), p.holder.map(|h| (h.node, h.fs_e.value.to_bits())));
            }
        }
        (members, positions)
    }
}

/// One node's membership state for one group.
#[derive(Debug, Clone)]
pub struct MembershipState {
    pub me: NodeId,
    pub member: bool,
    pub registry: GroupRegistry,
    pub joined_at: Option<SimTime>,
    pub advertised: BTreeSet<String>,
    /// Set once a registry copy arrived or the wait for one timed out.
    pub synced: bool,
    sync_deadline: SimTime,
    /// Departures observed since joining, applied over later registry copies.
    leave_log: BTreeMap<NodeId, SimTime>,
}

impl MembershipState {
    pub fn new(me: NodeId, spec: &GroupSpec) -> Self {
        MembershipState {
            me,
            member: false,
            registry: GroupRegistry::new(spec),
            joined_at: None,
            advertised: BTreeSet::new(),
            synced: false,
            sync_deadline: SimTime::ZERO,
            leave_log: BTreeMap::new(),
        }
    }

    /// Other members of this replica.
    pub fn peers(&self) -> Vec<NodeId> {
        self.registry.members.keys().copied().filter(|&n| n != self.me).collect()
    }

    /// Marks the replica synced once `now` passes the copy wait.
    pub fn check_sync(&mut self, now: SimTime) {
        if self.member && !self.synced && now >= self.sync_deadline {
            self.synced = true;
        }
    }

    pub fn refresh_seen(&mut self, node: NodeId, now: SimTime) {
        if let Some(rec) = self.registry.members.get_mut(&node) {
            rec.last_seen = rec.last_seen.max(now);
        }
    }

    /// Evicts members not seen within `timeout`; each position they held
    /// becomes a vacancy.
    pub fn evict_stale(&mut self, now: SimTime, timeout: SimTime) -> Vec<ElectionTrigger> {
        if !self.member {
            return Vec::new();
        }
        let stale: Vec<NodeId> = self
            .registry
            .members
            .iter()
            .filter(|(id, rec)| **id != self.me && now - rec.last_seen > timeout)
            .map(|(id, _)| *id)
            .collect();
        let mut triggers = Vec::new();
        for node in stale {
            for key in self.registry.remove_member(node, None) {
                triggers.push(ElectionTrigger::new(&self.registry.group, key, TriggerKind::Vacancy, now));
            }
        }
        triggers
    }
}

/// Periodic check of the restrictive criteria against the node's context.
///
/// Leaves (with an advert) when no role's criteria hold any more, joins
/// (with an advert) when some role's criteria start to hold, and
/// re-advertises the member's registry line when its set of satisfiable
/// roles changed.
pub fn grouping_tick(
    state: &mut MembershipState,
    spec: &GroupSpec,
    ctx: &NodeContext,
    eval: &Evaluator,
    now: SimTime,
    copy_wait: SimTime,
) -> Vec<Msg> {
    let eligible: BTreeSet<String> = eval.eligible_roles(ctx, spec).into_iter().collect();
    let satisfied = !eligible.is_empty();
    let me = state.me;
    match (state.member, satisfied) {
        (true, false) => {
            state.member = false;
            state.synced = false;
            state.joined_at = None;
            state.advertised.clear();
            state.leave_log.clear();
            state.registry = GroupRegistry::new(spec);
            vec![Message::new(me, Destination::BroadcastAll, &spec.name, Payload::Leave { at: now })]
        }
        (false, true) => {
            state.member = true;
            state.synced = false;
            state.sync_deadline = now + copy_wait;
            state.joined_at = Some(now);
            state.leave_log.clear();
            state.registry = GroupRegistry::new(spec);
            state
                .registry
                .members
                .insert(me, MemberRecord { joined_at: now, last_seen: now, eligible: eligible.clone() });
            state.advertised = eligible.clone();
            vec![Message::new(me, Destination::BroadcastAll, &spec.name, Payload::Join { joined_at: now, eligible })]
        }
        (true, true) if eligible != state.advertised => {
            let joined_at = state.joined_at.unwrap_or(now);
            if let Some(rec) = state.registry.members.get_mut(&me) {
                rec.eligible = eligible.clone();
                rec.last_seen = now;
            }
            state.advertised = eligible.clone();
            vec![Message::new(me, Destination::BroadcastAll, &spec.name, Payload::Join { joined_at, eligible })]
        }
        _ => Vec::new(),
    }
}

/// Records a newcomer. The oldest member other than the newcomer answers
/// with a copy of its registry. A repeated advert with the same join time
/// only refreshes the record.
pub fn on_join_advert(state: &mut MembershipState, msg: &Msg, now: SimTime) -> Option<Msg> {
    let Payload::Join { joined_at, eligible } = &msg.payload else {
        return None;
    };
    if !state.member || msg.from == state.me {
        return None;
    }
    let record = MemberRecord { joined_at: *joined_at, last_seen: now, eligible: eligible.clone() };
    match state.registry.members.get_mut(&msg.from) {
        Some(rec) if rec.joined_at == *joined_at => {
            rec.last_seen = now;
            rec.eligible = eligible.clone();
            return None;
        }
        _ => {
            // a re-join after crash or leave: drop any stale positions first
            if state.registry.is_member(msg.from) {
                state.registry.remove_member(msg.from, None);
            }
            state.registry.members.insert(msg.from, record);
            state.leave_log.remove(&msg.from);
        }
    }
    if state.registry.oldest_excluding(Some(msg.from)) == Some(state.me) {
        let copy = state.registry.clone();
        return Some(Message::new(state.me, Destination::Node(msg.from), &msg.group, Payload::RegistryCopy(Box::new(copy))));
    }
    None
}

/// Removes a departing member. Each position it held opens a resignation
/// election (the departure was announced).
pub fn on_leave_advert(state: &mut MembershipState, msg: &Msg) -> Vec<ElectionTrigger> {
    let Payload::Leave { at } = msg.payload else {
        return Vec::new();
    };
    if !state.member || msg.from == state.me {
        return Vec::new();
    }
    state.leave_log.insert(msg.from, at);
    if !state.registry.is_member(msg.from) {
        return Vec::new();
    }
    state
        .registry
        .remove_member(msg.from, Some(at))
        .into_iter()
        .map(|key| ElectionTrigger::new(&state.registry.group, key, TriggerKind::Resignation, at))
        .collect()
}

/// Merges a registry copy into the local replica. Departures observed
/// since joining win over the copy unless the copy shows a later re-join.
pub fn on_registry_copy(state: &mut MembershipState, msg: &Msg, now: SimTime) {
    let Payload::RegistryCopy(copy) = &msg.payload else {
        return;
    };
    if !state.member {
        return;
    }
    for (id, rec) in &copy.members {
        if *id == state.me {
            continue;
        }
        if let Some(&left) = state.leave_log.get(id) {
            if rec.joined_at <= left {
                continue;
            }
        }
        match state.registry.members.get_mut(id) {
            Some(local) if local.joined_at == rec.joined_at => {
                local.last_seen = local.last_seen.max(rec.last_seen);
            }
            Some(local) if local.joined_at > rec.joined_at => {}
            _ => {
                let mut rec = rec.clone();
                rec.last_seen = rec.last_seen.max(now);
                state.registry.members.insert(*id, rec);
            }
        }
    }
    for (role, positions) in &copy.assignments {
        if state.registry.positions(role).len() != positions.len() {
            state.registry.resize_role(role, positions.len(), None);
        }
        for (i, p) in positions.iter().enumerate() {
            state.registry.apply_position(&PositionKey::new(role, i), *p);
        }
    }
    state.synced = true;
}
