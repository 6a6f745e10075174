//! Peer review of game-state updates: each round every member reviews
//! exactly one other member's updates, and invalid updates are caught
//! with a configured probability.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReviewError {
    #[error("peer review needs at least two members, got {0}")]
    TooFewMembers(usize),
}

/// One round's assignment: reviewee → reviewer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRound {
    pub round: u64,
    pub assignment: BTreeMap<NodeId, NodeId>,
    pub rng_seed: u64,
}

impl ReviewRound {
    pub fn reviewer_of(&self, node: NodeId) -> Option<NodeId> {
        self.assignment.get(&node).copied()
    }

    /// No fixed points and every member reviews exactly once.
    pub fn is_derangement(&self) -> bool {
        let reviewers: BTreeSet<NodeId> = self.assignment.values().copied().collect();
        let reviewees: BTreeSet<NodeId> = self.assignment.keys().copied().collect();
        reviewers == reviewees && self.assignment.iter().all(|(a, b)| a != b)
    }
}

/// Round generator shared by every node: `(seed, round)` selects an
/// independent ChaCha stream, so all nodes compute the same assignment.
pub fn round_rng(seed: u64, round: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round);
    rng
}

/// Uniformly random derangement of `members`, by rejection of shuffles
/// with a fixed point (about e ≈ 2.7 shuffles on average).
pub fn assign_reviewers(members: &BTreeSet<NodeId>, round: u64, seed: u64) -> Result<ReviewRound, ReviewError> {
    if members.len() < 2 {
        return Err(ReviewError::TooFewMembers(members.len()));
    }
    let ids: Vec<NodeId> = members.iter().copied().collect();
    let mut rng = round_rng(seed, round);
    let mut perm = ids.clone();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().zip(&ids).all(|(a, b)| a != b) {
            break;
        }
    }
    let assignment = ids.into_iter().zip(perm).collect();
    Ok(ReviewRound { round, assignment, rng_seed: seed })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeReviewStats {
    pub times_as_reviewer: u64,
    pub injected_cheats: u64,
    pub detected_cheats: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewStats {
    pub per_node: BTreeMap<NodeId, NodeReviewStats>,
    pub detection_accuracy: f64,
}

impl ReviewStats {
    pub fn new(detection_accuracy: f64) -> Self {
        ReviewStats { per_node: BTreeMap::new(), detection_accuracy }
    }

    pub fn record_round(&mut self, round: &ReviewRound) {
        for reviewer in round.assignment.values() {
            self.per_node.entry(*reviewer).or_default().times_as_reviewer += 1;
        }
    }

    /// max − min reviewer load over known nodes.
    pub fn load_spread(&self) -> u64 {
        let loads = self.per_node.values().map(|s| s.times_as_reviewer);
        loads.clone().max().unwrap_or(0) - loads.min().unwrap_or(0)
    }

    pub fn injected(&self) -> u64 {
        self.per_node.values().map(|s| s.injected_cheats).sum()
    }

    pub fn detected(&self) -> u64 {
        self.per_node.values().map(|s| s.detected_cheats).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Accept,
    Reject,
}

/// The reviewer's check of one update by `updater`. Valid updates are
/// always accepted; invalid ones are rejected with probability
/// `stats.detection_accuracy`.
pub fn review_update<R: Rng>(updater: NodeId, valid: bool, stats: &mut ReviewStats, rng: &mut R) -> Verdict {
    if valid {
        return Verdict::Accept;
    }
    let caught = rng.random::<f64>() < stats.detection_accuracy;
    let entry = stats.per_node.entry(updater).or_default();
    entry.injected_cheats += 1;
    if caught {
        entry.detected_cheats += 1;
        Verdict::Reject
    } else {
        Verdict::Accept
    }
}
