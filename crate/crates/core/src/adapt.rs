//! Self-adaptation: the aggregator's feedback loop on role cardinality,
//! and relaxing or tightening group-level minimums.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::election::{ElectionTrigger, TriggerKind};
use crate::membership::{GroupRegistry, PositionKey};
use crate::protocol::SpecChange;
use crate::simnet::SimTime;
use crate::spec::{Condition, Criterion, GroupSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdaptError {
    #[error("no group-level criterion on {0}")]
    UnknownTerm(String),
    #[error("group-level criterion on {0} is not a float minimum")]
    WrongCriterionType(String),
    #[error("invalid controller bounds: k_min={k_min}, k={k}, k_max={k_max}")]
    InvalidBounds { k_min: u32, k: u32, k_max: u32 },
    #[error("target samples per window must be positive")]
    ZeroTarget,
}

/// ±1 hysteresis controller on a role's position count, driven by the
/// number of samples the aggregator received in the last window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CardinalityController {
    pub role: String,
    pub target_samples_per_window: u32,
    /// Seconds per feedback window.
    pub window: f64,
    pub k_min: u32,
    pub k_max: u32,
    pub current_k: u32,
}

impl CardinalityController {
    pub fn new(role: &str, target: u32, window: f64, k_min: u32, k_max: u32, current_k: u32) -> Result<Self, AdaptError> {
        let c = CardinalityController {
            role: role.to_string(),
            target_samples_per_window: target,
            window,
            k_min,
            k_max,
            current_k,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), AdaptError> {
        if self.target_samples_per_window == 0 {
            return Err(AdaptError::ZeroTarget);
        }
        if self.k_min == 0 || self.k_min > self.current_k || self.current_k > self.k_max {
            return Err(AdaptError::InvalidBounds { k_min: self.k_min, k: self.current_k, k_max: self.k_max });
        }
        Ok(())
    }

    /// New `k` after a window with `samples` received, or `None` when unchanged.
    pub fn feedback(&mut self, samples: u32) -> Option<u32> {
        let target = self.target_samples_per_window;
        let next = if samples < target {
            (self.current_k + 1).min(self.k_max)
        } else if samples >= target.saturating_mul(2) {
            self.current_k.saturating_sub(1).max(self.k_min)
        } else {
            self.current_k
        };
        (next != self.current_k).then(|| {
            self.current_k = next;
            next
        })
    }
}

/// The specification change and election event that follow a new `k`.
///
/// Growing opens a vacancy at the new last position. Shrinking retires
/// the filled position with the lowest recorded fitness (or the last
/// position when some are vacant) through a resignation.
pub fn plan_cardinality_change(
    registry: &GroupRegistry,
    role: &str,
    new_k: u32,
    at: SimTime,
) -> (SpecChange, ElectionTrigger) {
    let positions = registry.positions(role);
    let old_k = positions.len();
    let new_k_us = new_k as usize;
    if new_k_us > old_k {
        let change = SpecChange::Cardinality { role: role.to_string(), k: new_k, retire: None };
        let trigger = ElectionTrigger::new(&registry.group, PositionKey::new(role, old_k), TriggerKind::Vacancy, at);
        return (change, trigger);
    }
    let retire = if let Some(last_vacant) = positions.iter().rposition(|p| p.holder.is_none()) {
        last_vacant
    } else {
        positions
            .iter()
            .enumerate()
            .min_by(|(i, a), (j, b)| {
                let fa = a.holder.map_or(0.0, |h| h.fs_e.value);
                let fb = b.holder.map_or(0.0, |h| h.fs_e.value);
                fa.total_cmp(&fb).then(j.cmp(i))
            })
            .map_or(old_k.saturating_sub(1), |(i, _)| i)
    };
    let change = SpecChange::Cardinality { role: role.to_string(), k: new_k, retire: Some(retire) };
    let trigger = ElectionTrigger::new(&registry.group, PositionKey::new(role, retire), TriggerKind::Resignation, at);
    (change, trigger)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriteriaAdjustment {
    pub term: String,
    pub new_minimum: f64,
}

/// Replaces the minimum of a group-level float criterion.
pub fn adjust_group_criteria(spec: &GroupSpec, adj: &CriteriaAdjustment) -> Result<GroupSpec, AdaptError> {
    let mut out = spec.clone();
    let c = out
        .criteria
        .iter_mut()
        .find(|c| c.term == adj.term)
        .ok_or_else(|| AdaptError::UnknownTerm(adj.term.clone()))?;
    match &mut c.condition {
        Condition::Minimum(m) => *m = adj.new_minimum,
        _ => return Err(AdaptError::WrongCriterionType(adj.term.clone())),
    }
    Ok(out)
}

/// The change message form of an adjustment.
pub fn adjustment_change(adj: &CriteriaAdjustment) -> SpecChange {
    SpecChange::GroupMinimum { term: adj.term.clone(), minimum: adj.new_minimum }
}

/// Group-level criterion on `term`, if any.
pub fn group_criterion<'a>(spec: &'a GroupSpec, term: &str) -> Option<&'a Criterion> {
    spec.criteria.iter().find(|c| c.term == term)
}
