//! Self-organizing interaction spaces.
//!
//! Nodes read a group-role specification, decide locally whether they
//! belong to a group, keep a replica of the group registry, and elect
//! role holders through vacancy, resignation and challenge events. A
//! seeded discrete-event simulator drives the protocols and counts every
//! message so that scenario harnesses can compare a client-server
//! baseline against the self-organized deployment.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod adapt;
pub mod context;
pub mod election;
pub mod membership;
pub mod par;
pub mod protocol;
pub mod review;
pub mod scenarios;
pub mod simnet;
pub mod spec;
pub mod world;

pub use context::{ContextUpdate, Evaluator, FitnessScore, NodeContext};
pub use simnet::{MessageCounters, MessageKind, NetMode, SimTime, Simulator};
pub use spec::{parse_spec, Cardinality, Criterion, GroupSpec, RoleSpec};

/// Identifies a simulated node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}
