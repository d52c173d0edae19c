//! Collaborative multi-agent multi-armed bandits with weighted mixed rewards.
//!
//! Each of `M` agents pulls one of `K` arms per round and observes a local
//! reward, but is scored on a weighted average of all agents' means for
//! that arm. The crate provides:
//!
//! * [`model`]: instances, mixed means and gaps;
//! * [`oracle`]: the allocation programs behind the regret lower bound;
//! * [`confidence`]: time-uniform confidence radii for mixed means;
//! * [`cexp2`]: the two-stage explore / guided-explore / exploit policy;
//! * [`wcpe`]: a phased-elimination policy, used as the fallback;
//! * [`sim`]: the synchronous simulator with regret and communication
//!   accounting.

pub mod cexp2;
pub mod confidence;
pub mod error;
pub mod estimates;
pub mod matrix;
pub mod model;
pub mod oracle;
pub mod sim;
pub mod wcpe;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use model::{BanditInstance, GapSummary, WeightMatrix};
