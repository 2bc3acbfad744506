//! Simulation and analysis of wireless networked control over round-based
//! multi-hop networks.

// Range checks are written as negated comparisons so that NaN fails them;
// per-agent loops index several parallel vectors at once.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod control;
pub mod error;
pub mod linalg;
pub mod netsim;
pub mod plant;
pub mod rng;
pub mod scenario;
pub mod sched;

pub use error::{Error, Result};
