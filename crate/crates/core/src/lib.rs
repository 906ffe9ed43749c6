//! Faulted line identification for unbalanced radial distribution feeders
//! using a limited number of micro-PMUs.
//!
//! The crate is organised bottom-up:
//!
//! * [`feeder`] loads and validates the three-phase feeder graph, splits it
//!   into subgraphs bounded by adjacent micro-PMUs and enumerates the nested
//!   path chain of a subgraph.
//! * [`powerflow`] is the ground-truth simulator: a forward-backward sweep
//!   with a shunt fault stamped part-way along a branch.
//! * [`measurement`] turns true phasors into noisy micro-PMU phasors and
//!   pseudo power measurements, and performs the equivalent-current
//!   conversions used by the estimator.
//! * [`dsse`] is the branch-current weighted least squares estimator with a
//!   constant Jacobian.
//! * [`locator`] selects the faulted subgraph by maximum weighted residual and
//!   then walks the path chain to the faulted branch.
//! * [`harness`] runs Monte Carlo campaigns and writes accuracy reports.

pub mod bundled;
pub mod dsse;
pub mod feeder;
pub mod harness;
pub mod locator;
pub mod measurement;
pub mod phase;
pub mod powerflow;

pub use feeder::{FeederModel, PathChain, SubgraphPartition};
pub use phase::{Phase, PhaseSet, C64};
