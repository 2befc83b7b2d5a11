//! Fair policies for multi-agent finite-horizon tabular MDPs.
//!
//! Every agent receives its own reward table; a concave fairness objective
//! (max-min, proportional or alpha-fair) aggregates the per-agent values.
//! The crate covers planning with a known model, optimistic online learning,
//! pessimistic offline learning, a score-function policy gradient, and a
//! harness that checks all of them against brute-force ground truth.

pub mod error;
pub mod fairness;
pub mod harness;
pub mod mdp;
pub mod occupancy;
pub mod offline;
pub mod online;
pub mod pgrad;
pub mod rng;
pub mod solver;

pub use error::{Error, Result};
pub use fairness::{FairnessKind, FairnessObjective};
pub use mdp::{RandomMdpConfig, TabularMdp, Trajectory};
pub use occupancy::{OccupancyQ, OccupancyZ, PolicyTable};
pub use solver::{ConfidenceModel, SolverConfig, StepRule};
