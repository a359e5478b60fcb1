//! Agnostic policy-based RL toolkit for layered tabular MDPs.
//!
//! The crate covers exact spanning-capacity and coverability computation,
//! sunflower certificates, the POPLER explorer built on policy-specific
//! Markov reward processes, importance-sampling and trajectory-tree
//! baselines, and generators for combination-lock hard instances.
//!
//! Layers are 1-based. Layer 0 holds the virtual start node and layer `H+1`
//! the virtual end node; both only appear in MRPs.

pub mod baselines;
pub mod capacity;
pub mod error;
pub mod format;
pub mod harness;
pub mod instances;
pub mod lowerbound;
pub mod mdp;
pub mod mrp;
pub mod policy;
pub mod popler;
pub mod seed;
pub mod sunflower;
pub mod universe;

pub use error::{Error, Result};
pub use mdp::{LayeredMdp, OccupancyTable, RewardDist, Step, Trajectory};
pub use mrp::{Mrp, MrpFlavor};
pub use policy::{ClassTag, Policy, PolicyClass};
pub use universe::{StateId, Universe};

/// Tolerance used when validating probability vectors.
pub const PROB_TOL: f64 = 1e-9;
