//! Desk-scale real-sim-real tooling: a differentiable planar pushing
//! simulator, kernel density metrics over collected transition data, a
//! gap-driven intrinsic reward, gradient tuning of physical parameters,
//! PPO policy training, and the outer loop that ties them together.

pub mod dataset;
pub mod density;
pub mod diffsim;
pub mod harness;
pub mod infogap;
pub mod policy;
pub mod tuner;
