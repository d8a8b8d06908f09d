//! Branching processes in random environment driven by stable random walks:
//! walk and renewal-function estimation, generating-function iteration,
//! conditioned simulation and limit-constant evaluation.

pub mod condsim;
pub mod envmodel;
pub mod gfengine;
pub mod limits;
pub mod quad;
pub mod renewal;
pub mod rng;
pub mod runio;
pub mod stablecore;
pub mod stats;
pub mod walks;
