//! Class activation maps, Scaled Directed Divergence (SDD) maps, and a
//! deletion/retention harness that measures how faithful an explanation is
//! to the classifier it explains.

pub mod bundle;
pub mod cam;
mod error;
pub mod eval;
pub mod fixture;
pub mod perturb;
pub mod render;
pub mod scorer;
pub mod sdd;

pub use error::ComputeError;
