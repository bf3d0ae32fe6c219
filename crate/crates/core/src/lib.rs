//! Penalized minimax estimation of nuisance functions defined by linear
//! conditional moment restrictions, and debiased inference on linear
//! functionals of those nuisances.

pub mod debiased;
pub mod dgp;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod minimax;
pub mod oracle;
pub mod partially_linear;
pub mod problem;
mod serde_helpers;
pub mod spaces;

pub use error::{Error, Result};
