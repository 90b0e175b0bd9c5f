//! Pose estimation, execution-level reliability gating, and a seeded
//! Monte-Carlo simulator of single-step vision-guided alignment.

pub mod camera;
pub mod error;
pub mod gating;
pub mod harness;
pub mod metrics;
pub mod pnp;
pub mod se3;
pub mod sim;

pub use error::{Error, Result};
