//! Self-paced curriculum learning with Gaussian context distributions.
//!
//! The curriculum is a diagonal Gaussian over task contexts that is moved,
//! inside a KL trust region, first towards contexts where the agent performs
//! well and then towards a target distribution once performance is adequate.

pub mod curriculum;
pub mod env;
pub mod error;
pub mod gaussian;
pub mod harness;
pub mod learner;
pub mod oracle;
pub mod registry;
pub mod stats;
pub mod update;
pub mod vecops;

pub use error::{Error, Result};
pub use gaussian::{ContextDistribution, ContextSample, TargetSpec};
pub use stats::{CurriculumStats, RolloutBatch};
pub use update::{update, CurriculumConfig, UpdateReport};
