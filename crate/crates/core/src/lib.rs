//! Round Robin CUSUM for quickest detection of a change in the joint law of
//! `K` dependent sources when only `m` of them can be sampled per step.
//!
//! * [`model`]: units, local laws, post-change families and the mixture LLR.
//! * [`gaussian`]: Gaussian local laws and closed-form information numbers.
//! * [`scenario`]: ready-made correlation-change and mean-change models.
//! * [`policy`]: the round-robin CUSUM recursion and run driver.
//! * [`bounds`]: lower, upper and non-asymptotic delay bounds.
//! * [`montecarlo`]: delay / false-alarm estimation and the reference studies.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bounds;
pub mod error;
pub mod gaussian;
pub mod model;
pub mod montecarlo;
pub mod policy;
pub mod scenario;
pub mod stats;

pub use error::{Error, Result};
pub use model::{ChangePointModel, PostChangeHypothesis, Unit, UnitId};
pub use policy::{PolicyConfig, PolicyState, RunResult, StepDecision};
pub use stats::{Estimate, RandomStream};
