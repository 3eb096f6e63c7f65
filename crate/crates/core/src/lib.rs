//! Joint depth refinement and ego-motion estimation on sparse, noisy depth.
//!
//! The crate couples a pinhole/SE(3) geometry core with differentiable image
//! warping, a supervised + photometric + smoothness + mask-regularization
//! loss stack (all with hand-derived analytic gradients), an Adam optimizer,
//! and an evaluation harness (ATE/RE, depth-completion metrics). Sensor
//! noise simulation and an analytic synthetic-scene generator provide
//! ground truth that is independent of the warping code under test.

pub mod dataio;
pub mod diffcore;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod imaging;
pub mod losses;
pub mod predictors;
pub mod sensorsim;

pub use error::{Error, Result};
