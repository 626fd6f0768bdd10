//! Language-conditioned dexterous grasp synthesis at desk scale.
//!
//! The crate provides the full pipeline: a reverse-mode autodiff engine
//! over dense tensors, a parametric articulated hand with differentiable
//! forward kinematics, analytic SDF objects, hand-object interaction
//! losses, a three-step grasp retargeting optimizer, a synthetic dataset
//! forge with template-based language guidance, a conditional diffusion
//! generator with a regression refiner, and the evaluation metric suite.

pub mod error;
pub mod geom;
pub mod rng;
pub mod tensor;
pub mod optim;
pub mod hand;
pub mod object;
pub mod losses;
pub mod retarget;
pub mod guidance;
pub mod par;
pub mod records;
pub mod dataset;
pub mod posespace;
pub mod diffusion;
pub mod nets;
pub mod train;
pub mod metrics;

pub use error::{Error, Result};
