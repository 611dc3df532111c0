//! Articulated pose estimation with generalized sum-of-Gaussians (G-SoG)
//! shape templates.
//!
//! A template of anisotropic Gaussians bound to a quaternion skeleton is
//! fitted to observations modelled as a sum of isotropic Gaussians (SoG) by
//! maximizing their closed-form overlap integral with L-BFGS.

// Negated comparisons are used so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod gaussian;
pub mod gradients;
pub mod kinematics;
pub mod optimizer;
pub mod pointcloud;
pub mod similarity;
pub mod synthetic;
pub mod verify;

pub use error::{GsogError, Result};
