//! Fibrewise hyperbolic skew products over torus bases: linear models,
//! cone certification, conjugacies to the affine model and invariant leaves.

pub mod commands;
pub mod config;
pub mod cones;
pub mod conjugacy;
pub mod error;
pub mod leaves;
pub mod linear;
pub mod report;
pub mod system;
pub mod torus;
pub mod zoo;

pub use error::{Error, Result};
