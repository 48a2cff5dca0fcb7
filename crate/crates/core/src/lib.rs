//! Masked visual pre-training for motor control.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod image;
pub mod harness;
pub mod numerics;
pub mod policy;
pub mod simworld;
pub mod mae;
pub mod vit;

pub use error::{Error, Result};
