//! Differentiable dense SURF.
//!
//! Determinant-of-Hessian response maps and dense per-pixel 64-channel
//! upright SURF descriptor maps, both with analytic image-space gradients;
//! the L1/least-squares losses that compare them across image pairs; and a
//! sparse matching plus RANSAC harness for checking how well features
//! survive an appearance change.

pub mod autograd;
pub mod bench;
pub mod cli;
pub mod config;
pub mod descriptor;
pub mod detector;
pub mod error;
pub mod image;
pub mod losses;
pub mod matching;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
