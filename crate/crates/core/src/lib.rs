//! Watermarked LQG control loops under sensor deception attacks, with
//! CUSUM and Neyman-Pearson quickest detection and the closed-form
//! divergence, delay and cost predictions that go with them.

pub mod analysis;
pub mod attack;
pub mod cli;
pub mod control;
pub mod detectors;
pub mod error;
pub mod linalg;
pub mod optimizer;
pub mod presets;
pub mod simulator;
pub mod watermark;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
