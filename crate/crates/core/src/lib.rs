//! End-to-end geometric constellation shaping for Wiener phase-noise
//! channels.
//!
//! The transmit constellation and a neural demapper are optimized jointly
//! through a differentiable model of the receiver chain, including a soft
//! blind phase search. Validation swaps in the hard phase search and reports
//! bitwise mutual information.

pub mod channel;
pub mod config;
pub mod constellation;
pub mod cpe;
pub mod demapper;
pub mod error;
pub mod experiments;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
