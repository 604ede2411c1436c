//! Dual-head recognition of handwritten Arabic letters.
//!
//! Each sample carries a composite label: one of 28 letters and one of four
//! positional forms. The crate covers the full path from raw images to fused
//! ensemble predictions and evaluation tables.

pub mod augment;
pub mod corpus;
mod error;
pub mod fusion;
pub mod imaging;
pub mod labels;
pub mod metrics;
pub mod models;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
