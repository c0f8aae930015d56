//! Advantage actor-critic with self-imitation learning (A2C+SIL).
//!
//! The crate bundles a small dense network core, deterministic key/door
//! gridworlds, a prioritized replay buffer keyed on clipped advantages, the
//! A2C and SIL objectives, a trainer, and a tabular verification suite for
//! lower-bound soft Q-learning.

pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod losses;
pub mod nn;
pub mod oracle;
pub mod replay;
pub mod trainer;

pub use error::{Error, Result};
