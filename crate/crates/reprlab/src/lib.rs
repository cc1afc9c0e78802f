//! reprlab: a dual-memory pseudo-rehearsal laboratory for continual
//! reinforcement learning.
//!
//! The crate trains a short-term Q-network on one task at a time, then
//! consolidates it into a long-term network by distillation while a
//! Wasserstein GAN replays generated states of earlier tasks. Baseline
//! retention mechanisms (rehearsal, limited rehearsal, single-network
//! pseudo-rehearsal, EWC, online-EWC) run under the same protocol, and a
//! Fisher-overlap analysis quantifies how tasks share weights.
//!
//! Start with the [guide](crate::guide) or the `reprlab` command-line
//! binary.

pub mod analysis;
pub mod baselines;
pub mod consolidation;
pub mod dqn;
pub mod engine;
pub mod envs;
pub mod error;
pub mod genreplay;
pub mod guide;
pub mod harness;
pub mod rng;

pub use error::{Error, Result};
