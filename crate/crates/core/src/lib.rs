//! Fast-charging control laboratory.
//!
//! The crate is layered bottom-up:
//!
//! - [`params`]: cell parameters, open-circuit-potential tables and grid settings.
//! - [`spmet`]: single-particle model with electrolyte and thermal dynamics.
//! - [`env`]: episodic minimum-time charging environment with safety penalties.
//! - [`nn`]: small dense networks with hand-written backpropagation and Adam.
//! - [`ddpg`]: the deep deterministic policy gradient learner.
//! - [`baselines`]: CC-CV reference charger and independent numerical oracles.
//! - [`report`]: run-log aggregation into per-episode confidence bands.

pub mod baselines;
pub mod ddpg;
pub mod env;
pub mod error;
pub mod nn;
pub mod params;
pub mod report;
pub mod spmet;

pub use error::{Error, Result};
