//! Generalized data distribution iteration on tabular MDPs.
//!
//! The crate is split along the algorithm's moving parts:
//!
//! * [`env`]: tabular MDPs, rollouts and exact dynamic-programming oracles.
//! * [`policy`]: dueling heads, tempered-softmax mixtures and the index space.
//! * [`controller`]: tile-coded bandit ensemble that picks behavior policies.
//! * [`learner`]: V-trace / ReTrace targets, losses and SGD.
//! * [`orchestrator`]: actor/learner loop and ablation modes.
//! * [`theory`]: numerical checks of the tilt and transport inequalities.
//! * [`metrics`]: Atari normalized-score metrics.

pub mod config;
pub mod controller;
pub mod env;
pub mod error;
pub mod learner;
pub mod metrics;
pub mod orchestrator;
pub mod policy;
pub mod theory;
mod util;

pub use error::{GdiError, Result};
