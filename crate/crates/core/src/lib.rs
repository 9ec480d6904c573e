//! Latent-conditioned meta-reinforcement learning for emergency load
//! shedding under fault-induced delayed voltage recovery.
//!
//! A policy shared across operating conditions is trained with parallel
//! random search ([`pars`]); each condition gets a latent vector found by
//! Gaussian-process Bayesian optimization ([`bayesopt`]) with the weights
//! frozen. [`meta`] alternates the two and adapts to unseen conditions by
//! searching the latent alone. [`grid`] is the simulator and [`baseline`] the
//! exhaustive-search MPC reference.
//!
//! ```
//! use metashed::grid::{Action, Contingency, EnvironmentParams, GridEnv, Scenario};
//!
//! let env = GridEnv::desk();
//! let s = Scenario::new(
//!     EnvironmentParams::new("light", 1.1, 0.35, 0.05, 0.45),
//!     Contingency { fault_bus: 6, fault_start: 1.0, fault_duration: 0.05 },
//! );
//! let shed_a_little = |_: &_, _: &_| Ok(Action::uniform(6, 0.01));
//! let summary = env.run_episode(&s, 0, shed_a_little, None).unwrap();
//! assert!(summary.total_shed > 0.0);
//! ```
//!
//! The guide under `book/` walks through each module with runnable listings.

pub mod baseline;
pub mod bayesopt;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod grid;
pub mod harness;
pub mod meta;
pub mod pars;
pub mod policy;
pub mod seed;

pub use error::{Error, Result};
