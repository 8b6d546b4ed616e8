//! Proximal policy optimisation for the SFC environment, written against a
//! small hand-rolled MLP, together with baseline policies and multi-seed
//! evaluation.

pub mod baselines;
pub mod checkpoint;
pub mod corridor;
pub mod dist;
pub mod error;
pub mod eval;
pub mod gae;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod train;

pub use error::{AgentError, Result};
pub use nn::PolicyNet;
pub use ppo::PpoConfig;
