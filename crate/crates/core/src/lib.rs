//! Simulation core for placing and managing an EPC service function chain
//! across distributed data centers.
//!
//! The crate is split along the data flow of an experiment:
//!
//! * [`trace`] ingests CDR internet-activity records (or synthesizes them) and
//!   aggregates them into fixed-length steps.
//! * [`clustering`] builds per-cell day-period profiles and groups cells with
//!   K-means.
//! * [`sim`] is the discrete-event model of servers and VNF instances with
//!   exponential failure and repair.
//! * [`env`] wraps the simulator as a stepped reinforcement-learning
//!   environment with the SFC reward.

pub mod clustering;
pub mod env;
pub mod error;
pub mod seed;
pub mod sim;
pub mod trace;

pub use error::{Error, Result};
