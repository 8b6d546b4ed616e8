use std::path::PathBuf;

use crate::nn::PolicyNet;

pub type Result<T, E = AgentError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite {what} (policy loss {policy_loss}, value loss {value_loss}, entropy {entropy})")]
    NonFiniteLoss {
        what: &'static str,
        policy_loss: f64,
        value_loss: f64,
        entropy: f64,
    },

    /// Parameters went non-finite; carries the last finite parameters.
    #[error("parameters diverged at update {update}")]
    Diverged {
        update: usize,
        last_good: Box<PolicyNet>,
    },

    #[error("checkpoint does not match: {0}")]
    CheckpointMismatch(String),

    #[error("invalid PPO configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Env(#[from] sfc_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint parse error: {0}")]
    Json(#[from] serde_json::Error),
}
