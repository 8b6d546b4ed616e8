use std::path::PathBuf;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("cannot parse {path}: {source}")]
    ConfigParse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] sfc_core::Error),

    #[error(transparent)]
    Agent(#[from] sfc_agent::AgentError),
}

impl HarnessError {
    /// Configuration and usage problems exit with 1, everything else with 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::ConfigParse { .. } => 1,
            HarnessError::Core(sfc_core::Error::Config(_)) => 1,
            HarnessError::Agent(sfc_agent::AgentError::Config(_)) => 1,
            HarnessError::Agent(sfc_agent::AgentError::Env(sfc_core::Error::Config(_))) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }
}
