use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{malformed} of {total} rows in {path} are malformed; not a CDR internet-activity file?")]
    MalformedCdr {
        path: PathBuf,
        malformed: usize,
        total: usize,
    },

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("trace csv line {line}: {msg}")]
    TraceCsv { line: usize, msg: String },

    #[error("invalid clustering input: {0}")]
    Clustering(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot move simulation clock backwards from {now} h to {requested} h")]
    TimeReversal { now: f64, requested: f64 },

    #[error("action component `{component}` = {value} out of range 0..{bound}")]
    ActionOutOfRange {
        component: &'static str,
        value: i64,
        bound: i64,
    },

    #[error("action type {0} is not one of 1 (create), 2 (delete), 3 (restart), 4 (no-op)")]
    ActionType(i64),

    #[error("environment episode is finished; call reset")]
    EpisodeDone,

    #[error("environment has not been reset")]
    NotReset,
}
