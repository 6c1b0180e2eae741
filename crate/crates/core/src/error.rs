use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot open device file {path}: {source}")]
    Privilege {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("memory exhausted: {0}")]
    Exhausted(String),

    #[error("requested range exceeds profile: {0}")]
    Range(String),

    #[error("cannot set CPU affinity: {0}")]
    Affinity(String),

    #[error("invalid region state: {0}")]
    State(String),

    #[error("layout size error: {0}")]
    Size(String),

    #[error("clock resolution {resolution_ns} ns exceeds 1% of the minimum timed duration ({min_timed_ns} ns)")]
    Clock { resolution_ns: u64, min_timed_ns: u64 },

    #[error("topology error: {0}")]
    Topology(String),

    #[error("environment policy refused the run: {}", .violations.join("; "))]
    Policy { violations: Vec<String> },

    #[error("metric `{0}` missing from result set")]
    MissingMetric(String),

    #[error("series has {have} points, need at least {need}")]
    ShortSeries { have: usize, need: usize },

    #[error("series is empty")]
    EmptySeries,

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Privilege { .. } => "privilege",
            Error::Exhausted(_) => "exhausted",
            Error::Range(_) => "range",
            Error::Affinity(_) => "affinity",
            Error::State(_) => "state",
            Error::Size(_) => "size",
            Error::Clock { .. } => "clock",
            Error::Topology(_) => "topology",
            Error::Policy { .. } => "policy",
            Error::MissingMetric(_) => "missing_metric",
            Error::ShortSeries { .. } => "short_series",
            Error::EmptySeries => "empty_series",
            Error::InvalidSpec(_) => "invalid_spec",
            Error::Schema(_) => "schema",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
