use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("collision: vehicle {follower} reached vehicle {leader} on {edge} (gap {gap:.6} m)")]
    Collision {
        follower: usize,
        leader: usize,
        edge: &'static str,
        gap: f64,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("policy and environment are incompatible: {0}")]
    Incompatible(String),

    #[error("distribution support violation at index {index}: p = {p}, q = 0")]
    Support { index: usize, p: f64 },

    #[error("correlation undefined: {0} has zero variance")]
    ZeroVariance(&'static str),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite reward at generation {generation}, member {member}")]
    NonFiniteReward { generation: usize, member: usize },

    #[error("benchmark manifest is empty after excluding ambiguous policies")]
    EmptyManifest,

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
