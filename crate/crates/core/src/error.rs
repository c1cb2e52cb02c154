use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("cannot split {tokens} tokens into {partitions} partitions")]
    InvalidPartitioning { tokens: u64, partitions: u64 },

    #[error("memory reuse needs at least 2 partitions, got {partitions}")]
    ReuseNotApplicable { partitions: u64 },

    #[error("strategy {strategy} is inconsistent with reuse_enabled = {reuse_enabled}")]
    ConflictingReuse {
        strategy: &'static str,
        reuse_enabled: bool,
    },

    #[error("schedule deadlock: {diagnostic}")]
    Deadlock { diagnostic: String },

    #[error("oracle limited to {limit} ops, dag has {ops}")]
    OracleTooLarge { ops: usize, limit: usize },

    #[error("no feasible partition count for batch of {tokens} tokens")]
    NoCandidate { tokens: u64 },

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("invalid workload: {0}")]
    InvalidWorkload(String),
}

impl Error {
    pub(crate) fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
