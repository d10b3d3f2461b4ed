use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A parameter lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// An index or segment lies outside the environment.
    #[error("range error: {0}")]
    Range(String),
    /// A quantity that must be strictly positive underflowed or went non-finite.
    #[error("numerical breakdown: {0}")]
    Breakdown(String),
    /// Rejection sampling accepted too few proposals.
    #[error("acceptance starvation: accepted {accepted} of {proposed} proposals")]
    Starvation { accepted: usize, proposed: usize },
    /// A statistic was requested for an empty or zero-weight sample.
    #[error("degenerate sample: {0}")]
    Degenerate(String),
    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors that indicate the numbers themselves failed, as
    /// opposed to caller mistakes.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Breakdown(_) | Error::Starvation { .. })
    }
}
