//! Crate-wide error types.
//!
//! Every fallible operation returns [`Result`]. The variants map onto the
//! failure classes the CLI turns into distinct exit codes: configuration,
//! artifact format, and contract violations each stay distinguishable all
//! the way to the process boundary.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up (matmul inner dims, loss operand shapes, ...).
    #[error("shape error: {0}")]
    Shape(String),

    /// A parameter value is invalid (non-positive temperature, zero rank, ...).
    #[error("parameter error: {0}")]
    Param(String),

    /// An API contract was violated (update to a frozen adapter, non-scalar
    /// loss in backward, optimizer step without gradients, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// A computation produced NaN or infinity; values are never propagated.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Bad runtime input (token id out of vocabulary range, over-long sequence).
    #[error("input error: {0}")]
    Input(String),

    /// Binary artifact could not be parsed.
    #[error("format error: {0}")]
    Format(#[from] FormatError),

    /// Pipeline configuration file problem.
    #[error("config error: {0}")]
    Config(String),

    /// A stage input artifact is missing; names the stage that produces it.
    #[error("missing artifact {path:?}: run the `{stage}` stage to produce it")]
    MissingArtifact { path: PathBuf, stage: &'static str },

    /// performance_ratio is undefined when the ceiling does not beat the base.
    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Artifact-format failures. Each corruption class gets its own variant so
/// readers can (and tests do) tell them apart.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found} (reader supports {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated artifact while reading {0}")]
    Truncated(String),

    /// Internally inconsistent contents (declared rank vs stored shapes, ...).
    #[error("invalid artifact contents: {0}")]
    Invalid(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
}
