//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A primitive was applied to tensors with incompatible shapes.
    #[error("shape mismatch in {primitive}: {detail}")]
    Shape { primitive: &'static str, detail: String },

    /// An operation was called outside its contract (e.g. backward on a
    /// non-scalar output).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration or argument failed validation.
    #[error("invalid configuration: {0}")]
    Validation(String),

    /// A value became non-finite where the computation requires finiteness.
    #[error("numeric instability: {0}")]
    Numeric(String),

    /// Training loss diverged; carries the step index for diagnostics.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    /// A checkpoint or config file is malformed or corrupt.
    #[error("format error: {0}")]
    Format(String),

    /// Two artifacts that must agree (e.g. base model and adapter) do not.
    #[error("incompatible artifacts: {0}")]
    Incompatible(String),

    #[error("config parse error: {0}")]
    Config(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for caller mistakes, 3 for
    /// divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::Config(_)
            | Error::Format(_)
            | Error::Incompatible(_)
            | Error::Shape { .. }
            | Error::Contract(_) => 2,
            Error::Diverged { .. } => 3,
            _ => 1,
        }
    }
}
