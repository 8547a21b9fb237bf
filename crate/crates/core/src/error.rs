use thiserror::Error;

use crate::schedule::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("condition `{id}` is invalid:\n{}", render_violations(.violations))]
    InvalidCondition { id: String, violations: Vec<Violation> },

    #[error("unknown built-in condition `{0}` (expected A, B, C or D)")]
    UnknownCondition(String),

    /// An operation was called outside its domain (window larger than the
    /// trace, fraction out of range, ...).
    #[error("{0}")]
    Precondition(String),

    /// Input data is well-formed but violates a domain rule.
    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("registry mismatch: {0}")]
    RegistryMismatch(String),

    #[error("schedule exhausted after {0} steps")]
    Exhausted(u64),

    #[error("unknown stage {0}")]
    UnknownStage(u32),

    #[error("{context}: {message}")]
    Parse { context: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.to_string(),
        }
    }
}

fn render_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| format!("  - {v}"))
        .collect::<Vec<_>>()
        .join("\n")
}
