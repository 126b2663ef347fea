//! Exit-code contract: 1 for invalid invocations or inputs, 2 for failures
//! while doing the work.

use std::fmt;

use tbvad_core::Error;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure::Usage(message.into())
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Failure::Runtime(message.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    /// Classifies a library error raised while handling `context` (usually
    /// the flag and file involved).
    pub fn from_core(context: &str, e: Error) -> Self {
        let message = if context.is_empty() { e.to_string() } else { format!("{context}: {e}") };
        match e {
            Error::Remote { .. } | Error::NanLoss { .. } | Error::NonFinite(_) | Error::Io { .. } => {
                Failure::Runtime(message)
            }
            _ => Failure::Usage(message),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

/// Attaches a context string to library results.
pub trait Context<T> {
    fn context(self, context: &str) -> Result<T, Failure>;
}

impl<T> Context<T> for tbvad_core::Result<T> {
    fn context(self, context: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure::from_core(context, e))
    }
}
