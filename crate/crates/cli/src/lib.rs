//! The `morphscope` command line.

pub mod commands;
pub mod fetch;

use morphscope_core::Error as CoreError;

pub const EXIT_OK: u8 = 0;
pub const EXIT_ARGUMENT: u8 = 2;
pub const EXIT_DEPENDENCY: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;

/// Failures raised by the CLI itself, tagged with how they map to exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Argument(String),
    #[error("{0}")]
    Dependency(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("{0}")]
    Runtime(String),
}

/// Exit code for an error: argument problems 2, missing or damaged inputs 3, anything else 4.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Argument(_) => EXIT_ARGUMENT,
                Failure::Dependency(_) | Failure::Integrity(_) => EXIT_DEPENDENCY,
                Failure::Runtime(_) => EXIT_RUNTIME,
            };
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Argument(_) | CoreError::Shape { .. } => EXIT_ARGUMENT,
                CoreError::Io { .. }
                | CoreError::NotFound(_)
                | CoreError::Format(_)
                | CoreError::Corruption(_)
                | CoreError::Checkpoint(_)
                | CoreError::Consistency(_) => EXIT_DEPENDENCY,
            };
        }
        if let Some(e) = cause.downcast_ref::<morphscope_service::ServiceError>() {
            return match e {
                morphscope_service::ServiceError::Startup(_) => EXIT_DEPENDENCY,
                _ => EXIT_RUNTIME,
            };
        }
    }
    EXIT_RUNTIME
}
