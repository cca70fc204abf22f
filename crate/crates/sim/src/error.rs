use std::fmt;

/// Errors from the simulated runtime and its IO surfaces.
#[derive(Debug)]
pub enum SimError {
    /// Propagated math-layer error.
    Core(lasp_core::Error),
    /// A message arrived out of order, was missing, or timed out.
    Protocol { rank: usize, detail: String },
    /// An operation ran against the wrong lifecycle state (e.g. backward
    /// before forward).
    State { detail: String },
    /// Invalid configuration; maps to the CLI usage exit code.
    Config { detail: String },
    /// A fixture or trace file did not match its format.
    Format { detail: String },
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::Core(e) => write!(f, "{e}"),
            SimError::Protocol { rank, detail } => {
                write!(f, "protocol error at rank {rank}: {detail}")
            }
            SimError::State { detail } => write!(f, "state error: {detail}"),
            SimError::Config { detail } => write!(f, "invalid configuration: {detail}"),
            SimError::Format { detail } => write!(f, "format error: {detail}"),
            SimError::Io(e) => write!(f, "io error: {e}"),
            SimError::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for SimError {}

impl From<lasp_core::Error> for SimError {
    fn from(e: lasp_core::Error) -> Self {
        SimError::Core(e)
    }
}

impl From<std::io::Error> for SimError {
    fn from(e: std::io::Error) -> Self {
        SimError::Io(e)
    }
}

impl From<serde_json::Error> for SimError {
    fn from(e: serde_json::Error) -> Self {
        SimError::Json(e)
    }
}
