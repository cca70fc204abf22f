use alloc::string::String;
use core::fmt;

/// Errors produced by the math layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands have incompatible shapes; names the operation and both shapes.
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A vector argument has the wrong length for the matrix it is applied to.
    Length {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    /// A scalar or count parameter is outside its admissible range.
    Domain(String),
    /// A divisibility requirement between sizes is violated.
    Partition(String),
    /// An input contains NaN or infinity.
    NonFinite(&'static str),
    /// A name lookup (method, model) failed.
    Unknown { kind: &'static str, name: String },
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, left, right } => write!(
                f,
                "{op}: incompatible shapes {}x{} and {}x{}",
                left.0, left.1, right.0, right.1
            ),
            Error::Length {
                op,
                expected,
                found,
            } => write!(f, "{op}: expected length {expected}, got {found}"),
            Error::Domain(msg) => write!(f, "{msg}"),
            Error::Partition(msg) => write!(f, "{msg}"),
            Error::NonFinite(what) => write!(f, "{what} contains a non-finite value"),
            Error::Unknown { kind, name } => write!(f, "unknown {kind} {name:?}"),
        }
    }
}

impl core::error::Error for Error {}
