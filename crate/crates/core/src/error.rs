//! Error type shared by every core module.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, CoreError>;

#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Two tensor shapes that were required to agree do not.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A class label outside `[0, classes)`.
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    /// An entity span is out of bounds, empty, or overlaps the other span.
    Span(String),
    /// Sequence longer than the encoder's configured maximum.
    SequenceTooLong { len: usize, max: usize },
    /// Relation already present where a new one was required.
    DuplicateRelation(String),
    /// A stage was handed no instances.
    EmptyData(String),
    /// Memory or test data refers to a relation the model does not cover.
    Coverage(String),
    /// Configuration that cannot be satisfied.
    Config(String),
    /// A size precondition failed (e.g. more clusters than points).
    Size(String),
    /// A numeric precondition failed (step size, degenerate variance, ...).
    Precondition(String),
    /// A non-finite value where a finite one is required.
    NonFinite(&'static str),
    /// Tape misuse: backward twice, backward on a non-scalar, ...
    Tape(&'static str),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left:?} and {right:?}")
            }
            CoreError::LabelOutOfRange {
                index,
                label,
                classes,
            } => write!(
                f,
                "label {label} at index {index} is outside [0, {classes})"
            ),
            CoreError::Span(msg) => write!(f, "span error: {msg}"),
            CoreError::SequenceTooLong { len, max } => {
                write!(f, "sequence of length {len} exceeds maximum {max}")
            }
            CoreError::DuplicateRelation(name) => write!(f, "relation {name} already present"),
            CoreError::EmptyData(msg) => write!(f, "empty data: {msg}"),
            CoreError::Coverage(msg) => write!(f, "coverage error: {msg}"),
            CoreError::Config(msg) => write!(f, "configuration error: {msg}"),
            CoreError::Size(msg) => write!(f, "size error: {msg}"),
            CoreError::Precondition(msg) => write!(f, "precondition failed: {msg}"),
            CoreError::NonFinite(what) => write!(f, "non-finite value in {what}"),
            CoreError::Tape(msg) => write!(f, "tape error: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}
