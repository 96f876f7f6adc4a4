//! Error type shared by all core modules.

use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, CoreError>;

/// Errors emitted by tensor math, models, and pipeline execution.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Two tensors (or a tensor and an expectation) disagree on shape.
    ShapeMismatch {
        context: &'static str,
        left: String,
        right: String,
    },
    /// A scalar/config argument is out of its documented range.
    InvalidArgument { context: &'static str, detail: String },
    /// An operation produced (or received) a NaN/Inf element.
    NonFinite { context: &'static str },
    /// A named weight lookup failed (LoRA targets, registry tags).
    UnknownName { context: &'static str, name: String },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { context, left, right } => {
                write!(f, "{context}: shape mismatch between {left} and {right}")
            }
            CoreError::InvalidArgument { context, detail } => {
                write!(f, "{context}: {detail}")
            }
            CoreError::NonFinite { context } => {
                write!(f, "{context}: non-finite value encountered")
            }
            CoreError::UnknownName { context, name } => {
                write!(f, "{context}: unknown name `{name}`")
            }
        }
    }
}

impl core::error::Error for CoreError {}

pub(crate) fn invalid(context: &'static str, detail: impl fmt::Display) -> CoreError {
    CoreError::InvalidArgument { context, detail: alloc::format!("{detail}") }
}

pub(crate) fn shape_mismatch(
    context: &'static str,
    left: &[usize],
    right: &[usize],
) -> CoreError {
    CoreError::ShapeMismatch {
        context,
        left: alloc::format!("{left:?}"),
        right: alloc::format!("{right:?}"),
    }
}
