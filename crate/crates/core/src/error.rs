//! Error types shared across the crate.

use alloc::string::String;
use core::fmt;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, CoreError>;

/// Errors surfaced by the training laboratory.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Shape / dimension / schedule misconfiguration.
    Config(String),
    /// Invalid data fed to an operation (out-of-range token, bad batch).
    Data(String),
    /// Sampling request the world cannot satisfy.
    Sampling(String),
    /// Hard-negative mining on an unusable sequence.
    NegativeMining(String),
    /// Non-finite value encountered; carries the phase/step context so an
    /// aborted run can be located in its log.
    Numeric {
        what: String,
        phase: String,
        step: u64,
    },
    /// A statistic that has no defined value on this input
    /// (e.g. rank correlation of a constant sequence).
    Undefined(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Config(msg) => write!(f, "config: {msg}"),
            CoreError::Data(msg) => write!(f, "data: {msg}"),
            CoreError::Sampling(msg) => write!(f, "sampling: {msg}"),
            CoreError::NegativeMining(msg) => write!(f, "negative-mining: {msg}"),
            CoreError::Numeric { what, phase, step } => {
                write!(f, "numeric: {what} (phase {phase}, step {step})")
            }
            CoreError::Undefined(msg) => write!(f, "undefined: {msg}"),
        }
    }
}

impl core::error::Error for CoreError {}
