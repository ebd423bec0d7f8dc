//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("gate coverage gap: {0}")]
    CoverageGap(String),

    #[error("graph disconnected at layer {layer}: {detail}")]
    Disconnected { layer: usize, detail: String },

    #[error(
        "FLOPs budget not reached after {epochs} epochs: closest {closest} vs budget {budget}"
    )]
    BudgetNotReached { closest: u64, budget: u64, epochs: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
