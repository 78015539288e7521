//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward requires a tracked loss; this value is detached from the graph")]
    UntrackedLoss,

    #[error("label {label} out of range for {len} classes")]
    LabelOutOfRange { label: usize, len: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(
        "output size constraint violated: head size L={l} must exceed unique images per \
         meta-step ({uniques}) plus recall queue capacity ({queue})"
    )]
    OutputSizeConstraint { l: usize, uniques: usize, queue: usize },

    #[error("insufficient free labels: need {needed}, only {free} of {l} rows are free")]
    InsufficientFreeLabels { needed: usize, free: usize, l: usize },

    #[error("duplicate active label {label} pushed to recall queue")]
    DuplicateActiveLabel { label: usize },

    #[error("sample population too small: requested {requested}, available {available}")]
    PopulationTooSmall { requested: usize, available: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFiniteLoss { step: u64, diagnostics: String },

    #[error("empty query set: a meta-step needs at least one fresh or recalled query sample")]
    EmptyQuery,

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for usage/config problems, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::OutputSizeConstraint { .. }
            | Error::PopulationTooSmall { .. } => 2,
            _ => 1,
        }
    }
}
