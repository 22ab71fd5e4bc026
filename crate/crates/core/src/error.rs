use alloc::string::String;

/// Errors produced by the matting core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: {dim} = {value} is not divisible by {multiple}")]
    NotDivisible {
        op: &'static str,
        dim: &'static str,
        value: usize,
        multiple: usize,
    },
    #[error("{op}: input too small for valid convolution ({h}x{w}, receptive extent {extent})")]
    ValidUnderflow {
        op: &'static str,
        h: usize,
        w: usize,
        extent: usize,
    },
    #[error("empty batch in {0}")]
    EmptyBatch(&'static str),
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("patch index ({batch}, {row}, {col}) outside the {rows}x{cols} grid of batch {batches}")]
    IndexOutOfGrid {
        batch: usize,
        row: usize,
        col: usize,
        batches: usize,
        rows: usize,
        cols: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown dataset `{0}`")]
    MissingDataset(String),
    /// Raised by a training observer to end a run early.
    #[error("training interrupted after step {0}")]
    Interrupted(u64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint architecture hash {found:016x} does not match model {expected:016x}")]
    ConfigHashMismatch { expected: u64, found: u64 },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.into(),
        got: got.into(),
    }
}
