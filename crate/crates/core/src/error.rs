//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("degenerate mask in {op}: {detail}")]
    DegenerateMask { op: &'static str, detail: String },
    #[error("backward() already ran on this tape; build a fresh tape per backward pass")]
    BackwardAlreadyRun,
    #[error("backward() requires a finite scalar loss: {0}")]
    InvalidLoss(String),
    #[error("function is not deterministic under grad check: {0}")]
    NonDeterministic(String),
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("infeasible packing: {0}")]
    InfeasiblePacking(String),
    #[error("invalid document {doc_id}: {detail}")]
    InvalidDocument { doc_id: String, detail: String },
}

#[derive(Debug, Error)]
pub enum CorpusIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad corpus header: expected {expected:?}, found {found:?}")]
    BadHeader { expected: String, found: String },
    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("validation error at line {line}: {detail}")]
    Validation { line: usize, detail: String },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    CorpusIo(#[from] CorpusIoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("non-finite loss {value} at step {step}; aborting")]
    NonFiniteLoss { step: usize, value: f64 },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("evaluation error: {0}")]
    Eval(String),
}
