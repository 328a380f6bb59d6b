use thiserror::Error;

use crate::grammar::GrammarError;

#[derive(Debug, Error)]
pub enum RepairError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error("cannot apply edit program: {0}")]
    Apply(String),
    #[error("training data error: {0}")]
    TrainingData(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("decode failure: {0}")]
    DecodeFailure(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("ingestion error at line {line}: {msg}")]
    Ingest { line: usize, msg: String },
    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },
    #[error(transparent)]
    Tensor(#[from] repair_tensor::TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = RepairError> = std::result::Result<T, E>;
