use thiserror::Error;

use crate::annotate::ParseError;
use crate::llm::LlmError;

/// Errors surfaced by the evaluation toolkit.
#[derive(Debug, Error)]
pub enum OpeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dose {dose} mEq is not in the {task} action space")]
    DoseNotInActionSpace { dose: f64, task: String },

    #[error("degenerate split ({split}): {side} partition is empty")]
    DegenerateSplit { split: String, side: &'static str },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("rank-deficient design ({rank} of {cols} columns); enable the ridge fallback")]
    RankDeficient { rank: usize, cols: usize },

    #[error("requested {requested} annotations but the budget N*(|A|-1) = {n}*{actions_minus_one} = {budget}")]
    BudgetExceeded {
        requested: usize,
        n: usize,
        actions_minus_one: usize,
        budget: usize,
    },

    #[error("annotation sets disagree on task: {0} vs {1}")]
    MixedTasks(String, String),

    #[error("duplicate annotation for sample {sample_id}, action {action_index}, source `{source_id}`")]
    DuplicateAnnotation {
        sample_id: u64,
        action_index: usize,
        source_id: String,
    },

    #[error("annotation references unknown sample {0}")]
    UnknownSample(u64),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("optimization failed: {0}")]
    Numerical(String),

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error(transparent)]
    Llm(#[from] LlmError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = OpeError> = std::result::Result<T, E>;

impl OpeError {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        OpeError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
