use thiserror::Error;

use crate::sharing::Branch;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid mask: row {row} has no allowed position")]
    InvalidMask { row: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("cache miss: no {kind} cached for layer {layer} ({branch})")]
    CacheMiss {
        kind: &'static str,
        layer: usize,
        branch: Branch,
    },

    #[error("cache ordering error at layer {layer}, step {step}: {detail}")]
    Ordering {
        layer: usize,
        step: usize,
        detail: String,
    },

    #[error("plan error: {0}")]
    Plan(String),

    #[error("infeasible plan: {}", format_violations(.0))]
    InfeasiblePlan(Vec<crate::plan_search::Violation>),

    #[error("similarity undefined: {0}")]
    UndefinedSimilarity(String),

    #[error("missing traces: {0}")]
    MissingTrace(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn format_violations(v: &[crate::plan_search::Violation]) -> String {
    v.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
