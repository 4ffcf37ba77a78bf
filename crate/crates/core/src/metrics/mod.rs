//! Meta-evaluation: how well a judge agrees with human labels.
//!
//! Pointwise judges are scored with text-level and system-level Pearson,
//! Spearman and Kendall (tau-b) correlations. Pairwise judges are scored
//! with agreement and consistency rates under an order swap. Sampled
//! critiques are merged with [`self_consistency`].

mod agreement;
mod consistency;
mod correlation;
mod levels;
pub mod report;

use thiserror::Error;

pub use agreement::{agreement_consistency, AgreementReport, SwapJudgment};
pub use consistency::{self_consistency, Aggregate};
pub use correlation::{average_ranks, kendall, pearson, spearman};
pub use levels::{
    system_level, text_level, CorrelationReport, GroupWeighting, Level, ScoreRow, ScoreTable,
    TextLevelOptions,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("vectors have different lengths ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least 2 observations, got {0}")]
    TooShort(usize),
    #[error("input contains NaN or infinite values")]
    NonFinite,
    #[error("degenerate input: a vector is constant")]
    DegenerateInput,
    #[error("no usable groups ({skipped} skipped)")]
    NoUsableGroups { skipped: usize },
    #[error("score table is empty")]
    EmptyTable,
    #[error("duplicate row for query {query_id} / model {model_id}")]
    DuplicateRow { query_id: String, model_id: String },
    #[error("min_group must be at least 2, got {0}")]
    InvalidMinGroup(usize),
    #[error("system-level correlation needs at least 2 models, got {0}")]
    TooFewModels(usize),
    #[error("no candidates to aggregate")]
    EmptyCandidates,
    #[error("candidates mix pointwise and pairwise critiques")]
    HeterogeneousCandidates,
}
