//! Critique-data construction for LLM judges and the meta-evaluation
//! metrics used to score them.

pub mod augment;
pub mod jobs;
pub mod judge;
pub mod metrics;
pub mod model;
pub mod parse;
pub mod pipeline;
pub mod prompt;
pub mod synth;
