//! Seeded synthetic corpora for offline runs against the synthetic oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::judge::QualityBook;
use crate::model::{EvalSample, Locale, Origin, Query};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub queries: usize,
    pub models_per_query: usize,
    /// Sample qualities are drawn uniformly from this range.
    pub quality_range: (f64, f64),
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            queries: 20,
            models_per_query: 4,
            quality_range: (0.05, 1.0),
        }
    }
}

/// Queries, referenced samples and the latent quality of every text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub queries: Vec<Query>,
    pub samples: Vec<EvalSample>,
    /// `(text, quality)` for every sample and reference.
    pub qualities: Vec<(String, f64)>,
}

impl SynthCorpus {
    pub fn generate(locale: Locale, spec: SynthSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let categories = locale.default_categories();
        let (lo, hi) = spec.quality_range;
        let mut corpus = SynthCorpus {
            queries: Vec::new(),
            samples: Vec::new(),
            qualities: Vec::new(),
        };
        for qi in 0..spec.queries {
            let id = format!("q{:05}", qi + 1);
            let category = categories[qi % categories.len()].clone();
            let text = match locale {
                Locale::Zh => format!(
                    "请回答第{}个问题：{}相关的任务{}。",
                    qi + 1,
                    category,
                    rng.random_range(100..1000)
                ),
                Locale::En => format!(
                    "Question {}: a {} task, variant {}.",
                    qi + 1,
                    category,
                    rng.random_range(100..1000)
                ),
            };
            let reference = match locale {
                Locale::Zh => format!("问题{}的标准回答。", qi + 1),
                Locale::En => format!("Model answer for question {}.", qi + 1),
            };
            corpus.qualities.push((reference.clone(), 1.0));
            for m in 0..spec.models_per_query {
                let model_id = format!("model-{}", m + 1);
                let answer = match locale {
                    Locale::Zh => format!(
                        "{model_id}对问题{}的回答（版本{}）。",
                        qi + 1,
                        rng.random_range(0..1_000_000)
                    ),
                    Locale::En => format!(
                        "Answer by {model_id} to question {} (draft {}).",
                        qi + 1,
                        rng.random_range(0..1_000_000)
                    ),
                };
                let quality = if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                };
                corpus.qualities.push((answer.clone(), quality));
                corpus.samples.push(EvalSample {
                    query_id: id.clone(),
                    model_id,
                    text: answer,
                    reference: Some(reference.clone()),
                });
            }
            corpus.queries.push(Query {
                id,
                text,
                category,
                difficulty: None,
                origin: Origin::Seed,
            });
        }
        corpus
    }

    pub fn book(&self) -> QualityBook {
        self.qualities
            .iter()
            .map(|(t, q)| (t.as_str(), *q))
            .collect()
    }
}
