use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::model::{Critique, PairwiseCritique, PointwiseCritique, Verdict};

/// Result of merging several sampled critiques into one judgment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Aggregate {
    Pointwise {
        /// Arithmetic mean of the candidates' overall scores.
        score: f64,
        /// Index of the candidate whose explanation is kept.
        selected: usize,
        critique: PointwiseCritique,
    },
    Pairwise {
        verdict: Verdict,
        /// Vote counts for Win1, Win2, Tie.
        votes: [usize; 3],
        /// Earliest candidate carrying `verdict`. `None` when the vote was
        /// split between Win1 and Win2 and nobody voted Tie.
        selected: Option<usize>,
        critique: Option<PairwiseCritique>,
    },
}

fn vote_slot(v: Verdict) -> usize {
    match v {
        Verdict::Win1 => 0,
        Verdict::Win2 => 1,
        Verdict::Tie => 2,
    }
}

/// Self-consistency aggregation.
///
/// Pointwise: the final score is the mean overall score and the explanation
/// comes from the candidate nearest that mean (earliest wins ties).
/// Pairwise: plurality vote; if the top count is shared the verdict is Tie.
pub fn self_consistency(candidates: &[Critique]) -> Result<Aggregate, MetricError> {
    let first = candidates.first().ok_or(MetricError::EmptyCandidates)?;
    match first {
        Critique::Pointwise(_) => {
            let points: Vec<&PointwiseCritique> = candidates
                .iter()
                .map(|c| match c {
                    Critique::Pointwise(p) => Ok(p),
                    Critique::Pairwise(_) => Err(MetricError::HeterogeneousCandidates),
                })
                .collect::<Result<_, _>>()?;
            let score = points
                .iter()
                .map(|p| f64::from(p.overall_score))
                .sum::<f64>()
                / points.len() as f64;
            let mut selected = 0;
            let mut best = f64::INFINITY;
            for (i, p) in points.iter().enumerate() {
                let distance = (f64::from(p.overall_score) - score).abs();
                if distance < best {
                    best = distance;
                    selected = i;
                }
            }
            Ok(Aggregate::Pointwise {
                score,
                selected,
                critique: points[selected].clone(),
            })
        }
        Critique::Pairwise(_) => {
            let pairs: Vec<&PairwiseCritique> = candidates
                .iter()
                .map(|c| match c {
                    Critique::Pairwise(p) => Ok(p),
                    Critique::Pointwise(_) => Err(MetricError::HeterogeneousCandidates),
                })
                .collect::<Result<_, _>>()?;
            let mut votes = [0usize; 3];
            for p in &pairs {
                votes[vote_slot(p.verdict)] += 1;
            }
            let top = *votes.iter().max().expect("three slots");
            let leaders: Vec<Verdict> = Verdict::ALL
                .into_iter()
                .filter(|&v| votes[vote_slot(v)] == top)
                .collect();
            let verdict = if leaders.len() == 1 {
                leaders[0]
            } else {
                Verdict::Tie
            };
            let selected = pairs.iter().position(|p| p.verdict == verdict);
            Ok(Aggregate::Pairwise {
                verdict,
                votes,
                selected,
                critique: selected.map(|i| pairs[i].clone()),
            })
        }
    }
}
