use serde::{Deserialize, Serialize};

use crate::model::Verdict;

/// A judge's verdicts on one pair presented in both orders.
///
/// `ba` is expressed in the swapped frame: `Win1` there means the judge
/// preferred the text that was originally second.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapJudgment {
    pub ab: Verdict,
    pub ba: Verdict,
    pub human: Verdict,
}

impl SwapJudgment {
    pub fn is_consistent(&self) -> bool {
        self.ab == self.ba.mirror()
    }

    pub fn agrees(&self) -> bool {
        self.is_consistent() && self.ab == self.human
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub agreement: f64,
    pub consistency: f64,
    pub pairs: usize,
}

/// Agreement and consistency rates. An empty batch reports zero rates.
pub fn agreement_consistency(judgments: &[SwapJudgment]) -> AgreementReport {
    if judgments.is_empty() {
        return AgreementReport {
            agreement: 0.0,
            consistency: 0.0,
            pairs: 0,
        };
    }
    let n = judgments.len() as f64;
    let consistent = judgments.iter().filter(|j| j.is_consistent()).count();
    let agreed = judgments.iter().filter(|j| j.agrees()).count();
    AgreementReport {
        agreement: agreed as f64 / n,
        consistency: consistent as f64 / n,
        pairs: judgments.len(),
    }
}
