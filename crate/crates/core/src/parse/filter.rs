use serde::{Deserialize, Serialize};

use super::fragment::brace_groups;
use super::{ParseError, ParseOutcome};
use crate::model::{Critique, Grounding, ScoreScale};

/// Why a record left the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    NoTerminalFragment,
    MalformedFragment,
    ScoreOutOfRange,
    NoVerdict,
    AmbiguousVerdict,
    EmptyExplanation,
    ReferenceLeakage,
    /// The backend returned an empty or policy-refused completion.
    BackendRefusal,
    /// An upstream record this one depends on was dropped.
    CascadeSkip,
    /// The two reference-free paths disagree on the verdict.
    Disagreement,
}

impl From<&ParseError> for DropReason {
    fn from(e: &ParseError) -> Self {
        match e {
            ParseError::NoTerminalFragment => DropReason::NoTerminalFragment,
            ParseError::MalformedFragment(_) => DropReason::MalformedFragment,
            ParseError::ScoreOutOfRange { .. } => DropReason::ScoreOutOfRange,
            ParseError::NoVerdict => DropReason::NoVerdict,
            ParseError::AmbiguousVerdict { .. } => DropReason::AmbiguousVerdict,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Keep,
    Drop(DropReason),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterPolicy {
    pub scale: ScoreScale,
    pub require_explanation: bool,
    pub check_leakage: bool,
    /// Matched case-insensitively against reference-free explanations.
    pub leakage_phrases: Vec<String>,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            scale: ScoreScale::default(),
            require_explanation: true,
            check_leakage: true,
            leakage_phrases: [
                "参考答案",
                "reference answer",
                "[Reference Answer Begin]",
                "[参考答案开始]",
            ]
            .map(String::from)
            .to_vec(),
        }
    }
}

/// Text with every brace group and `[[...]]` marker removed.
pub fn strip_verdict_markup(text: &str) -> String {
    let (groups, _) = brace_groups(text);
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for g in groups {
        out.push_str(&text[last..g.start]);
        last = g.end;
    }
    out.push_str(&text[last..]);
    let mut result = String::with_capacity(out.len());
    let mut rest = out.as_str();
    while let Some(open) = rest.find("[[") {
        match rest[open..].find("]]") {
            Some(close) => {
                result.push_str(&rest[..open]);
                rest = &rest[open + close + 2..];
            }
            None => break,
        }
    }
    result.push_str(rest);
    result
}

/// Rule-based validity check applied after every prompting step.
pub fn rule_filter(outcome: &Result<ParseOutcome, ParseError>, policy: &FilterPolicy) -> Decision {
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => return Decision::Drop(e.into()),
    };
    if let Critique::Pointwise(c) = &outcome.result {
        if !policy.scale.contains(c.overall_score) {
            return Decision::Drop(DropReason::ScoreOutOfRange);
        }
    }
    let explanation = outcome.result.explanation();
    if policy.require_explanation && strip_verdict_markup(explanation).trim().is_empty() {
        return Decision::Drop(DropReason::EmptyExplanation);
    }
    if policy.check_leakage && outcome.result.setting().grounding == Grounding::ReferenceFree {
        let lowered = explanation.to_lowercase();
        if policy
            .leakage_phrases
            .iter()
            .any(|p| lowered.contains(&p.to_lowercase()))
        {
            return Decision::Drop(DropReason::ReferenceLeakage);
        }
    }
    Decision::Keep
}
