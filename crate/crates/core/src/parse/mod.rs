//! Structured extraction from raw critique text.
//!
//! Pointwise critiques end with a dictionary fragment carrying per-dimension
//! scores and the overall score (`{'Overall Score': 7}` /
//! `{'综合得分': 7}`). Pairwise critiques end with a comparison fragment
//! (`{'Overall Comparison Result': 'Assistant 1'}`) or a bracket verdict
//! (`[[1]]`, `[[2]]`, `[[Tie]]`). When a text carries several fragments the
//! last one holding the relevant key wins, so pointwise fragments quoted
//! inside a comparison never shadow its verdict.

mod filter;
mod fragment;
mod queries;
mod swap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    Critique, CritiquePath, EvalSetting, Grounding, Locale, PairwiseCritique, PointwiseCritique,
    ScoreScale, Task, Verdict,
};
use fragment::{brace_groups, parse_entries, BraceGroup};

pub use filter::{rule_filter, strip_verdict_markup, Decision, DropReason, FilterPolicy};
pub use queries::{parse_augmented_queries, AugmentedQuery};
pub use swap::swap_assistant_labels;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no terminal fragment found")]
    NoTerminalFragment,
    #[error("malformed fragment: {0}")]
    MalformedFragment(String),
    #[error("score {score} outside {min}..={max}")]
    ScoreOutOfRange { score: i32, min: i32, max: i32 },
    #[error("no verdict found")]
    NoVerdict,
    #[error("fragment says {fragment:?} but bracket verdict says {bracket:?}")]
    AmbiguousVerdict { fragment: Verdict, bracket: Verdict },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseOutcome {
    pub result: Critique,
    pub warnings: Vec<String>,
}

impl ParseOutcome {
    pub fn pointwise(&self) -> Option<&PointwiseCritique> {
        match &self.result {
            Critique::Pointwise(c) => Some(c),
            Critique::Pairwise(_) => None,
        }
    }

    pub fn pairwise(&self) -> Option<&PairwiseCritique> {
        match &self.result {
            Critique::Pairwise(c) => Some(c),
            Critique::Pointwise(_) => None,
        }
    }
}

/// Last brace group mentioning `key`. Errors when a later, never-closed
/// brace mentions it, since that is the real terminal fragment.
fn last_fragment_with<'a>(raw: &'a str, key: &str) -> Result<Option<BraceGroup<'a>>, ParseError> {
    let (groups, unclosed) = brace_groups(raw);
    let last = groups.into_iter().rev().find(|g| g.body.contains(key));
    if let Some(open) = unclosed {
        let after_last = last.as_ref().is_none_or(|g| open > g.start);
        if after_last && raw[open..].contains(key) {
            return Err(ParseError::MalformedFragment("unbalanced braces".into()));
        }
    }
    Ok(last)
}

/// Read a pointwise critique.
pub fn parse_pointwise(
    raw: &str,
    scale: ScoreScale,
    locale: Locale,
    grounding: Grounding,
) -> Result<ParseOutcome, ParseError> {
    let key = locale.overall_key();
    let fragment = last_fragment_with(raw, key)?.ok_or(ParseError::NoTerminalFragment)?;
    let entries = parse_entries(fragment.body).map_err(ParseError::MalformedFragment)?;

    let mut warnings = Vec::new();
    let mut dimension_scores = IndexMap::new();
    let mut overall = None;
    for (name, value) in entries {
        match value.as_int() {
            Some(score) => {
                if name == key {
                    overall = Some(score);
                } else if !scale.contains(score) {
                    warnings.push(format!("dimension {name:?} score {score} outside scale"));
                }
                dimension_scores.insert(name, score);
            }
            None if name == key => {
                return Err(ParseError::MalformedFragment(format!(
                    "overall score {:?} is not an integer",
                    value.text()
                )))
            }
            None => warnings.push(format!(
                "dimension {name:?} has non-integer value {:?}",
                value.text()
            )),
        }
    }
    let overall_score =
        overall.ok_or_else(|| ParseError::MalformedFragment(format!("missing key {key:?}")))?;
    if !scale.contains(overall_score) {
        return Err(ParseError::ScoreOutOfRange {
            score: overall_score,
            min: scale.min,
            max: scale.max,
        });
    }
    Ok(ParseOutcome {
        result: Critique::Pointwise(PointwiseCritique {
            dimension_scores,
            overall_score,
            explanation: raw.to_string(),
            setting: EvalSetting {
                task: Task::Pointwise,
                grounding,
            },
        }),
        warnings,
    })
}

fn label_to_verdict(label: &str, locale: Locale) -> Option<Verdict> {
    let label = label.trim();
    Verdict::ALL.into_iter().find(|&v| {
        let expected = locale.verdict_label(v);
        match locale {
            Locale::En => expected.eq_ignore_ascii_case(label),
            Locale::Zh => expected == label,
        }
    })
}

/// Last `[[1]]` / `[[2]]` / `[[Tie]]` marker.
fn last_bracket_verdict(raw: &str) -> Option<Verdict> {
    let mut found = None;
    let mut rest = raw;
    while let Some(open) = rest.find("[[") {
        let after = &rest[open + 2..];
        let Some(close) = after.find("]]") else { break };
        let verdict = match after[..close].trim() {
            "1" => Some(Verdict::Win1),
            "2" => Some(Verdict::Win2),
            t if t.eq_ignore_ascii_case("tie") => Some(Verdict::Tie),
            _ => None,
        };
        if verdict.is_some() {
            found = verdict;
        }
        rest = &after[close + 2..];
    }
    found
}

/// Read a pairwise critique. The comparison fragment is preferred and the
/// bracket verdict is the fallback; if both are present they must agree.
pub fn parse_pairwise(
    raw: &str,
    locale: Locale,
    grounding: Grounding,
) -> Result<ParseOutcome, ParseError> {
    let key = locale.comparison_key();
    let mut fragment_verdict = None;
    if let Some(fragment) = last_fragment_with(raw, key)? {
        let entries = parse_entries(fragment.body).map_err(ParseError::MalformedFragment)?;
        let (_, value) = entries
            .iter()
            .rev()
            .find(|(name, _)| name == key)
            .ok_or_else(|| ParseError::MalformedFragment(format!("missing key {key:?}")))?;
        fragment_verdict = Some(label_to_verdict(value.text(), locale).ok_or_else(|| {
            ParseError::MalformedFragment(format!("unknown verdict label {:?}", value.text()))
        })?);
    }
    let bracket_verdict = last_bracket_verdict(raw);
    let verdict = match (fragment_verdict, bracket_verdict) {
        (Some(f), Some(b)) if f != b => {
            return Err(ParseError::AmbiguousVerdict {
                fragment: f,
                bracket: b,
            })
        }
        (Some(v), _) | (None, Some(v)) => v,
        (None, None) => return Err(ParseError::NoVerdict),
    };
    Ok(ParseOutcome {
        result: Critique::Pairwise(PairwiseCritique {
            verdict,
            explanation: raw.to_string(),
            setting: EvalSetting {
                task: Task::Pairwise,
                grounding,
            },
            path: CritiquePath::Direct,
        }),
        warnings: Vec::new(),
    })
}

/// Terminal fragment for a pointwise critique, in fragment order.
pub fn pointwise_fragment(scores: &IndexMap<String, i32>) -> String {
    let body: Vec<String> = scores.iter().map(|(k, v)| format!("'{k}': {v}")).collect();
    format!("{{{}}}", body.join(", "))
}

/// Terminal fragment for a pairwise verdict.
pub fn pairwise_fragment(verdict: Verdict, locale: Locale) -> String {
    format!(
        "{{'{}': '{}'}}",
        locale.comparison_key(),
        locale.verdict_label(verdict)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE7_ZH: &str = "综合得分: 7. 综合考虑以上各个维度，助手的答案整体上是高质量的。\n\n{'事实正确性': 10, '满足用户需求': 7, '逻辑连贯性': 9, '创造性': 8, '丰富度': 7, '综合得分': 7}";

    fn point(raw: &str, locale: Locale) -> Result<PointwiseCritique, ParseError> {
        parse_pointwise(raw, ScoreScale::default(), locale, Grounding::Referenced)
            .map(|o| o.pointwise().cloned().unwrap())
    }

    fn pair(raw: &str, locale: Locale) -> Result<Verdict, ParseError> {
        parse_pairwise(raw, locale, Grounding::ReferenceFree).map(|o| o.pairwise().unwrap().verdict)
    }

    #[test]
    fn chinese_case_fragment() {
        let c = point(TABLE7_ZH, Locale::Zh).unwrap();
        assert_eq!(c.overall_score, 7);
        assert_eq!(c.dimension_scores.len(), 6);
        assert_eq!(c.dimension_scores["事实正确性"], 10);
        assert_eq!(c.explanation, TABLE7_ZH);
    }

    #[test]
    fn quoted_scores_and_double_braces() {
        assert_eq!(
            point("Fine.\n{'Overall Score': '5'}", Locale::En)
                .unwrap()
                .overall_score,
            5
        );
        assert_eq!(
            point("Fine.\n{{'Overall Score': 6}}", Locale::En)
                .unwrap()
                .overall_score,
            6
        );
        assert_eq!(
            point("好。\n{'综合得分'：'8'}", Locale::Zh)
                .unwrap()
                .overall_score,
            8
        );
    }

    #[test]
    fn pointwise_errors() {
        assert_eq!(
            point("no fragment here", Locale::En),
            Err(ParseError::NoTerminalFragment)
        );
        assert!(matches!(
            point("text {'Overall Score': 7", Locale::En),
            Err(ParseError::MalformedFragment(_))
        ));
        assert!(matches!(
            point("text {'Overall Score': 'seven'}", Locale::En),
            Err(ParseError::MalformedFragment(_))
        ));
        assert_eq!(
            point("text {'Overall Score': 12}", Locale::En),
            Err(ParseError::ScoreOutOfRange {
                score: 12,
                min: 1,
                max: 10
            })
        );
        // a fragment for the other locale does not count
        assert_eq!(
            point("text {'Overall Score': 7}", Locale::Zh),
            Err(ParseError::NoTerminalFragment)
        );
    }

    #[test]
    fn last_fragment_wins() {
        let raw = "[Critique]\n{'Overall Score': 3}\nrevised\n{'Overall Score': 8}";
        assert_eq!(point(raw, Locale::En).unwrap().overall_score, 8);
        let p2p = "{'Overall Score': 9} quoted... {'Overall Comparison Result': 'Assistant 2'}";
        assert_eq!(pair(p2p, Locale::En), Ok(Verdict::Win2));
    }

    #[test]
    fn pairwise_fragments_and_brackets() {
        assert_eq!(
            pair("分析……\n{'综合比较结果': '助手1'}", Locale::Zh),
            Ok(Verdict::Win1)
        );
        // the model output in the case table leads with the fragment
        assert_eq!(
            pair("{'综合比较结果': '助手1'}\n\n事实正确性: ……", Locale::Zh),
            Ok(Verdict::Win1)
        );
        assert_eq!(
            pair("因此，我的裁决是：\n\n[[2]]", Locale::Zh),
            Ok(Verdict::Win2)
        );
        assert_eq!(pair("so [[Tie]]", Locale::En), Ok(Verdict::Tie));
        assert_eq!(
            pair("{{'Overall Comparison Result': 'Tie'}}", Locale::En),
            Ok(Verdict::Tie)
        );
        assert_eq!(
            pair(
                "{'Overall Comparison Result': 'Assistant 1'} [[1]]",
                Locale::En
            ),
            Ok(Verdict::Win1)
        );
    }

    #[test]
    fn pairwise_errors() {
        assert_eq!(
            pair(
                "{'Overall Comparison Result': 'Assistant 1'}\n[[2]]",
                Locale::En
            ),
            Err(ParseError::AmbiguousVerdict {
                fragment: Verdict::Win1,
                bracket: Verdict::Win2
            })
        );
        assert_eq!(
            pair("nothing decisive", Locale::En),
            Err(ParseError::NoVerdict)
        );
        assert!(matches!(
            pair("{'Overall Comparison Result': 'Assistant 3'}", Locale::En),
            Err(ParseError::MalformedFragment(_))
        ));
        assert!(matches!(
            pair("{'Overall Comparison Result': 'Assistant 1'", Locale::En),
            Err(ParseError::MalformedFragment(_))
        ));
    }

    #[test]
    fn fragment_rendering_round_trips() {
        for locale in Locale::ALL {
            for v in Verdict::ALL {
                let text = format!("analysis\n{}", pairwise_fragment(v, locale));
                assert_eq!(pair(&text, locale), Ok(v));
            }
            let mut scores = IndexMap::new();
            for (i, d) in locale.default_dimensions().into_iter().enumerate() {
                scores.insert(d, 3 + i as i32);
            }
            let frag = pointwise_fragment(&scores);
            let parsed = point(&format!("x\n{frag}"), locale).unwrap();
            assert_eq!(parsed.dimension_scores, scores);
            assert_eq!(pointwise_fragment(&parsed.dimension_scores), frag);
        }
    }
}
