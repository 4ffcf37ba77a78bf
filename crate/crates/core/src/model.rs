//! Domain types shared by the pipeline, the critique parser and the metrics.
//!
//! Everything here is a plain immutable value: no I/O, no interior
//! mutability, `Send + Sync` by construction.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("query {0}: text is empty")]
    EmptyQueryText(String),
    #[error("query {id}: difficulty {difficulty} is outside 1..=3")]
    DifficultyOutOfRange { id: String, difficulty: u8 },
    #[error("query {id}: category {category:?} is not in the configured category list")]
    UnknownCategory { id: String, category: String },
    #[error("sample {query_id}/{model_id}: generated text is empty")]
    EmptySampleText { query_id: String, model_id: String },
    #[error("pair {0}: samples belong to different queries")]
    PairQueryMismatch(String),
    #[error("pair {0}: both samples come from the same model")]
    PairSameModel(String),
    #[error("unknown evaluation setting tag {0:?}")]
    UnknownSettingTag(String),
    #[error("unknown locale {0:?} (expected zh or en)")]
    UnknownLocale(String),
    #[error("invalid score scale {min}..={max}")]
    InvalidScale { min: i32, max: i32 },
}

/// Prompt/critique language. The Chinese grammar is the original, English
/// is the translated variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Locale {
    Zh,
    En,
}

impl Locale {
    pub const ALL: [Locale; 2] = [Locale::Zh, Locale::En];

    pub fn tag(self) -> &'static str {
        match self {
            Locale::Zh => "zh",
            Locale::En => "en",
        }
    }

    /// Key of the overall score in a pointwise terminal fragment.
    pub fn overall_key(self) -> &'static str {
        match self {
            Locale::Zh => "综合得分",
            Locale::En => "Overall Score",
        }
    }

    /// Key of the verdict in a pairwise terminal fragment.
    pub fn comparison_key(self) -> &'static str {
        match self {
            Locale::Zh => "综合比较结果",
            Locale::En => "Overall Comparison Result",
        }
    }

    /// Fragment value naming a verdict.
    pub fn verdict_label(self, verdict: Verdict) -> &'static str {
        match (self, verdict) {
            (Locale::Zh, Verdict::Win1) => "助手1",
            (Locale::Zh, Verdict::Win2) => "助手2",
            (Locale::Zh, Verdict::Tie) => "质量相当",
            (Locale::En, Verdict::Win1) => "Assistant 1",
            (Locale::En, Verdict::Win2) => "Assistant 2",
            (Locale::En, Verdict::Tie) => "Tie",
        }
    }

    pub fn default_dimensions(self) -> Vec<String> {
        let names: &[&str] = match self {
            Locale::Zh => &[
                "事实正确性",
                "满足用户需求",
                "逻辑连贯性",
                "创造性",
                "丰富度",
                "综合得分",
            ],
            Locale::En => &[
                "Correctness",
                "User Satisfaction",
                "Logical Coherence",
                "Creativity",
                "Richness",
                "Overall Score",
            ],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    /// The ten instruction-following task categories used for query
    /// augmentation.
    pub fn default_categories(self) -> Vec<String> {
        let names: &[&str] = match self {
            Locale::Zh => &[
                "基本任务",
                "中文理解",
                "综合问答",
                "文本写作",
                "数学计算",
                "逻辑推理",
                "角色扮演",
                "专业能力",
                "代码生成",
                "多语言能力",
            ],
            Locale::En => &[
                "Fundamental Language Ability",
                "Advanced Chinese Understanding",
                "Open-ended Questions",
                "Writing Ability",
                "Mathematics",
                "Logical Reasoning",
                "Task-oriented Role Play",
                "Professional Knowledge",
                "Code Generation",
                "Multi-lingual Ability",
            ],
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

impl fmt::Display for Locale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Locale {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zh" => Ok(Locale::Zh),
            "en" => Ok(Locale::En),
            other => Err(ModelError::UnknownLocale(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Seed,
    Augmented,
}

/// A user instruction with its task category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<u8>,
    pub origin: Origin,
}

impl Query {
    pub fn validate(&self, categories: &[String]) -> Result<(), ModelError> {
        if self.text.trim().is_empty() {
            return Err(ModelError::EmptyQueryText(self.id.clone()));
        }
        if let Some(d) = self.difficulty {
            if !(1..=3).contains(&d) {
                return Err(ModelError::DifficultyOutOfRange {
                    id: self.id.clone(),
                    difficulty: d,
                });
            }
        }
        if !categories.iter().any(|c| c == &self.category) {
            return Err(ModelError::UnknownCategory {
                id: self.id.clone(),
                category: self.category.clone(),
            });
        }
        Ok(())
    }
}

/// One generated response to a query, optionally paired with a reference.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EvalSample {
    pub query_id: String,
    pub model_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

impl EvalSample {
    /// Stable identifier `query_id::model_id`.
    pub fn key(&self) -> String {
        format!("{}::{}", self.query_id, self.model_id)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.text.trim().is_empty() {
            return Err(ModelError::EmptySampleText {
                query_id: self.query_id.clone(),
                model_id: self.model_id.clone(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    Pointwise,
    Pairwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Grounding {
    Referenced,
    ReferenceFree,
}

/// Task x grounding. All four combinations are legal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EvalSetting {
    pub task: Task,
    pub grounding: Grounding,
}

impl EvalSetting {
    pub const POINT_R: EvalSetting = EvalSetting {
        task: Task::Pointwise,
        grounding: Grounding::Referenced,
    };
    pub const POINT_RF: EvalSetting = EvalSetting {
        task: Task::Pointwise,
        grounding: Grounding::ReferenceFree,
    };
    pub const PAIR_R: EvalSetting = EvalSetting {
        task: Task::Pairwise,
        grounding: Grounding::Referenced,
    };
    pub const PAIR_RF: EvalSetting = EvalSetting {
        task: Task::Pairwise,
        grounding: Grounding::ReferenceFree,
    };

    pub const ALL: [EvalSetting; 4] = [Self::POINT_R, Self::POINT_RF, Self::PAIR_R, Self::PAIR_RF];

    /// On-disk tag: `point_r`, `point_rf`, `pair_r`, `pair_rf`.
    pub fn tag(self) -> &'static str {
        match (self.task, self.grounding) {
            (Task::Pointwise, Grounding::Referenced) => "point_r",
            (Task::Pointwise, Grounding::ReferenceFree) => "point_rf",
            (Task::Pairwise, Grounding::Referenced) => "pair_r",
            (Task::Pairwise, Grounding::ReferenceFree) => "pair_rf",
        }
    }

    pub fn is_referenced(self) -> bool {
        self.grounding == Grounding::Referenced
    }
}

impl fmt::Display for EvalSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for EvalSetting {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EvalSetting::ALL
            .into_iter()
            .find(|setting| setting.tag() == s)
            .ok_or_else(|| ModelError::UnknownSettingTag(s.to_string()))
    }
}

impl Serialize for EvalSetting {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.tag())
    }
}

impl<'de> Deserialize<'de> for EvalSetting {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let tag = String::deserialize(deserializer)?;
        tag.parse().map_err(serde::de::Error::custom)
    }
}

/// Pairwise comparison label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Verdict {
    Win1,
    Win2,
    Tie,
}

impl Verdict {
    pub const ALL: [Verdict; 3] = [Verdict::Win1, Verdict::Win2, Verdict::Tie];

    /// The same judgment expressed with the two texts exchanged.
    pub fn mirror(self) -> Verdict {
        match self {
            Verdict::Win1 => Verdict::Win2,
            Verdict::Win2 => Verdict::Win1,
            Verdict::Tie => Verdict::Tie,
        }
    }
}

/// Inclusive bounds of the overall score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreScale {
    pub min: i32,
    pub max: i32,
}

impl ScoreScale {
    pub fn new(min: i32, max: i32) -> Result<Self, ModelError> {
        if min >= max {
            return Err(ModelError::InvalidScale { min, max });
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, score: i32) -> bool {
        (self.min..=self.max).contains(&score)
    }

    pub fn clamp(&self, score: i32) -> i32 {
        score.clamp(self.min, self.max)
    }
}

impl Default for ScoreScale {
    fn default() -> Self {
        Self { min: 1, max: 10 }
    }
}

/// Which prompting route produced a pairwise critique.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CritiquePath {
    Path1,
    Path2,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointwiseCritique {
    /// Every key-value entry of the terminal fragment, in order.
    pub dimension_scores: IndexMap<String, i32>,
    pub overall_score: i32,
    /// The full critique text, terminal fragment included.
    pub explanation: String,
    pub setting: EvalSetting,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairwiseCritique {
    pub verdict: Verdict,
    pub explanation: String,
    pub setting: EvalSetting,
    pub path: CritiquePath,
}

/// Either kind of critique.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Critique {
    Pointwise(PointwiseCritique),
    Pairwise(PairwiseCritique),
}

impl Critique {
    pub fn explanation(&self) -> &str {
        match self {
            Critique::Pointwise(c) => &c.explanation,
            Critique::Pairwise(c) => &c.explanation,
        }
    }

    pub fn setting(&self) -> EvalSetting {
        match self {
            Critique::Pointwise(c) => c.setting,
            Critique::Pairwise(c) => c.setting,
        }
    }
}

/// Two responses to the same query, optionally carrying a human label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    pub sample_1: EvalSample,
    pub sample_2: EvalSample,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_label: Option<Verdict>,
}

impl PairRecord {
    pub fn new(
        sample_1: EvalSample,
        sample_2: EvalSample,
        reference: Option<String>,
        human_label: Option<Verdict>,
    ) -> Result<Self, ModelError> {
        let query_id = sample_1.query_id.clone();
        if sample_2.query_id != query_id {
            return Err(ModelError::PairQueryMismatch(query_id));
        }
        if sample_1.model_id == sample_2.model_id {
            return Err(ModelError::PairSameModel(query_id));
        }
        Ok(Self {
            query_id,
            reference,
            sample_1,
            sample_2,
            human_label,
        })
    }

    /// `query_id::model_1~model_2`
    pub fn pair_id(&self) -> String {
        format!(
            "{}::{}~{}",
            self.query_id, self.sample_1.model_id, self.sample_2.model_id
        )
    }
}

/// Exchange the two samples and mirror the human label.
pub fn swap_pair(record: PairRecord) -> PairRecord {
    PairRecord {
        query_id: record.query_id,
        reference: record.reference,
        sample_1: record.sample_2,
        sample_2: record.sample_1,
        human_label: record.human_label.map(Verdict::mirror),
    }
}

/// One supervised fine-tuning example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub setting: EvalSetting,
    pub input_prompt: String,
    pub target: String,
    pub swap_augmented: bool,
}

/// Pairwise label implied by two pointwise scores on the same scale.
pub fn derive_pairwise_label(score_1: i32, score_2: i32, tie_margin: u32) -> Verdict {
    let diff = i64::from(score_1) - i64::from(score_2);
    let margin = i64::from(tie_margin);
    if diff > margin {
        Verdict::Win1
    } else if -diff > margin {
        Verdict::Win2
    } else {
        Verdict::Tie
    }
}
