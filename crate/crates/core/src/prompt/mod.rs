//! Bilingual prompt rendering over versioned template assets.
//!
//! Builtin templates are compiled in from `templates/v1/{zh,en}`. A directory
//! laid out as `<dir>/<locale>/<kind>.txt` overrides individual files.

mod template;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    Critique, Grounding, Locale, PairwiseCritique, PointwiseCritique, ScoreScale, Task,
};

pub use template::Template;

pub const TEMPLATE_VERSION: &str = "v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("template {template}: {reason} at byte {offset}")]
    TemplateSyntax {
        template: String,
        offset: usize,
        reason: String,
    },
    #[error("template {template}: no value for placeholder {{{slot}}}")]
    MissingValue { template: String, slot: String },
    #[error("template {template}: unknown placeholder {{{slot}}}")]
    UnknownSlot { template: String, slot: String },
    #[error("template {template}: required placeholder {{{slot}}} is absent")]
    MissingSlot { template: String, slot: String },
    #[error("reference-free template {template} contains reference delimiter {delimiter:?}")]
    ReferenceDelimiter { template: String, delimiter: String },
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
    #[error("a reference answer is required")]
    MissingReference,
    #[error("dimension list is empty")]
    MissingDimensions,
    #[error("critique grounding {found:?} does not match the {expected:?} prompt")]
    GroundingMismatch {
        expected: Grounding,
        found: Grounding,
    },
    #[error("critique is already reference-free")]
    AlreadyReferenceFree,
    #[error("at least one seed example is required")]
    EmptySeeds,
    #[error("expected {expected} items, got {found}")]
    ArityError { expected: usize, found: usize },
    #[error("critiques do not address the same evaluation input: {0}")]
    MismatchedInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    PointR,
    P2pR,
    P2pRf,
    R2rfPoint,
    R2rfPair,
    QueryGen,
    Difficulty,
    CritiqueQuality,
    Refine,
    SftPointR,
    SftPointRf,
    SftPairR,
    SftPairRf,
}

const CRITIQUE_1_R: &str = "Referenced Pointwise Grading Critique for Generated Text 1";
const CRITIQUE_2_R: &str = "Referenced Pointwise Grading Critique for Generated Text 2";
const CRITIQUE_1_RF: &str = "Reference-Free Pointwise Grading Critique for Generated Text 1";
const CRITIQUE_2_RF: &str = "Reference-Free Pointwise Grading Critique for Generated Text 2";
const CRITIQUE_POINT_R: &str = "Referenced Pointwise Grading Critique for Generated Text";
const CRITIQUE_PAIR_R: &str = "Referenced Pairwise Comparison Critique for Generated Text 1&2";

impl PromptKind {
    pub const ALL: [PromptKind; 13] = [
        PromptKind::PointR,
        PromptKind::P2pR,
        PromptKind::P2pRf,
        PromptKind::R2rfPoint,
        PromptKind::R2rfPair,
        PromptKind::QueryGen,
        PromptKind::Difficulty,
        PromptKind::CritiqueQuality,
        PromptKind::Refine,
        PromptKind::SftPointR,
        PromptKind::SftPointRf,
        PromptKind::SftPairR,
        PromptKind::SftPairRf,
    ];

    pub fn file_stem(self) -> &'static str {
        match self {
            PromptKind::PointR => "point_r",
            PromptKind::P2pR => "p2p_r",
            PromptKind::P2pRf => "p2p_rf",
            PromptKind::R2rfPoint => "r2rf_point",
            PromptKind::R2rfPair => "r2rf_pair",
            PromptKind::QueryGen => "query_gen",
            PromptKind::Difficulty => "difficulty",
            PromptKind::CritiqueQuality => "critique_quality",
            PromptKind::Refine => "refine",
            PromptKind::SftPointR => "sft_point_r",
            PromptKind::SftPointRf => "sft_point_rf",
            PromptKind::SftPairR => "sft_pair_r",
            PromptKind::SftPairRf => "sft_pair_rf",
        }
    }

    /// Templates that must never show the judge a reference answer.
    pub fn is_reference_free(self) -> bool {
        matches!(
            self,
            PromptKind::P2pRf
                | PromptKind::SftPointRf
                | PromptKind::SftPairRf
                | PromptKind::QueryGen
                | PromptKind::Difficulty
                | PromptKind::Refine
        )
    }

    /// (placeholder, required) pairs accepted by this kind.
    fn slots(self) -> &'static [(&'static str, bool)] {
        match self {
            PromptKind::PointR | PromptKind::SftPointR => &[
                ("Question", true),
                ("Reference", true),
                ("Generated Text", true),
                ("Score Format", true),
                ("Dimension", false),
                ("Scale Min", false),
                ("Scale Max", false),
            ],
            PromptKind::SftPointRf => &[
                ("Question", true),
                ("Generated Text", true),
                ("Score Format", true),
                ("Dimension", false),
                ("Scale Min", false),
                ("Scale Max", false),
            ],
            PromptKind::P2pR => &[
                ("Question", true),
                ("Reference", true),
                ("Generated Text 1", true),
                ("Generated Text 2", true),
                (CRITIQUE_1_R, true),
                (CRITIQUE_2_R, true),
                ("Dimension", false),
            ],
            PromptKind::P2pRf => &[
                ("Question", true),
                ("Generated Text 1", true),
                ("Generated Text 2", true),
                (CRITIQUE_1_RF, true),
                (CRITIQUE_2_RF, true),
                ("Dimension", false),
            ],
            PromptKind::R2rfPoint => &[
                ("Question", true),
                ("Reference", true),
                ("Generated Text", true),
                (CRITIQUE_POINT_R, true),
            ],
            PromptKind::R2rfPair => &[
                ("Question", true),
                ("Reference", true),
                ("Generated Text 1", true),
                ("Generated Text 2", true),
                (CRITIQUE_PAIR_R, true),
            ],
            PromptKind::QueryGen => &[
                ("Examples", true),
                ("Count", false),
                ("Example Annotations", false),
                ("Example Category", false),
                ("Category Count", false),
                ("Categories", false),
            ],
            PromptKind::Difficulty => &[("Queries", true)],
            PromptKind::CritiqueQuality => &[
                ("Evaluation Input", true),
                ("Critique 1", true),
                ("Critique 2", true),
            ],
            PromptKind::Refine => &[
                ("Question", true),
                ("Original Response", true),
                ("Critique", true),
            ],
            PromptKind::SftPairR => &[
                ("Question", true),
                ("Reference", true),
                ("Generated Text 1", true),
                ("Generated Text 2", true),
                ("Dimension", false),
            ],
            PromptKind::SftPairRf => &[
                ("Question", true),
                ("Generated Text 1", true),
                ("Generated Text 2", true),
                ("Dimension", false),
            ],
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_stem())
    }
}

impl FromStr for PromptKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptKind::ALL
            .into_iter()
            .find(|k| k.file_stem() == s)
            .ok_or_else(|| format!("unknown prompt kind {s:?}"))
    }
}

/// Delimiters that mark a reference-answer block.
pub fn reference_delimiters(locale: Locale) -> [&'static str; 2] {
    match locale {
        Locale::Zh => ["[参考答案开始]", "[参考答案结束]"],
        Locale::En => ["[Reference Answer Begin]", "[Reference Answer End]"],
    }
}

macro_rules! builtin_sources {
    ($locale:literal) => {
        [
            (
                PromptKind::PointR,
                include_str!(concat!("../../templates/v1/", $locale, "/point_r.txt")),
            ),
            (
                PromptKind::P2pR,
                include_str!(concat!("../../templates/v1/", $locale, "/p2p_r.txt")),
            ),
            (
                PromptKind::P2pRf,
                include_str!(concat!("../../templates/v1/", $locale, "/p2p_rf.txt")),
            ),
            (
                PromptKind::R2rfPoint,
                include_str!(concat!("../../templates/v1/", $locale, "/r2rf_point.txt")),
            ),
            (
                PromptKind::R2rfPair,
                include_str!(concat!("../../templates/v1/", $locale, "/r2rf_pair.txt")),
            ),
            (
                PromptKind::QueryGen,
                include_str!(concat!("../../templates/v1/", $locale, "/query_gen.txt")),
            ),
            (
                PromptKind::Difficulty,
                include_str!(concat!("../../templates/v1/", $locale, "/difficulty.txt")),
            ),
            (
                PromptKind::CritiqueQuality,
                include_str!(concat!(
                    "../../templates/v1/",
                    $locale,
                    "/critique_quality.txt"
                )),
            ),
            (
                PromptKind::Refine,
                include_str!(concat!("../../templates/v1/", $locale, "/refine.txt")),
            ),
            (
                PromptKind::SftPointR,
                include_str!(concat!("../../templates/v1/", $locale, "/sft_point_r.txt")),
            ),
            (
                PromptKind::SftPointRf,
                include_str!(concat!("../../templates/v1/", $locale, "/sft_point_rf.txt")),
            ),
            (
                PromptKind::SftPairR,
                include_str!(concat!("../../templates/v1/", $locale, "/sft_pair_r.txt")),
            ),
            (
                PromptKind::SftPairRf,
                include_str!(concat!("../../templates/v1/", $locale, "/sft_pair_rf.txt")),
            ),
        ]
    };
}

fn builtin_source(locale: Locale, kind: PromptKind) -> &'static str {
    let table = match locale {
        Locale::Zh => builtin_sources!("zh"),
        Locale::En => builtin_sources!("en"),
    };
    table
        .into_iter()
        .find(|(k, _)| *k == kind)
        .map(|(_, s)| s)
        .expect("every kind has a builtin")
}

fn compile(locale: Locale, kind: PromptKind, source: &str) -> Result<Template, PromptError> {
    let name = format!("{TEMPLATE_VERSION}/{locale}/{}", kind.file_stem());
    let source = source.strip_suffix('\n').unwrap_or(source);
    let template = Template::parse(&name, source)?;
    let allowed = kind.slots();
    for slot in template.slots() {
        if !allowed.iter().any(|(n, _)| *n == slot) {
            return Err(PromptError::UnknownSlot {
                template: name,
                slot: slot.to_string(),
            });
        }
    }
    for (slot, required) in allowed {
        if *required && !template.slots().any(|s| s == *slot) {
            return Err(PromptError::MissingSlot {
                template: name,
                slot: slot.to_string(),
            });
        }
    }
    if kind.is_reference_free() {
        let literal = template.literal_text();
        for delimiter in Locale::ALL.into_iter().flat_map(reference_delimiters) {
            if literal.contains(delimiter) {
                return Err(PromptError::ReferenceDelimiter {
                    template: name,
                    delimiter: delimiter.to_string(),
                });
            }
        }
    }
    Ok(template)
}

/// A prompt recognized by [`PromptKit::identify`], with its placeholder values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Identified {
    pub kind: PromptKind,
    pub locale: Locale,
    pub fields: Vec<(String, String)>,
}

impl Identified {
    pub fn field(&self, name: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.as_str())
    }
}

/// A rendered prompt with policy warnings attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    pub warnings: Vec<String>,
}

/// What a critique under judgment was evaluating.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalInput {
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    /// One response for pointwise grading, two for pairwise comparison.
    pub samples: Vec<String>,
}

/// Inputs to the reference-removal rewrite.
#[derive(Debug, Clone, Copy)]
pub enum R2rfPayload<'a> {
    Point {
        sample: &'a str,
        critique: &'a PointwiseCritique,
    },
    Pair {
        sample_1: &'a str,
        sample_2: &'a str,
        critique: &'a PairwiseCritique,
    },
}

#[derive(Debug, Clone)]
pub struct PromptKit {
    locale: Locale,
    scale: ScoreScale,
    categories: Vec<String>,
    templates: BTreeMap<PromptKind, Template>,
}

impl PromptKit {
    pub fn builtin(locale: Locale) -> Self {
        Self::load(locale, None).expect("builtin templates are valid")
    }

    /// Builtin templates with any files found under `override_dir/<locale>/`
    /// replacing their counterparts.
    pub fn load(locale: Locale, override_dir: Option<&Path>) -> Result<Self, PromptError> {
        let mut templates = BTreeMap::new();
        for kind in PromptKind::ALL {
            let path = override_dir.map(|d| {
                d.join(locale.tag())
                    .join(format!("{}.txt", kind.file_stem()))
            });
            let template = match path.filter(|p| p.exists()) {
                Some(p) => {
                    let source = std::fs::read_to_string(&p).map_err(|e| PromptError::Io {
                        path: p.display().to_string(),
                        message: e.to_string(),
                    })?;
                    compile(locale, kind, &source)?
                }
                None => compile(locale, kind, builtin_source(locale, kind))?,
            };
            templates.insert(kind, template);
        }
        Ok(Self {
            locale,
            scale: ScoreScale::default(),
            categories: locale.default_categories(),
            templates,
        })
    }

    pub fn with_scale(mut self, scale: ScoreScale) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_categories(mut self, categories: Vec<String>) -> Self {
        self.categories = categories;
        self
    }

    pub fn locale(&self) -> Locale {
        self.locale
    }

    pub fn scale(&self) -> ScoreScale {
        self.scale
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn template(&self, kind: PromptKind) -> &Template {
        &self.templates[&kind]
    }

    /// Hex digest over locale, scale, categories and every template, so a
    /// run manifest notices edited prompt assets.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(format!(
            "{TEMPLATE_VERSION}|{}|{}..={}|",
            self.locale, self.scale.min, self.scale.max
        ));
        for c in &self.categories {
            h.update(c.as_bytes());
            h.update([0u8]);
        }
        for (kind, t) in &self.templates {
            h.update(kind.file_stem().as_bytes());
            for slot in t.slots() {
                h.update(slot.as_bytes());
                h.update([1u8]);
            }
            h.update(t.literal_text().as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    /// Recognize a prompt rendered by this kit. When several templates fit,
    /// the one with the most literal text wins.
    pub fn identify(&self, text: &str) -> Option<Identified> {
        self.templates
            .iter()
            .filter_map(|(kind, t)| {
                t.extract(text)
                    .map(|fields| (t.literal_text().len(), *kind, fields))
            })
            .max_by_key(|(len, _, _)| *len)
            .map(|(_, kind, fields)| Identified {
                kind,
                locale: self.locale,
                fields,
            })
    }

    fn dimension_joiner(&self) -> &'static str {
        match self.locale {
            Locale::Zh => "、",
            Locale::En => ", ",
        }
    }

    /// Dimension names joined for display, overall key excluded.
    pub fn dimension_list(&self, dimensions: &[String]) -> String {
        let overall = self.locale.overall_key();
        dimensions
            .iter()
            .filter(|d| d.as_str() != overall)
            .cloned()
            .collect::<Vec<_>>()
            .join(self.dimension_joiner())
    }

    /// Inverse of [`dimension_list`](Self::dimension_list).
    pub fn split_dimension_list(&self, list: &str) -> Vec<String> {
        list.split(self.dimension_joiner())
            .map(str::trim)
            .filter(|d| !d.is_empty())
            .map(String::from)
            .collect()
    }

    /// `{'dim': score, ..., 'overall': score}` as shown to the judge.
    pub fn score_format(&self, dimensions: &[String]) -> String {
        let overall = self.locale.overall_key();
        let word = match self.locale {
            Locale::Zh => "分数",
            Locale::En => "score",
        };
        let mut keys: Vec<&str> = dimensions
            .iter()
            .map(String::as_str)
            .filter(|d| *d != overall)
            .collect();
        keys.push(overall);
        let body: Vec<String> = keys.iter().map(|k| format!("'{k}': {word}")).collect();
        format!("{{{}}}", body.join(", "))
    }

    fn point_values(
        &self,
        dimensions: &[String],
        owned: &mut Vec<String>,
    ) -> Result<(), PromptError> {
        if dimensions.is_empty() {
            return Err(PromptError::MissingDimensions);
        }
        owned.push(self.dimension_list(dimensions));
        owned.push(self.score_format(dimensions));
        owned.push(self.scale.min.to_string());
        owned.push(self.scale.max.to_string());
        Ok(())
    }

    pub fn render_referenced_pointwise(
        &self,
        query: &str,
        reference: Option<&str>,
        sample: &str,
        dimensions: &[String],
    ) -> Result<String, PromptError> {
        let reference = require_reference(reference)?;
        let mut owned = Vec::new();
        self.point_values(dimensions, &mut owned)?;
        self.template(PromptKind::PointR).render(&[
            ("Question", query),
            ("Reference", reference),
            ("Generated Text", sample),
            ("Dimension", &owned[0]),
            ("Score Format", &owned[1]),
            ("Scale Min", &owned[2]),
            ("Scale Max", &owned[3]),
        ])
    }

    /// Pointwise-to-pairwise prompt. The referenced variant is chosen when a
    /// reference is supplied, and both critiques must match that grounding.
    #[allow(clippy::too_many_arguments)]
    pub fn render_p2p(
        &self,
        query: &str,
        reference: Option<&str>,
        sample_1: &str,
        sample_2: &str,
        critique_1: &PointwiseCritique,
        critique_2: &PointwiseCritique,
        dimensions: &[String],
    ) -> Result<String, PromptError> {
        let expected = if reference.is_some() {
            Grounding::Referenced
        } else {
            Grounding::ReferenceFree
        };
        for c in [critique_1, critique_2] {
            if c.setting.grounding != expected {
                return Err(PromptError::GroundingMismatch {
                    expected,
                    found: c.setting.grounding,
                });
            }
        }
        let dims = self.dimension_list(dimensions);
        match reference {
            Some(r) => self.template(PromptKind::P2pR).render(&[
                ("Question", query),
                ("Reference", r),
                ("Generated Text 1", sample_1),
                ("Generated Text 2", sample_2),
                (CRITIQUE_1_R, &critique_1.explanation),
                (CRITIQUE_2_R, &critique_2.explanation),
                ("Dimension", &dims),
            ]),
            None => self.template(PromptKind::P2pRf).render(&[
                ("Question", query),
                ("Generated Text 1", sample_1),
                ("Generated Text 2", sample_2),
                (CRITIQUE_1_RF, &critique_1.explanation),
                (CRITIQUE_2_RF, &critique_2.explanation),
                ("Dimension", &dims),
            ]),
        }
    }

    pub fn render_r2rf(
        &self,
        query: &str,
        reference: Option<&str>,
        payload: R2rfPayload<'_>,
    ) -> Result<String, PromptError> {
        let grounding = match payload {
            R2rfPayload::Point { critique, .. } => critique.setting.grounding,
            R2rfPayload::Pair { critique, .. } => critique.setting.grounding,
        };
        if grounding == Grounding::ReferenceFree {
            return Err(PromptError::AlreadyReferenceFree);
        }
        let reference = require_reference(reference)?;
        match payload {
            R2rfPayload::Point { sample, critique } => {
                self.template(PromptKind::R2rfPoint).render(&[
                    ("Question", query),
                    ("Reference", reference),
                    ("Generated Text", sample),
                    (CRITIQUE_POINT_R, &critique.explanation),
                ])
            }
            R2rfPayload::Pair {
                sample_1,
                sample_2,
                critique,
            } => self.template(PromptKind::R2rfPair).render(&[
                ("Question", query),
                ("Reference", reference),
                ("Generated Text 1", sample_1),
                ("Generated Text 2", sample_2),
                (CRITIQUE_PAIR_R, &critique.explanation),
            ]),
        }
    }

    /// Query expansion prompt asking for `count` new queries.
    pub fn render_query_generation(
        &self,
        seeds: &[(String, String)],
        count: usize,
    ) -> Result<String, PromptError> {
        if seeds.is_empty() {
            return Err(PromptError::EmptySeeds);
        }
        let examples: Vec<String> = seeds
            .iter()
            .enumerate()
            .map(|(i, (text, _))| format!("{}.{}", i + 1, one_line(text)))
            .collect();
        let annotations: Vec<String> = seeds
            .iter()
            .map(|(text, cat)| format!("@@{}@@ &&{}&&", one_line(text), cat))
            .collect();
        let categories: Vec<String> = self
            .categories
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {c}", i + 1))
            .collect();
        let example_category = self
            .categories
            .first()
            .map(String::as_str)
            .unwrap_or_default();
        self.template(PromptKind::QueryGen).render(&[
            ("Examples", &examples.join("\n\n")),
            ("Example Annotations", &annotations.join("\n\n")),
            ("Categories", &categories.join("\n")),
            ("Category Count", &self.categories.len().to_string()),
            ("Example Category", example_category),
            ("Count", &count.to_string()),
        ])
    }

    /// Difficulty rating prompt for exactly three `(text, category)` queries.
    /// Line breaks inside a query are flattened so the line grammar holds.
    pub fn render_difficulty_scoring(
        &self,
        queries: &[(String, String)],
    ) -> Result<String, PromptError> {
        if queries.len() != 3 {
            return Err(PromptError::ArityError {
                expected: 3,
                found: queries.len(),
            });
        }
        let lines: Vec<String> = queries
            .iter()
            .enumerate()
            .map(|(i, (text, cat))| format!("{}.@@{}@@&&{}&&", i + 1, one_line(text), cat))
            .collect();
        self.template(PromptKind::Difficulty)
            .render(&[("Queries", &lines.join("\n"))])
    }

    fn eval_input_block(&self, input: &EvalInput) -> String {
        let (question, answer) = match self.locale {
            Locale::Zh => ("用户的提问：", ["[助手的答案开始]", "[助手的答案结束]"]),
            Locale::En => (
                "The user's query: ",
                [
                    "[AI Assistant’s Answer Begin]",
                    "[AI Assistant’s Answer End]",
                ],
            ),
        };
        let mut out = format!("{question}{}", input.query);
        if let Some(r) = &input.reference {
            let [open, close] = reference_delimiters(self.locale);
            out.push_str(&format!("\n\n{open}\n{r}\n{close}"));
        }
        if input.samples.len() == 1 {
            out.push_str(&format!(
                "\n\n{}\n{}\n{}",
                answer[0], input.samples[0], answer[1]
            ));
        } else {
            for (i, s) in input.samples.iter().enumerate() {
                let n = i + 1;
                let (open, close) = match self.locale {
                    Locale::Zh => (
                        format!("[助手{n}的答案开始]"),
                        format!("[助手{n}的答案结束]"),
                    ),
                    Locale::En => (
                        format!("[Assistant {n}'s Answer Begin]"),
                        format!("[Assistant {n}'s Answer End]"),
                    ),
                };
                out.push_str(&format!("\n\n{open}\n{s}\n{close}"));
            }
        }
        out
    }

    /// Ask a strong judge which of two critiques of the same input is better.
    pub fn render_critique_quality_judgment(
        &self,
        input: &EvalInput,
        critique_a: &Critique,
        critique_b: &Critique,
    ) -> Result<String, PromptError> {
        let (sa, sb) = (critique_a.setting(), critique_b.setting());
        if sa != sb {
            return Err(PromptError::MismatchedInput(format!(
                "settings differ: {sa} vs {sb}"
            )));
        }
        let expected = match sa.task {
            Task::Pointwise => 1,
            Task::Pairwise => 2,
        };
        if input.samples.len() != expected {
            return Err(PromptError::MismatchedInput(format!(
                "{sa} critiques need {expected} response(s), input has {}",
                input.samples.len()
            )));
        }
        if sa.is_referenced() && input.reference.is_none() {
            return Err(PromptError::MismatchedInput(
                "referenced critiques without a reference".into(),
            ));
        }
        self.template(PromptKind::CritiqueQuality).render(&[
            ("Evaluation Input", &self.eval_input_block(input)),
            ("Critique 1", critique_a.explanation()),
            ("Critique 2", critique_b.explanation()),
        ])
    }

    /// Ask the generator to revise its response given a critique. A
    /// referenced critique is accepted but flagged.
    pub fn render_refine_with_critique(
        &self,
        query: &str,
        response: &str,
        critique: &Critique,
    ) -> Rendered {
        let mut warnings = Vec::new();
        if critique.setting().is_referenced() {
            warnings.push(format!(
                "refining with a {} critique; reference-free critiques are expected",
                critique.setting()
            ));
        }
        let text = self
            .template(PromptKind::Refine)
            .render(&[
                ("Question", query),
                ("Original Response", response),
                ("Critique", critique.explanation()),
            ])
            .expect("refine slots validated at load");
        Rendered { text, warnings }
    }

    /// Training input for one of the four evaluation settings. The
    /// reference is ignored for reference-free settings.
    pub fn render_sft_input(
        &self,
        setting: crate::model::EvalSetting,
        query: &str,
        reference: Option<&str>,
        samples: &[&str],
        dimensions: &[String],
    ) -> Result<String, PromptError> {
        let expected = match setting.task {
            Task::Pointwise => 1,
            Task::Pairwise => 2,
        };
        if samples.len() != expected {
            return Err(PromptError::ArityError {
                expected,
                found: samples.len(),
            });
        }
        let reference = if setting.is_referenced() {
            require_reference(reference)?
        } else {
            ""
        };
        let mut owned = Vec::new();
        self.point_values(dimensions, &mut owned)?;
        let kind = match (setting.task, setting.grounding) {
            (Task::Pointwise, Grounding::Referenced) => PromptKind::SftPointR,
            (Task::Pointwise, Grounding::ReferenceFree) => PromptKind::SftPointRf,
            (Task::Pairwise, Grounding::Referenced) => PromptKind::SftPairR,
            (Task::Pairwise, Grounding::ReferenceFree) => PromptKind::SftPairRf,
        };
        let mut values = vec![
            ("Question", query),
            ("Reference", reference),
            ("Dimension", owned[0].as_str()),
            ("Score Format", owned[1].as_str()),
            ("Scale Min", owned[2].as_str()),
            ("Scale Max", owned[3].as_str()),
        ];
        match samples {
            [one] => values.push(("Generated Text", one)),
            [a, b] => {
                values.push(("Generated Text 1", a));
                values.push(("Generated Text 2", b));
            }
            _ => unreachable!("arity checked"),
        }
        self.template(kind).render(&values)
    }
}

fn require_reference(reference: Option<&str>) -> Result<&str, PromptError> {
    match reference {
        Some(r) if !r.trim().is_empty() => Ok(r),
        _ => Err(PromptError::MissingReference),
    }
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CritiquePath, EvalSetting, Verdict};
    use indexmap::IndexMap;

    fn point(setting: EvalSetting, text: &str) -> PointwiseCritique {
        PointwiseCritique {
            dimension_scores: IndexMap::from([("Overall Score".to_string(), 7)]),
            overall_score: 7,
            explanation: text.to_string(),
            setting,
        }
    }

    fn all_kits() -> Vec<PromptKit> {
        Locale::ALL.into_iter().map(PromptKit::builtin).collect()
    }

    #[test]
    fn builtins_compile_in_both_locales() {
        for kit in all_kits() {
            for kind in PromptKind::ALL {
                assert!(!kit.template(kind).literal_text().is_empty(), "{kind}");
            }
        }
    }

    #[test]
    fn referenced_pointwise() {
        let kit = PromptKit::builtin(Locale::En);
        let dims = Locale::En.default_dimensions();
        let text = kit
            .render_referenced_pointwise("q", Some("r"), "x", &dims)
            .unwrap();
        for d in &dims {
            assert!(text.contains(d.as_str()), "{d}");
        }
        assert!(text.contains("'Overall Score': score}"));
        assert!(text.contains("[Reference Answer Begin]\nr\n[Reference Answer End]"));
        assert_eq!(
            text,
            kit.render_referenced_pointwise("q", Some("r"), "x", &dims)
                .unwrap()
        );
        assert_eq!(
            kit.render_referenced_pointwise("q", Some("r"), "x", &[]),
            Err(PromptError::MissingDimensions)
        );
        assert_eq!(
            kit.render_referenced_pointwise("q", None, "x", &dims),
            Err(PromptError::MissingReference)
        );
    }

    #[test]
    fn p2p_variants() {
        let kit = PromptKit::builtin(Locale::En);
        let dims = Locale::En.default_dimensions();
        let (r1, r2) = (
            point(EvalSetting::POINT_R, "crit one"),
            point(EvalSetting::POINT_R, "crit two"),
        );
        let text = kit
            .render_p2p("q", Some("ref"), "a", "b", &r1, &r2, &dims)
            .unwrap();
        assert!(text.contains("[Reference Answer Begin]"));
        assert!(text.contains("crit one") && text.contains("crit two"));
        assert!(text.contains("{'Overall Comparison Result': 'Assistant 1'}"));

        let (f1, f2) = (
            point(EvalSetting::POINT_RF, "c1"),
            point(EvalSetting::POINT_RF, "c2"),
        );
        let text = kit
            .render_p2p("q", None, "a", "b", &f1, &f2, &dims)
            .unwrap();
        assert!(!text.contains("[Reference Answer Begin]"));
        assert_eq!(
            kit.render_p2p("q", Some("ref"), "a", "b", &f1, &r2, &dims),
            Err(PromptError::GroundingMismatch {
                expected: Grounding::Referenced,
                found: Grounding::ReferenceFree
            })
        );
    }

    #[test]
    fn r2rf_variants() {
        let kit = PromptKit::builtin(Locale::En);
        let c = point(EvalSetting::POINT_R, "the original critique");
        let text = kit
            .render_r2rf(
                "q",
                Some("r"),
                R2rfPayload::Point {
                    sample: "x",
                    critique: &c,
                },
            )
            .unwrap();
        assert!(text.contains("[Critique Begin]\nthe original critique\n[Critique End]"));
        assert!(text.contains("If an important error is found"));

        let pc = PairwiseCritique {
            verdict: Verdict::Win1,
            explanation: "pair critique".into(),
            setting: EvalSetting::PAIR_R,
            path: CritiquePath::Direct,
        };
        let text = kit
            .render_r2rf(
                "q",
                Some("r"),
                R2rfPayload::Pair {
                    sample_1: "a",
                    sample_2: "b",
                    critique: &pc,
                },
            )
            .unwrap();
        assert!(text.contains("consistent with the overall comparison result"));

        let rf = point(EvalSetting::POINT_RF, "c");
        assert_eq!(
            kit.render_r2rf(
                "q",
                Some("r"),
                R2rfPayload::Point {
                    sample: "x",
                    critique: &rf
                }
            ),
            Err(PromptError::AlreadyReferenceFree)
        );
    }

    #[test]
    fn query_generation_and_difficulty() {
        let kit = PromptKit::builtin(Locale::En);
        let seeds: Vec<(String, String)> = (1..=3)
            .map(|i| (format!("seed {i}"), "Mathematics".to_string()))
            .collect();
        let text = kit.render_query_generation(&seeds, 10).unwrap();
        assert!(text.contains("1.seed 1\n\n2.seed 2\n\n3.seed 3"));
        assert!(text.contains("@@") && text.contains("&&"));
        assert!(text.contains("The following are some examples"));
        assert_eq!(
            kit.render_query_generation(&[], 10),
            Err(PromptError::EmptySeeds)
        );

        let text = kit.render_difficulty_scoring(&seeds).unwrap();
        assert!(text.contains("##1##"));
        assert_eq!(text, kit.render_difficulty_scoring(&seeds).unwrap());
        assert_eq!(
            kit.render_difficulty_scoring(&seeds[..2]),
            Err(PromptError::ArityError {
                expected: 3,
                found: 2
            })
        );
    }

    #[test]
    fn critique_quality() {
        let kit = PromptKit::builtin(Locale::En);
        let pair = |t: &str| {
            Critique::Pairwise(PairwiseCritique {
                verdict: Verdict::Tie,
                explanation: t.into(),
                setting: EvalSetting::PAIR_RF,
                path: CritiquePath::Direct,
            })
        };
        let input = EvalInput {
            query: "q".into(),
            reference: None,
            samples: vec!["a".into(), "b".into()],
        };
        let text = kit
            .render_critique_quality_judgment(&input, &pair("x"), &pair("y"))
            .unwrap();
        let (c, h, i) = (
            text.find("correctness").unwrap(),
            text.find("helpfulness").unwrap(),
            text.find("informativeness").unwrap(),
        );
        assert!(c < h && h < i);
        assert!(text.contains("[[1]]") && text.contains("[[2]]") && text.contains("[[Tie]]"));
        let single = EvalInput {
            samples: vec!["a".into()],
            ..input.clone()
        };
        assert!(matches!(
            kit.render_critique_quality_judgment(&single, &pair("x"), &pair("y")),
            Err(PromptError::MismatchedInput(_))
        ));
        let pointwise = Critique::Pointwise(point(EvalSetting::POINT_RF, "p"));
        assert!(matches!(
            kit.render_critique_quality_judgment(&input, &pair("x"), &pointwise),
            Err(PromptError::MismatchedInput(_))
        ));
    }

    #[test]
    fn refine_flags_referenced_critiques() {
        let kit = PromptKit::builtin(Locale::Zh);
        let rf = Critique::Pointwise(point(EvalSetting::POINT_RF, "建议补充细节"));
        let out = kit.render_refine_with_critique("q", "原回答", &rf);
        assert!(out.warnings.is_empty());
        assert!(out.text.contains("原回答") && out.text.contains("建议补充细节"));
        let r = Critique::Pointwise(point(EvalSetting::POINT_R, "c"));
        assert_eq!(
            kit.render_refine_with_critique("q", "x", &r).warnings.len(),
            1
        );
    }

    #[test]
    fn reference_free_prompts_have_no_reference_delimiter() {
        let delimiters: Vec<&str> = Locale::ALL
            .into_iter()
            .flat_map(reference_delimiters)
            .collect();
        for kit in all_kits() {
            let dims = kit.locale().default_dimensions();
            let rf = point(EvalSetting::POINT_RF, "c");
            let texts = [
                kit.render_p2p("q", None, "a", "b", &rf, &rf, &dims)
                    .unwrap(),
                kit.render_sft_input(EvalSetting::POINT_RF, "q", Some("ignored"), &["a"], &dims)
                    .unwrap(),
                kit.render_sft_input(
                    EvalSetting::PAIR_RF,
                    "q",
                    Some("ignored"),
                    &["a", "b"],
                    &dims,
                )
                .unwrap(),
            ];
            for t in texts {
                assert!(!t.contains("ignored"));
                for d in &delimiters {
                    assert!(!t.contains(d), "{d}");
                }
            }
        }
    }

    #[test]
    fn overrides_are_validated() {
        let dir = tempfile::tempdir().unwrap();
        let zh = dir.path().join("zh");
        std::fs::create_dir_all(&zh).unwrap();
        std::fs::write(
            zh.join("refine.txt"),
            "改写：{Question}|{Original Response}|{Critique}\n",
        )
        .unwrap();
        let kit = PromptKit::load(Locale::Zh, Some(dir.path())).unwrap();
        let c = Critique::Pointwise(point(EvalSetting::POINT_RF, "c"));
        assert_eq!(
            kit.render_refine_with_critique("q", "x", &c).text,
            "改写：q|x|c"
        );

        std::fs::write(
            zh.join("p2p_rf.txt"),
            "{Question}\n{Generated Text 1}\n{Generated Text 2}",
        )
        .unwrap();
        assert!(matches!(
            PromptKit::load(Locale::Zh, Some(dir.path())),
            Err(PromptError::MissingSlot { .. })
        ));
        std::fs::write(
            zh.join("p2p_rf.txt"),
            format!("{{Question}}\n[参考答案开始]\n{{Generated Text 1}}\n{{Generated Text 2}}\n{{{CRITIQUE_1_RF}}}\n{{{CRITIQUE_2_RF}}}"),
        )
        .unwrap();
        assert!(matches!(
            PromptKit::load(Locale::Zh, Some(dir.path())),
            Err(PromptError::ReferenceDelimiter { .. })
        ));
        std::fs::write(zh.join("p2p_rf.txt"), "{Bogus}").unwrap();
        assert!(matches!(
            PromptKit::load(Locale::Zh, Some(dir.path())),
            Err(PromptError::UnknownSlot { .. })
        ));
    }

    #[test]
    fn identify_recovers_fields() {
        for kit in all_kits() {
            let dims = kit.locale().default_dimensions();
            let text = kit
                .render_referenced_pointwise("the q", Some("the r"), "the x", &dims)
                .unwrap();
            let id = kit.identify(&text).unwrap();
            assert_eq!(id.kind, PromptKind::PointR);
            assert_eq!(id.field("Question"), Some("the q"));
            assert_eq!(id.field("Generated Text"), Some("the x"));
            let recovered = kit.split_dimension_list(id.field("Dimension").unwrap());
            assert_eq!(recovered.len(), dims.len() - 1);
            assert_eq!(kit.identify("random text"), None);
        }
    }
}
