use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, JudgeRequest};
use crate::model::{derive_pairwise_label, Grounding, Locale, ScoreScale, Verdict};
use crate::parse::{
    pairwise_fragment, parse_augmented_queries, parse_pairwise, parse_pointwise, pointwise_fragment,
};
use crate::prompt::{Identified, PromptKind, PromptKit};

/// Noise model of the synthetic judge. Each effect applies only to the
/// prompt kinds listed next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Standard deviation of Gaussian jitter added to overall scores.
    pub score_sigma: f64,
    pub sigma_on: Vec<PromptKind>,
    /// Probability of exchanging a Win1/Win2 verdict. Ties are never flipped.
    pub p_flip: f64,
    pub flip_on: Vec<PromptKind>,
    /// Probability of emitting a fragment with its closing brace missing.
    pub malformed_rate: f64,
    pub malformed_on: Vec<PromptKind>,
    /// Probability that a reference-free critique mentions the reference.
    pub leak_rate: f64,
    pub leak_on: Vec<PromptKind>,
    /// Quality added to a response revised under a critique, capped at 1.
    pub refine_gain: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            score_sigma: 0.0,
            sigma_on: vec![PromptKind::PointR, PromptKind::R2rfPoint],
            p_flip: 0.0,
            flip_on: vec![PromptKind::P2pR, PromptKind::P2pRf, PromptKind::R2rfPair],
            malformed_rate: 0.0,
            malformed_on: vec![
                PromptKind::PointR,
                PromptKind::P2pR,
                PromptKind::P2pRf,
                PromptKind::R2rfPoint,
                PromptKind::R2rfPair,
            ],
            leak_rate: 0.0,
            leak_on: vec![
                PromptKind::P2pRf,
                PromptKind::R2rfPoint,
                PromptKind::R2rfPair,
            ],
            refine_gain: 0.2,
        }
    }
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("p_flip", self.p_flip),
            ("malformed_rate", self.malformed_rate),
            ("leak_rate", self.leak_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} = {p} is not a probability"));
            }
        }
        if !(self.score_sigma >= 0.0 && self.score_sigma.is_finite()) {
            return Err(format!(
                "score_sigma = {} must be non-negative",
                self.score_sigma
            ));
        }
        Ok(())
    }
}

/// Latent quality in [0, 1] of every response text the oracle may see.
/// Unknown texts get a stable hash-derived quality.
#[derive(Debug, Default)]
pub struct QualityBook {
    known: RwLock<HashMap<String, f64>>,
}

fn hash_unit(parts: &[&str]) -> f64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let bytes: [u8; 8] = h.finalize()[..8].try_into().expect("8 bytes");
    (u64::from_le_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64
}

impl QualityBook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, text: &str, quality: f64) {
        self.known
            .write()
            .expect("book lock")
            .insert(text.trim().to_string(), quality.clamp(0.0, 1.0));
    }

    pub fn quality(&self, text: &str) -> f64 {
        let key = text.trim();
        self.known
            .read()
            .expect("book lock")
            .get(key)
            .copied()
            .unwrap_or_else(|| hash_unit(&[key]))
    }

    pub fn len(&self) -> usize {
        self.known.read().expect("book lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<S: AsRef<str>> FromIterator<(S, f64)> for QualityBook {
    fn from_iter<I: IntoIterator<Item = (S, f64)>>(iter: I) -> Self {
        let book = QualityBook::new();
        for (text, q) in iter {
            book.insert(text.as_ref(), q);
        }
        book
    }
}

/// Offline judge that answers every prompt-kit prompt in the expected
/// output grammar. Noiseless, its overall score is `round(max · quality)`
/// clamped to the scale and its verdicts follow the embedded scores.
pub struct SyntheticOracle {
    id: String,
    seed: u64,
    noise: NoiseSpec,
    kits: Vec<PromptKit>,
    book: Arc<QualityBook>,
}

const ZH_WORDS: &[&str] = &[
    "如何",
    "解释",
    "城市",
    "历史",
    "算法",
    "写一篇",
    "关于",
    "春天",
    "的",
    "短文",
    "比较",
    "两种",
    "方法",
    "优缺点",
    "计算",
    "概率",
    "设计",
    "一个",
    "旅行",
    "计划",
    "分析",
    "原因",
    "介绍",
    "经济",
    "影响",
    "为什么",
    "翻译",
    "句子",
    "总结",
    "文章",
    "推理",
    "问题",
    "编写",
    "函数",
    "角色",
    "对话",
    "健康",
    "饮食",
    "环境",
    "保护",
    "科学",
    "实验",
];

const EN_WORDS: &[&str] = &[
    "how",
    "explain",
    "city",
    "history",
    "algorithm",
    "write",
    "essay",
    "about",
    "spring",
    "compare",
    "two",
    "methods",
    "pros",
    "cons",
    "compute",
    "probability",
    "design",
    "a",
    "travel",
    "plan",
    "analyze",
    "reasons",
    "describe",
    "economic",
    "impact",
    "why",
    "translate",
    "sentence",
    "summarize",
    "article",
    "reason",
    "puzzle",
    "implement",
    "function",
    "role",
    "dialogue",
    "healthy",
    "diet",
    "environment",
    "protect",
    "science",
    "experiment",
];

impl SyntheticOracle {
    /// Recognizes the builtin templates of both locales.
    pub fn new(seed: u64, noise: NoiseSpec) -> Self {
        Self {
            id: "synthetic-oracle".into(),
            seed,
            noise,
            kits: Locale::ALL.into_iter().map(PromptKit::builtin).collect(),
            book: Arc::new(QualityBook::new()),
        }
    }

    pub fn noiseless(seed: u64) -> Self {
        Self::new(seed, NoiseSpec::noiseless())
    }

    pub fn with_kits(mut self, kits: Vec<PromptKit>) -> Self {
        self.kits = kits;
        self
    }

    pub fn with_book(mut self, book: Arc<QualityBook>) -> Self {
        self.book = book;
        self
    }

    pub fn book(&self) -> &Arc<QualityBook> {
        &self.book
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    fn rng(&self, digest: &str, index: u32) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(digest.as_bytes());
        h.update(index.to_le_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    /// `round(max · quality)` clamped to the scale.
    pub fn noiseless_score(&self, quality: f64, scale: ScoreScale) -> i32 {
        scale.clamp((scale.max as f64 * quality).round() as i32)
    }

    fn answer(
        &self,
        kit: &PromptKit,
        id: &Identified,
        draws: &Draws,
    ) -> Result<String, BackendError> {
        let locale = id.locale;
        let scale = kit.scale();
        let field = |name: &str| {
            id.field(name)
                .ok_or_else(|| BackendError::Fatal(format!("{} prompt lacks {name}", id.kind)))
        };
        let jitter = |kind: PromptKind| {
            if self.noise.sigma_on.contains(&kind) {
                draws.gaussian
            } else {
                0.0
            }
        };
        let flip = |kind: PromptKind, v: Verdict| {
            if self.noise.flip_on.contains(&kind)
                && draws.flip < self.noise.p_flip
                && v != Verdict::Tie
            {
                v.mirror()
            } else {
                v
            }
        };
        let raw_score = |text: &str, kind: PromptKind| {
            let q = self.book.quality(text);
            scale.clamp((scale.max as f64 * q + jitter(kind)).round() as i32)
        };
        let default_dims = || {
            let overall = locale.overall_key();
            locale
                .default_dimensions()
                .into_iter()
                .filter(|d| d != overall)
                .collect::<Vec<_>>()
        };
        let dims_of = |id: &Identified| match id.field("Dimension") {
            Some(list) => kit.split_dimension_list(list),
            None => default_dims(),
        };

        let text = match id.kind {
            PromptKind::PointR | PromptKind::SftPointR | PromptKind::SftPointRf => {
                let sample = field("Generated Text")?;
                let overall = raw_score(sample, id.kind);
                let scores = spread_dimensions(&dims_of(id), overall, sample, scale);
                pointwise_text(
                    locale,
                    id.kind != PromptKind::SftPointRf,
                    &scores,
                    overall,
                    scale,
                )
            }
            PromptKind::R2rfPoint => {
                let sample = field("Generated Text")?;
                let critique = field("Referenced Pointwise Grading Critique for Generated Text")?;
                let (scores, overall) =
                    match parse_pointwise(critique, scale, locale, Grounding::Referenced) {
                        Ok(o) => {
                            let c = o.pointwise().expect("pointwise parse").clone();
                            let overall = scale
                                .clamp((c.overall_score as f64 + jitter(id.kind)).round() as i32);
                            let dims: Vec<(String, i32)> = c
                                .dimension_scores
                                .into_iter()
                                .filter(|(k, _)| k != locale.overall_key())
                                .collect();
                            (dims, overall)
                        }
                        Err(_) => {
                            let overall = raw_score(sample, id.kind);
                            (
                                spread_dimensions(&default_dims(), overall, sample, scale),
                                overall,
                            )
                        }
                    };
                pointwise_text(locale, false, &scores, overall, scale)
            }
            PromptKind::P2pR | PromptKind::P2pRf => {
                let referenced = id.kind == PromptKind::P2pR;
                let (grounding, prefix) = if referenced {
                    (Grounding::Referenced, "Referenced")
                } else {
                    (Grounding::ReferenceFree, "Reference-Free")
                };
                let mut scores = [0; 2];
                for (i, slot) in scores.iter_mut().enumerate() {
                    let n = i + 1;
                    let critique = field(&format!(
                        "{prefix} Pointwise Grading Critique for Generated Text {n}"
                    ))?;
                    *slot = match parse_pointwise(critique, scale, locale, grounding) {
                        Ok(o) => o.pointwise().expect("pointwise parse").overall_score,
                        Err(_) => self.noiseless_score(
                            self.book.quality(field(&format!("Generated Text {n}"))?),
                            scale,
                        ),
                    };
                }
                let verdict = flip(id.kind, derive_pairwise_label(scores[0], scores[1], 0));
                pairwise_text(locale, referenced, verdict, &dims_of(id))
            }
            PromptKind::R2rfPair => {
                let critique =
                    field("Referenced Pairwise Comparison Critique for Generated Text 1&2")?;
                let verdict = match parse_pairwise(critique, locale, Grounding::Referenced) {
                    Ok(o) => o.pairwise().expect("pairwise parse").verdict,
                    Err(_) => {
                        let s1 = self
                            .noiseless_score(self.book.quality(field("Generated Text 1")?), scale);
                        let s2 = self
                            .noiseless_score(self.book.quality(field("Generated Text 2")?), scale);
                        derive_pairwise_label(s1, s2, 0)
                    }
                };
                pairwise_text(locale, false, flip(id.kind, verdict), &default_dims())
            }
            PromptKind::SftPairR | PromptKind::SftPairRf => {
                let s1 = raw_score(field("Generated Text 1")?, id.kind);
                let s2 = raw_score(field("Generated Text 2")?, id.kind);
                let verdict = flip(id.kind, derive_pairwise_label(s1, s2, 0));
                pairwise_text(
                    locale,
                    id.kind == PromptKind::SftPairR,
                    verdict,
                    &dims_of(id),
                )
            }
            PromptKind::QueryGen => {
                let count = id
                    .field("Count")
                    .and_then(|c| c.trim().parse().ok())
                    .unwrap_or(10usize);
                let categories: Vec<String> = match id.field("Categories") {
                    Some(block) => block
                        .lines()
                        .map(|l| {
                            l.trim()
                                .trim_start_matches(|c: char| c.is_ascii_digit())
                                .trim_start_matches('.')
                                .trim()
                        })
                        .filter(|l| !l.is_empty())
                        .map(String::from)
                        .collect(),
                    None => kit.categories().to_vec(),
                };
                if categories.is_empty() {
                    return Err(BackendError::Fatal("no categories to choose from".into()));
                }
                let mut rng = draws.stream.clone();
                let malformed = self.noise.malformed_on.contains(&id.kind);
                let mut lines = Vec::with_capacity(count);
                for i in 1..=count {
                    let query = random_query(locale, &mut rng);
                    let category = &categories[rng.random_range(0..categories.len())];
                    let broken = malformed && rng.random::<f64>() < self.noise.malformed_rate;
                    let close = if broken { "" } else { "@@" };
                    lines.push(format!("{i}.@@{query}{close}&&{category}&&"));
                }
                lines.join("\n")
            }
            PromptKind::Difficulty => {
                let (queries, _) = parse_augmented_queries(field("Queries")?);
                queries
                    .iter()
                    .enumerate()
                    .map(|(i, q)| {
                        let d = 1 + (hash_unit(&["difficulty", &q.text]) * 3.0) as u8;
                        format!("{}.@@{}@@&&{}&&##{}##", i + 1, q.text, q.category, d.min(3))
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            }
            PromptKind::CritiqueQuality => {
                let a = field("Critique 1")?.chars().count();
                let b = field("Critique 2")?.chars().count();
                let verdict = match a.cmp(&b) {
                    std::cmp::Ordering::Greater => Verdict::Win1,
                    std::cmp::Ordering::Less => Verdict::Win2,
                    std::cmp::Ordering::Equal => Verdict::Tie,
                };
                critique_quality_text(locale, verdict)
            }
            PromptKind::Refine => {
                let original = field("Original Response")?;
                if field("Critique")?.trim().is_empty() {
                    return Ok(original.to_string());
                }
                let addition = match locale {
                    Locale::Zh => "（已根据评价意见补充和完善相关内容。）",
                    Locale::En => "(Revised to address the points raised in the critique.)",
                };
                let revised = format!("{}\n\n{addition}", original.trim_end());
                let q = self.book.quality(original);
                self.book
                    .insert(&revised, (q + self.noise.refine_gain).min(1.0));
                revised
            }
        };
        Ok(self.corrupt(id.kind, locale, text, draws))
    }

    fn corrupt(&self, kind: PromptKind, locale: Locale, mut text: String, draws: &Draws) -> String {
        if self.noise.leak_on.contains(&kind) && draws.leak < self.noise.leak_rate {
            let sentence = match locale {
                Locale::Zh => "（以上分析参考了参考答案。）",
                Locale::En => "(This analysis draws on the reference answer.)",
            };
            if let Some(at) = text.rfind("\n\n") {
                text.insert_str(at, &format!("\n{sentence}"));
            }
        }
        if self.noise.malformed_on.contains(&kind)
            && kind != PromptKind::QueryGen
            && draws.malformed < self.noise.malformed_rate
        {
            if let Some(at) = text.rfind('}') {
                text.remove(at);
            }
        }
        text
    }
}

/// Random draws for one completion, taken in a fixed order.
struct Draws {
    gaussian: f64,
    flip: f64,
    leak: f64,
    malformed: f64,
    stream: ChaCha8Rng,
}

impl Draws {
    fn new(mut rng: ChaCha8Rng, sigma: f64) -> Self {
        let gaussian = if sigma > 0.0 {
            Normal::new(0.0, sigma)
                .expect("valid sigma")
                .sample(&mut rng)
        } else {
            0.0
        };
        let flip = rng.random();
        let leak = rng.random();
        let malformed = rng.random();
        Self {
            gaussian,
            flip,
            leak,
            malformed,
            stream: rng,
        }
    }
}

fn spread_dimensions(
    dims: &[String],
    overall: i32,
    sample: &str,
    scale: ScoreScale,
) -> Vec<(String, i32)> {
    dims.iter()
        .map(|d| {
            let offset = (hash_unit(&[d, sample]) * 3.0) as i32 - 1;
            (d.clone(), scale.clamp(overall + offset.clamp(-1, 1)))
        })
        .collect()
}

fn describe(locale: Locale, score: i32, scale: ScoreScale) -> &'static str {
    let ratio = (score - scale.min) as f64 / (scale.max - scale.min) as f64;
    match (locale, ratio) {
        (Locale::Zh, r) if r >= 0.7 => "较好",
        (Locale::Zh, r) if r >= 0.4 => "一般",
        (Locale::Zh, _) => "较差",
        (Locale::En, r) if r >= 0.7 => "well",
        (Locale::En, r) if r >= 0.4 => "adequately",
        (Locale::En, _) => "poorly",
    }
}

fn pointwise_text(
    locale: Locale,
    referenced: bool,
    dims: &[(String, i32)],
    overall: i32,
    scale: ScoreScale,
) -> String {
    let mut lines = Vec::new();
    for (d, s) in dims {
        let desc = describe(locale, *s, scale);
        lines.push(match (locale, referenced) {
            (Locale::Zh, true) => format!("{d}: 与参考答案相比，助手的答案在这一维度上表现{desc}。得分：{s}"),
            (Locale::Zh, false) => format!("{d}: 助手的答案在这一维度上表现{desc}。得分：{s}"),
            (Locale::En, true) => format!("{d}: Compared with the reference answer, the answer performs {desc} on this dimension. Score: {s}"),
            (Locale::En, false) => format!("{d}: The answer performs {desc} on this dimension. Score: {s}"),
        });
    }
    let overall_key = locale.overall_key();
    let desc = describe(locale, overall, scale);
    lines.push(match (locale, referenced) {
        (Locale::Zh, true) => format!("{overall_key}: 结合参考答案来看，助手的答案整体表现{desc}，综合得分为{overall}。"),
        (Locale::Zh, false) => format!("{overall_key}: 助手的答案整体表现{desc}，综合得分为{overall}。"),
        (Locale::En, true) => format!("{overall_key}: Considering the reference answer, the answer performs {desc} overall, so the overall score is {overall}."),
        (Locale::En, false) => format!("{overall_key}: The answer performs {desc} overall, so the overall score is {overall}."),
    });
    let mut fragment: IndexMap<String, i32> = dims.iter().cloned().collect();
    fragment.shift_remove(overall_key);
    fragment.insert(overall_key.to_string(), overall);
    format!("{}\n\n{}", lines.join("\n"), pointwise_fragment(&fragment))
}

fn pairwise_text(locale: Locale, referenced: bool, verdict: Verdict, dims: &[String]) -> String {
    let mut lines = Vec::new();
    for d in dims {
        lines.push(match (locale, verdict) {
            (Locale::Zh, Verdict::Win1) => format!("{d}: 助手1的答案优于助手2的答案。"),
            (Locale::Zh, Verdict::Win2) => format!("{d}: 助手1的答案不如助手2的答案。"),
            (Locale::Zh, Verdict::Tie) => format!("{d}: 助手1的答案与助手2的答案相当。"),
            (Locale::En, Verdict::Win1) => {
                format!("{d}: Assistant 1's answer is better than Assistant 2's answer.")
            }
            (Locale::En, Verdict::Win2) => {
                format!("{d}: Assistant 1's answer is worse than Assistant 2's answer.")
            }
            (Locale::En, Verdict::Tie) => {
                format!("{d}: Assistant 1's answer is comparable to Assistant 2's answer.")
            }
        });
    }
    let summary = match (locale, verdict) {
        (Locale::Zh, Verdict::Win1) => "助手1的答案综合质量更高",
        (Locale::Zh, Verdict::Win2) => "助手2的答案综合质量更高",
        (Locale::Zh, Verdict::Tie) => "两个答案质量相当",
        (Locale::En, Verdict::Win1) => "Assistant 1's answer has higher overall quality",
        (Locale::En, Verdict::Win2) => "Assistant 2's answer has higher overall quality",
        (Locale::En, Verdict::Tie) => "the two answers are of equivalent quality",
    };
    let key = locale.comparison_key();
    lines.push(match (locale, referenced) {
        (Locale::Zh, true) => format!("{key}: 结合参考答案来看，{summary}。"),
        (Locale::Zh, false) => format!("{key}: {summary}。"),
        (Locale::En, true) => format!("{key}: Considering the reference answer, {summary}."),
        (Locale::En, false) => format!("{key}: On balance, {summary}."),
    });
    format!(
        "{}\n\n{}",
        lines.join("\n"),
        pairwise_fragment(verdict, locale)
    )
}

fn critique_quality_text(locale: Locale, verdict: Verdict) -> String {
    let (analysis, mark) = match (locale, verdict) {
        (Locale::Zh, Verdict::Win1) => (
            "两条评价的正确性相当，评价1的分析更有帮助，信息也更丰富。",
            "1",
        ),
        (Locale::Zh, Verdict::Win2) => (
            "两条评价的正确性相当，评价2的分析更有帮助，信息也更丰富。",
            "2",
        ),
        (Locale::Zh, Verdict::Tie) => ("两条评价在正确性、有用性和信息量上都相当。", "Tie"),
        (Locale::En, Verdict::Win1) => (
            "Both critiques are equally correct; Critique 1 is more helpful and informative.",
            "1",
        ),
        (Locale::En, Verdict::Win2) => (
            "Both critiques are equally correct; Critique 2 is more helpful and informative.",
            "2",
        ),
        (Locale::En, Verdict::Tie) => (
            "The critiques are equivalent in correctness, helpfulness and informativeness.",
            "Tie",
        ),
    };
    format!("{analysis}\n\n[[{mark}]]")
}

fn random_query(locale: Locale, rng: &mut ChaCha8Rng) -> String {
    match locale {
        Locale::Zh => {
            let n = rng.random_range(4..9);
            let words: Vec<&str> = (0..n)
                .map(|_| ZH_WORDS[rng.random_range(0..ZH_WORDS.len())])
                .collect();
            format!("{}？", words.concat())
        }
        Locale::En => {
            let n = rng.random_range(6..13);
            let words: Vec<&str> = (0..n)
                .map(|_| EN_WORDS[rng.random_range(0..EN_WORDS.len())])
                .collect();
            let mut text = words.join(" ");
            if let Some(first) = text.get_mut(0..1) {
                first.make_ascii_uppercase();
            }
            format!("{text}?")
        }
    }
}

impl Backend for SyntheticOracle {
    fn id(&self) -> &str {
        &self.id
    }

    fn call(&self, request: &JudgeRequest) -> Result<Vec<String>, BackendError> {
        let prompt = request.last_user_text();
        let (kit, id) = self
            .kits
            .iter()
            .find_map(|k| k.identify(prompt).map(|id| (k, id)))
            .ok_or_else(|| {
                BackendError::Fatal(format!("oracle cannot interpret request {:?}", request.tag))
            })?;
        let digest = request.digest();
        (0..request.decoding.num_samples)
            .map(|i| {
                let draws = Draws::new(self.rng(&digest, i), self.noise.score_sigma);
                self.answer(kit, &id, &draws)
            })
            .collect()
    }
}
