//! Self-instruct query expansion: generation rounds, diversity filtering,
//! difficulty scoring and stratified selection.

use std::collections::{BTreeMap, HashMap, HashSet};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judge::{DecodingParams, JudgeClient, JudgeError, JudgeRequest};
use crate::model::{Origin, Query};
use crate::parse::{parse_augmented_queries, AugmentedQuery};
use crate::prompt::{PromptError, PromptKit};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("no seed queries to augment from")]
    EmptySeeds,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error("quota unsatisfiable for {category} (difficulty {difficulty:?}): wanted {wanted}, only {available} available")]
    QuotaUnsatisfiable {
        category: String,
        difficulty: Option<u8>,
        wanted: usize,
        available: usize,
    },
    #[error("invalid augmentation setting: {0}")]
    InvalidConfig(String),
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3000..=0x303F | 0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0xFF00..=0xFFEF)
}

/// Whitespace tokens, except that every CJK character is its own token.
pub fn tokenize(text: &str) -> Vec<&str> {
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() || is_cjk(c) {
            if let Some(s) = start.take() {
                tokens.push(&text[s..i]);
            }
            if is_cjk(c) {
                tokens.push(&text[i..i + c.len_utf8()]);
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        tokens.push(&text[s..]);
    }
    tokens
}

fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Token-level LCS F-measure between two texts.
pub fn lcs_f1(candidate: &str, seed: &str) -> f64 {
    let (a, b) = (tokenize(candidate), tokenize(seed));
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&a, &b) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, r) = (l / a.len() as f64, l / b.len() as f64);
    2.0 * p * r / (p + r)
}

/// Highest [`lcs_f1`] of `candidate` against any seed; 0 with no seeds.
pub fn lcs_overlap<S: AsRef<str>>(candidate: &str, seeds: &[S]) -> f64 {
    seeds
        .iter()
        .map(|s| lcs_f1(candidate, s.as_ref()))
        .fold(0.0, f64::max)
}

fn ngram_counts<'a>(tokens: &[&'a str], k: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(k) {
        *counts.entry(w.to_vec()).or_insert(0) += 1;
    }
    counts
}

/// Self-BLEU-style score of each candidate against the rest of the batch:
/// geometric mean of clipped n-gram precisions for orders 1..=n, no brevity
/// penalty. Orders longer than the candidate are left out.
pub fn corpus_self_overlap<S: AsRef<str>>(
    candidates: &[S],
    n: usize,
) -> Result<Vec<f64>, AugmentError> {
    if n == 0 {
        return Err(AugmentError::InvalidConfig(
            "n-gram order must be at least 1".into(),
        ));
    }
    let tokens: Vec<Vec<&str>> = candidates.iter().map(|c| tokenize(c.as_ref())).collect();
    let counts: Vec<Vec<HashMap<Vec<&str>, usize>>> = tokens
        .iter()
        .map(|t| (1..=n).map(|k| ngram_counts(t, k)).collect())
        .collect();
    let scores = (0..tokens.len())
        .map(|i| {
            let mut log_sum = 0.0;
            let mut orders = 0;
            for (k, own) in counts[i].iter().enumerate() {
                let total: usize = own.values().sum();
                if total == 0 {
                    continue;
                }
                let clipped: usize = own
                    .iter()
                    .map(|(g, &c)| {
                        let best = (0..tokens.len())
                            .filter(|&j| j != i)
                            .map(|j| counts[j][k].get(g).copied().unwrap_or(0))
                            .max()
                            .unwrap_or(0);
                        c.min(best)
                    })
                    .sum();
                if clipped == 0 {
                    return 0.0;
                }
                log_sum += (clipped as f64 / total as f64).ln();
                orders += 1;
            }
            if orders == 0 {
                0.0
            } else {
                (log_sum / orders as f64).exp()
            }
        })
        .collect();
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Queries requested per generation call.
    pub per_call: usize,
    pub rounds: usize,
    /// Seed examples shown in each generation prompt.
    pub seeds_per_prompt: usize,
    /// Candidates whose LCS F1 against any seed reaches this are dropped.
    pub lcs_threshold: f64,
    /// Candidates whose batch self-overlap reaches this are dropped.
    pub self_overlap_threshold: f64,
    pub self_overlap_order: usize,
    /// Per-category quota; empty keeps everything that survives filtering.
    pub quotas: IndexMap<String, usize>,
    /// Relative weights of difficulties 1, 2 and 3.
    pub difficulty_mix: Option<[u32; 3]>,
    /// Fail instead of reporting shortages.
    pub strict: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            per_call: 10,
            rounds: 3,
            seeds_per_prompt: 3,
            lcs_threshold: 0.7,
            self_overlap_threshold: 0.6,
            self_overlap_order: 4,
            quotas: IndexMap::new(),
            difficulty_mix: None,
            strict: false,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: &str| Err(AugmentError::InvalidConfig(m.into()));
        if self.per_call == 0 || self.rounds == 0 || self.seeds_per_prompt == 0 {
            return bad("per_call, rounds and seeds_per_prompt must be positive");
        }
        if !(0.0..=1.0).contains(&self.lcs_threshold)
            || !(0.0..=1.0).contains(&self.self_overlap_threshold)
        {
            return bad("thresholds must lie in [0, 1]");
        }
        if self.self_overlap_order == 0 {
            return bad("self_overlap_order must be at least 1");
        }
        if self
            .difficulty_mix
            .is_some_and(|m| m.iter().all(|&w| w == 0))
        {
            return bad("difficulty_mix needs a positive weight");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundOutput {
    pub candidates: Vec<AugmentedQuery>,
    pub warnings: Vec<String>,
}

/// One generation call seeded with `seeds`.
pub fn augment_round(
    seeds: &[Query],
    client: &JudgeClient,
    kit: &PromptKit,
    per_call: usize,
) -> Result<RoundOutput, AugmentError> {
    if seeds.is_empty() {
        return Err(AugmentError::EmptySeeds);
    }
    let pairs: Vec<(String, String)> = seeds
        .iter()
        .map(|q| (q.text.clone(), q.category.clone()))
        .collect();
    let prompt = kit.render_query_generation(&pairs, per_call)?;
    let response = client.complete(&JudgeRequest::prompt(
        prompt,
        DecodingParams::greedy(),
        "augment",
    ))?;
    let (mut candidates, mut warnings) = parse_augmented_queries(response.first());
    candidates.retain(|c| {
        let known = kit.categories().contains(&c.category);
        if !known {
            warnings.push(format!(
                "dropped {:?}: unknown category {:?}",
                c.text, c.category
            ));
        }
        known
    });
    Ok(RoundOutput {
        candidates,
        warnings,
    })
}

fn flat(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Rate difficulty three queries at a time. The last batch is padded by
/// repeating earlier queries; padded answers are ignored. Queries the
/// judge does not echo back keep `difficulty: None` and are reported.
pub fn score_difficulty(
    queries: &[AugmentedQuery],
    client: &JudgeClient,
    kit: &PromptKit,
) -> Result<(Vec<AugmentedQuery>, Vec<String>), AugmentError> {
    let mut scored = queries.to_vec();
    let mut warnings = Vec::new();
    if queries.is_empty() {
        return Ok((scored, warnings));
    }
    let mut requests = Vec::new();
    let mut batches = Vec::new();
    for start in (0..queries.len()).step_by(3) {
        let idx: Vec<usize> = (start..start + 3)
            .map(|i| {
                if i < queries.len() {
                    i
                } else {
                    i % queries.len()
                }
            })
            .collect();
        let items: Vec<(String, String)> = idx
            .iter()
            .map(|&i| (queries[i].text.clone(), queries[i].category.clone()))
            .collect();
        requests.push(JudgeRequest::prompt(
            kit.render_difficulty_scoring(&items)?,
            DecodingParams::greedy(),
            "difficulty",
        ));
        batches.push(idx.into_iter().filter(|&i| i >= start).collect::<Vec<_>>());
    }
    for (batch, response) in batches.iter().zip(client.complete_all(&requests)) {
        let (rated, w) = parse_augmented_queries(response?.first());
        warnings.extend(w);
        for &i in batch {
            let key = flat(&queries[i].text);
            match rated
                .iter()
                .find(|r| flat(&r.text) == key)
                .and_then(|r| r.difficulty)
            {
                Some(d) => scored[i].difficulty = Some(d),
                None => warnings.push(format!("no difficulty returned for {:?}", queries[i].text)),
            }
        }
    }
    Ok((scored, warnings))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shortage {
    pub category: String,
    pub difficulty: Option<u8>,
    pub wanted: usize,
    pub filled: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub selected: Vec<AugmentedQuery>,
    pub shortages: Vec<Shortage>,
}

/// Split `total` over `weights` by largest remainder; earlier slots win ties.
pub fn apportion(total: usize, weights: &[u32]) -> Vec<usize> {
    let sum: u64 = weights.iter().map(|&w| u64::from(w)).sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<(usize, u64)> = weights
        .iter()
        .map(|&w| {
            let num = total as u64 * u64::from(w);
            ((num / sum) as usize, num % sum)
        })
        .collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.0).collect();
    let mut left = total - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| exact[b].1.cmp(&exact[a].1).then(a.cmp(&b)));
    for i in order {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

/// Stratified selection by category quota and difficulty proportions.
///
/// Within each stratum candidates are shuffled with `seed`. Strict mode
/// fails on the first short stratum; relaxed mode fills a short difficulty
/// from the category's other leftovers and reports what is still missing.
pub fn balance_select(
    candidates: &[AugmentedQuery],
    quotas: &IndexMap<String, usize>,
    difficulty_mix: Option<[u32; 3]>,
    strict: bool,
    seed: u64,
) -> Result<Selection, AugmentError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selection = Selection::default();
    for (category, &quota) in quotas {
        let mut pool: Vec<usize> = (0..candidates.len())
            .filter(|&i| &candidates[i].category == category)
            .collect();
        pool.shuffle(&mut rng);
        let Some(mix) = difficulty_mix else {
            if pool.len() < quota {
                if strict {
                    return Err(AugmentError::QuotaUnsatisfiable {
                        category: category.clone(),
                        difficulty: None,
                        wanted: quota,
                        available: pool.len(),
                    });
                }
                selection.shortages.push(Shortage {
                    category: category.clone(),
                    difficulty: None,
                    wanted: quota,
                    filled: pool.len(),
                });
            }
            selection
                .selected
                .extend(pool.iter().take(quota).map(|&i| candidates[i].clone()));
            continue;
        };
        let targets = apportion(quota, &mix);
        let mut taken = HashSet::new();
        let mut chosen = Vec::new();
        for (d, &want) in (1u8..=3).zip(&targets) {
            let bucket: Vec<usize> = pool
                .iter()
                .copied()
                .filter(|&i| candidates[i].difficulty == Some(d))
                .collect();
            if bucket.len() < want && strict {
                return Err(AugmentError::QuotaUnsatisfiable {
                    category: category.clone(),
                    difficulty: Some(d),
                    wanted: want,
                    available: bucket.len(),
                });
            }
            if bucket.len() < want {
                selection.shortages.push(Shortage {
                    category: category.clone(),
                    difficulty: Some(d),
                    wanted: want,
                    filled: bucket.len(),
                });
            }
            for &i in bucket.iter().take(want) {
                taken.insert(i);
                chosen.push(i);
            }
        }
        if chosen.len() < quota {
            let fill: Vec<usize> = pool
                .iter()
                .copied()
                .filter(|i| !taken.contains(i))
                .take(quota - chosen.len())
                .collect();
            chosen.extend(fill);
            if chosen.len() < quota {
                selection.shortages.push(Shortage {
                    category: category.clone(),
                    difficulty: None,
                    wanted: quota,
                    filled: chosen.len(),
                });
            }
        }
        selection
            .selected
            .extend(chosen.into_iter().map(|i| candidates[i].clone()));
    }
    Ok(selection)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub generated: usize,
    pub parse_warnings: usize,
    pub duplicates: usize,
    pub rejected_lcs: usize,
    pub rejected_self_overlap: usize,
    pub unscored: usize,
    pub selected: usize,
    pub per_category: BTreeMap<String, usize>,
    pub per_difficulty: BTreeMap<String, usize>,
    pub shortages: Vec<Shortage>,
    pub warnings: Vec<String>,
}

/// Keep candidates below both thresholds. Self-overlap is measured against
/// the whole batch, so each decision is independent of the thresholds
/// applied to other candidates.
pub fn diversity_filter(
    candidates: &[AugmentedQuery],
    seeds: &[String],
    config: &AugmentConfig,
) -> Result<(Vec<AugmentedQuery>, usize, usize), AugmentError> {
    let texts: Vec<&str> = candidates.iter().map(|c| c.text.as_str()).collect();
    let self_scores = corpus_self_overlap(&texts, config.self_overlap_order)?;
    let (mut kept, mut by_lcs, mut by_self) = (Vec::new(), 0, 0);
    for (c, s) in candidates.iter().zip(self_scores) {
        if lcs_overlap(&c.text, seeds) >= config.lcs_threshold {
            by_lcs += 1;
        } else if s >= config.self_overlap_threshold {
            by_self += 1;
        } else {
            kept.push(c.clone());
        }
    }
    Ok((kept, by_lcs, by_self))
}

/// Full expansion: generation rounds, dedup, diversity filter, difficulty
/// scoring and balanced selection. Returned queries get ids `{prefix}{n}`.
pub fn run_augmentation(
    seeds: &[Query],
    client: &JudgeClient,
    kit: &PromptKit,
    config: &AugmentConfig,
    seed: u64,
    id_prefix: &str,
) -> Result<(Vec<Query>, AugmentReport), AugmentError> {
    config.validate()?;
    if seeds.is_empty() {
        return Err(AugmentError::EmptySeeds);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = AugmentReport::default();
    let mut raw = Vec::new();
    for _ in 0..config.rounds {
        let mut pick: Vec<&Query> = seeds.iter().collect();
        pick.shuffle(&mut rng);
        let shown: Vec<Query> = pick
            .into_iter()
            .take(config.seeds_per_prompt)
            .cloned()
            .collect();
        let round = augment_round(&shown, client, kit, config.per_call)?;
        report.parse_warnings += round.warnings.len();
        report.warnings.extend(round.warnings);
        raw.extend(round.candidates);
    }
    report.generated = raw.len();

    let mut seen: HashSet<String> = seeds.iter().map(|q| flat(&q.text)).collect();
    let unique: Vec<AugmentedQuery> = raw
        .into_iter()
        .filter(|c| seen.insert(flat(&c.text)))
        .collect();
    report.duplicates = report.generated - unique.len();

    let seed_texts: Vec<String> = seeds.iter().map(|q| q.text.clone()).collect();
    let (diverse, by_lcs, by_self) = diversity_filter(&unique, &seed_texts, config)?;
    report.rejected_lcs = by_lcs;
    report.rejected_self_overlap = by_self;

    let (scored, warnings) = score_difficulty(&diverse, client, kit)?;
    report.unscored = scored.iter().filter(|q| q.difficulty.is_none()).count();
    report.warnings.extend(warnings);

    let chosen = if config.quotas.is_empty() {
        scored
    } else {
        let selection = balance_select(
            &scored,
            &config.quotas,
            config.difficulty_mix,
            config.strict,
            seed,
        )?;
        report.shortages = selection.shortages;
        selection.selected
    };
    report.selected = chosen.len();
    let queries: Vec<Query> = chosen
        .into_iter()
        .enumerate()
        .map(|(i, c)| Query {
            id: format!("{id_prefix}{:05}", i + 1),
            text: c.text,
            category: c.category,
            difficulty: c.difficulty,
            origin: Origin::Augmented,
        })
        .collect();
    for q in &queries {
        *report.per_category.entry(q.category.clone()).or_default() += 1;
        let d = q
            .difficulty
            .map_or("unrated".to_string(), |d| d.to_string());
        *report.per_difficulty.entry(d).or_default() += 1;
    }
    Ok((queries, report))
}
