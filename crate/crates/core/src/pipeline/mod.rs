//! Critique-data construction: referenced pointwise grading, the two
//! prompting paths, cross validation and SFT emission.

pub mod ledger;
mod run;
pub mod store;

use std::collections::{HashMap, HashSet};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::judge::{DecodingParams, JudgeClient, JudgeError, JudgeRequest};
use crate::model::{
    Critique, CritiquePath, EvalSample, EvalSetting, Grounding, ModelError, PairRecord,
    PairwiseCritique, PointwiseCritique, Query, SftRecord,
};
use crate::parse::{
    parse_pairwise, parse_pointwise, rule_filter, swap_assistant_labels, Decision, DropReason,
    FilterPolicy, ParseError, ParseOutcome,
};
use crate::prompt::{PromptError, PromptKit, R2rfPayload};

pub use ledger::{DropEvent, StageLedger, StageOutput};
pub use run::{
    build, load_state, BuildOptions, BuildSummary, Manifest, StageEntry, MANIFEST, STAGES,
};
pub use store::{FileEntry, RunStore, StoreError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("sample {0} has no reference; referenced grading needs one for every sample")]
    MissingReference(String),
    #[error("sample {sample} refers to unknown query {query}")]
    UnknownQuery { sample: String, query: String },
    #[error("duplicate {kind} id {id}")]
    Duplicate { kind: &'static str, id: String },
    #[error("candidate sets differ: {} pair(s) only in path 1, {} only in path 2", only_path1.len(), only_path2.len())]
    KeyMismatch {
        only_path1: Vec<String>,
        only_path2: Vec<String>,
    },
    #[error("stage {0} has not completed; run build first")]
    MissingStage(String),
    #[error("stage file {0} no longer matches its manifest digest")]
    Tampered(String),
    #[error("refinement expects a reference-free critique, got {0}")]
    ReferencedCritique(EvalSetting),
    #[error("invalid pipeline setting: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairingPolicy {
    /// Every same-query pair of distinct models.
    AllPairs,
    /// At most `per_query` pairs per query, drawn with the run seed.
    Sampled { per_query: usize },
}

impl Default for PairingPolicy {
    fn default() -> Self {
        PairingPolicy::Sampled { per_query: 3 }
    }
}

/// Which critiques of a cross-validated pair enter the reference-free set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inclusion {
    #[default]
    BothCritiques,
    Path1Only,
    Path2Only,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub pairing: PairingPolicy,
    pub inclusion: Inclusion,
    pub decoding: DecodingParams,
    /// `scale` is overwritten with the prompt kit's scale.
    pub filter: FilterPolicy,
    /// Grading dimensions per query category.
    pub dimensions: IndexMap<String, Vec<String>>,
    /// Used for categories without an entry; empty means the locale default.
    pub default_dimensions: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            pairing: PairingPolicy::default(),
            inclusion: Inclusion::default(),
            decoding: DecodingParams::greedy(),
            filter: FilterPolicy::default(),
            dimensions: IndexMap::new(),
            default_dimensions: Vec::new(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.decoding.validate()?;
        if self.decoding.num_samples != 1 {
            return Err(PipelineError::InvalidConfig(
                "pipeline stages take one completion per prompt".into(),
            ));
        }
        if matches!(self.pairing, PairingPolicy::Sampled { per_query: 0 }) {
            return Err(PipelineError::InvalidConfig(
                "per_query must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointEntry {
    pub sample: EvalSample,
    pub critique: PointwiseCritique,
}

/// A pair with the referenced pointwise critiques of both samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub pair: PairRecord,
    pub critique_1: PointwiseCritique,
    pub critique_2: PointwiseCritique,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCritiqueEntry {
    pub pair: PairRecord,
    pub critique: PairwiseCritique,
}

/// Share of candidates removed by cross validation, counted per pair and per
/// critique record. Records whose partner path never produced a candidate
/// count as discarded at record level but are outside the pair-level base.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterRate {
    pub candidate_pairs: usize,
    pub filtered_pairs: usize,
    pub pair_level: f64,
    pub candidate_records: usize,
    pub discarded_records: usize,
    pub record_level: f64,
}

impl FilterRate {
    pub fn new(
        candidate_pairs: usize,
        filtered_pairs: usize,
        candidate_records: usize,
        discarded_records: usize,
    ) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Self {
            candidate_pairs,
            filtered_pairs,
            pair_level: ratio(filtered_pairs, candidate_pairs),
            candidate_records,
            discarded_records,
            record_level: ratio(discarded_records, candidate_records),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossValidation {
    pub kept: Vec<PairCritiqueEntry>,
    pub agreed: Vec<String>,
    pub disagreed: Vec<String>,
    pub rate: FilterRate,
}

fn index_by_pair(
    entries: &[PairCritiqueEntry],
) -> Result<HashMap<String, &PairCritiqueEntry>, PipelineError> {
    let mut map = HashMap::with_capacity(entries.len());
    for e in entries {
        let id = e.pair.pair_id();
        if map.insert(id.clone(), e).is_some() {
            return Err(PipelineError::Duplicate { kind: "pair", id });
        }
    }
    Ok(map)
}

/// Keep pairs whose two reference-free verdicts agree.
pub fn cross_validate(
    path1: &[PairCritiqueEntry],
    path2: &[PairCritiqueEntry],
    inclusion: Inclusion,
) -> Result<CrossValidation, PipelineError> {
    let by1 = index_by_pair(path1)?;
    let by2 = index_by_pair(path2)?;
    let mut only_path1: Vec<String> = by1
        .keys()
        .filter(|k| !by2.contains_key(*k))
        .cloned()
        .collect();
    let mut only_path2: Vec<String> = by2
        .keys()
        .filter(|k| !by1.contains_key(*k))
        .cloned()
        .collect();
    if !only_path1.is_empty() || !only_path2.is_empty() {
        only_path1.sort();
        only_path2.sort();
        return Err(PipelineError::KeyMismatch {
            only_path1,
            only_path2,
        });
    }
    let mut out = CrossValidation {
        kept: Vec::new(),
        agreed: Vec::new(),
        disagreed: Vec::new(),
        rate: FilterRate::default(),
    };
    for a in path1 {
        let id = a.pair.pair_id();
        let b = by2[&id];
        if a.critique.verdict != b.critique.verdict {
            out.disagreed.push(id);
            continue;
        }
        match inclusion {
            Inclusion::BothCritiques => out.kept.extend([a.clone(), b.clone()]),
            Inclusion::Path1Only => out.kept.push(a.clone()),
            Inclusion::Path2Only => out.kept.push(b.clone()),
        }
        out.agreed.push(id);
    }
    let n = path1.len();
    out.rate = FilterRate::new(n, out.disagreed.len(), 2 * n, 2 * out.disagreed.len());
    Ok(out)
}

fn query_seed(seed: u64, query_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(query_id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Same-query pairs of graded samples. Pairs keep input order, the earlier
/// sample in position 1.
pub fn make_pairs(d_point_r: &[PointEntry], policy: PairingPolicy, seed: u64) -> Vec<PairEntry> {
    let mut groups: IndexMap<&str, Vec<&PointEntry>> = IndexMap::new();
    for e in d_point_r {
        groups
            .entry(e.sample.query_id.as_str())
            .or_default()
            .push(e);
    }
    let mut pairs = Vec::new();
    for (query_id, members) in groups {
        let mut idx: Vec<(usize, usize)> = Vec::new();
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                if members[i].sample.model_id != members[j].sample.model_id {
                    idx.push((i, j));
                }
            }
        }
        if let PairingPolicy::Sampled { per_query } = policy {
            if idx.len() > per_query {
                idx.shuffle(&mut ChaCha8Rng::seed_from_u64(query_seed(seed, query_id)));
                idx.truncate(per_query);
                idx.sort_unstable();
            }
        }
        for (i, j) in idx {
            let (a, b) = (members[i], members[j]);
            let reference = a
                .sample
                .reference
                .clone()
                .or_else(|| b.sample.reference.clone());
            let pair = PairRecord::new(a.sample.clone(), b.sample.clone(), reference, None)
                .expect("same query and distinct models checked above");
            pairs.push(PairEntry {
                pair,
                critique_1: a.critique.clone(),
                critique_2: b.critique.clone(),
            });
        }
    }
    pairs
}

/// Everything the construction stages produce.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineState {
    pub d_point_r: Vec<PointEntry>,
    pub pairs: Vec<PairEntry>,
    pub d_pair_r: Vec<PairCritiqueEntry>,
    pub path1_candidates: Vec<PairCritiqueEntry>,
    pub d_point_rf: Vec<PointEntry>,
    pub path2_candidates: Vec<PairCritiqueEntry>,
    pub d_pair_rf: Vec<PairCritiqueEntry>,
    pub filter_rate: Option<FilterRate>,
    pub ledger: Vec<StageLedger>,
    pub events: Vec<DropEvent>,
}

impl PipelineState {
    fn absorb<T>(&mut self, out: StageOutput<T>) -> Vec<T> {
        self.ledger.push(out.ledger);
        self.events.extend(out.events);
        out.kept
    }
}

/// Per-setting SFT record counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SftCounts {
    pub point_r: usize,
    pub point_rf: usize,
    pub pair_r: usize,
    pub pair_rf: usize,
}

impl SftCounts {
    pub fn of(records: &[SftRecord]) -> Self {
        let mut c = Self::default();
        for r in records {
            match r.setting {
                EvalSetting::POINT_R => c.point_r += 1,
                EvalSetting::POINT_RF => c.point_rf += 1,
                EvalSetting::PAIR_R => c.pair_r += 1,
                _ => c.pair_rf += 1,
            }
        }
        c
    }
}

impl std::fmt::Display for SftCounts {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} / {} / {} / {}",
            self.point_r, self.point_rf, self.pair_r, self.pair_rf
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Refined {
    pub text: String,
    pub changed: bool,
    pub warnings: Vec<String>,
}

enum Prep {
    Ask(String),
    Skip(DropReason, String),
}

/// Stage operations bound to one judge, prompt kit and query set.
pub struct Pipeline<'a> {
    client: &'a JudgeClient,
    kit: &'a PromptKit,
    config: PipelineConfig,
    seed: u64,
    queries: HashMap<String, Query>,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        client: &'a JudgeClient,
        kit: &'a PromptKit,
        mut config: PipelineConfig,
        seed: u64,
        queries: &[Query],
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        config.filter.scale = kit.scale();
        let mut map = HashMap::with_capacity(queries.len());
        for q in queries {
            if map.insert(q.id.clone(), q.clone()).is_some() {
                return Err(PipelineError::Duplicate {
                    kind: "query",
                    id: q.id.clone(),
                });
            }
        }
        Ok(Self {
            client,
            kit,
            config,
            seed,
            queries: map,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn kit(&self) -> &PromptKit {
        self.kit
    }

    fn query(&self, id: &str) -> &Query {
        &self.queries[id]
    }

    pub fn dimensions(&self, category: &str) -> Vec<String> {
        match self.config.dimensions.get(category) {
            Some(d) => d.clone(),
            None if !self.config.default_dimensions.is_empty() => {
                self.config.default_dimensions.clone()
            }
            None => self.kit.locale().default_dimensions(),
        }
    }

    fn run_stage<I, T>(
        &self,
        stage: &str,
        items: &[I],
        key: impl Fn(&I) -> String,
        prepare: impl Fn(&I) -> Result<Prep, PipelineError>,
        parse: impl Fn(&str) -> Result<ParseOutcome, ParseError>,
        keep: impl Fn(&I, ParseOutcome) -> T,
    ) -> Result<StageOutput<T>, PipelineError> {
        let mut out = StageOutput::new(stage, items.len());
        let preps = items.iter().map(&prepare).collect::<Result<Vec<_>, _>>()?;
        let requests: Vec<JudgeRequest> = items
            .iter()
            .zip(&preps)
            .filter_map(|(item, p)| match p {
                Prep::Ask(text) => Some(JudgeRequest::prompt(
                    text.clone(),
                    self.config.decoding,
                    format!("{stage}:{}", key(item)),
                )),
                Prep::Skip(..) => None,
            })
            .collect();
        let mut responses = self.client.complete_all(&requests).into_iter();
        for (item, prep) in items.iter().zip(preps) {
            let k = key(item);
            match prep {
                Prep::Skip(reason, detail) => out.drop(k, reason, detail),
                Prep::Ask(_) => match responses.next().expect("one response per request") {
                    Err(JudgeError::Refusal(msg)) => out.drop(k, DropReason::BackendRefusal, msg),
                    Err(e) => return Err(e.into()),
                    Ok(response) => {
                        let parsed = parse(response.first());
                        match rule_filter(&parsed, &self.config.filter) {
                            Decision::Keep => {
                                out.keep(keep(item, parsed.expect("kept outcomes parsed")))
                            }
                            Decision::Drop(reason) => {
                                let detail =
                                    parsed.err().map(|e| e.to_string()).unwrap_or_default();
                                out.drop(k, reason, detail)
                            }
                        }
                    }
                },
            }
        }
        Ok(out)
    }

    fn parse_point(
        &self,
        grounding: Grounding,
    ) -> impl Fn(&str) -> Result<ParseOutcome, ParseError> + '_ {
        move |raw| parse_pointwise(raw, self.kit.scale(), self.kit.locale(), grounding)
    }

    fn parse_pair(
        &self,
        grounding: Grounding,
    ) -> impl Fn(&str) -> Result<ParseOutcome, ParseError> + '_ {
        move |raw| parse_pairwise(raw, self.kit.locale(), grounding)
    }

    fn check_samples(&self, samples: &[EvalSample]) -> Result<(), PipelineError> {
        let mut seen = HashSet::new();
        for s in samples {
            if !self.queries.contains_key(&s.query_id) {
                return Err(PipelineError::UnknownQuery {
                    sample: s.key(),
                    query: s.query_id.clone(),
                });
            }
            if !s.reference.as_deref().is_some_and(|r| !r.trim().is_empty()) {
                return Err(PipelineError::MissingReference(s.key()));
            }
            s.validate()?;
            if !seen.insert(s.key()) {
                return Err(PipelineError::Duplicate {
                    kind: "sample",
                    id: s.key(),
                });
            }
        }
        Ok(())
    }

    /// Referenced pointwise grading of every sample. Preconditions are
    /// checked before any judge call.
    pub fn build_point_referenced(
        &self,
        samples: &[EvalSample],
    ) -> Result<StageOutput<PointEntry>, PipelineError> {
        self.check_samples(samples)?;
        self.run_stage(
            "point_r",
            samples,
            EvalSample::key,
            |s| {
                let q = self.query(&s.query_id);
                let dims = self.dimensions(&q.category);
                Ok(Prep::Ask(self.kit.render_referenced_pointwise(
                    &q.text,
                    s.reference.as_deref(),
                    &s.text,
                    &dims,
                )?))
            },
            self.parse_point(Grounding::Referenced),
            |s, o| PointEntry {
                sample: s.clone(),
                critique: o.pointwise().expect("pointwise").clone(),
            },
        )
    }

    pub fn make_pairs(&self, d_point_r: &[PointEntry]) -> Vec<PairEntry> {
        make_pairs(d_point_r, self.config.pairing, self.seed)
    }

    fn pair_critique(pair: &PairRecord, o: ParseOutcome, path: CritiquePath) -> PairCritiqueEntry {
        let mut critique = o.pairwise().expect("pairwise").clone();
        critique.path = path;
        PairCritiqueEntry {
            pair: pair.clone(),
            critique,
        }
    }

    /// Pointwise-to-pairwise with the reference, then reference removal.
    pub fn run_path1(
        &self,
        pairs: &[PairEntry],
    ) -> Result<
        (
            StageOutput<PairCritiqueEntry>,
            StageOutput<PairCritiqueEntry>,
        ),
        PipelineError,
    > {
        let referenced = self.run_stage(
            "path1_p2p",
            pairs,
            |e| e.pair.pair_id(),
            |e| {
                let q = self.query(&e.pair.query_id);
                Ok(Prep::Ask(self.kit.render_p2p(
                    &q.text,
                    e.pair.reference.as_deref(),
                    &e.pair.sample_1.text,
                    &e.pair.sample_2.text,
                    &e.critique_1,
                    &e.critique_2,
                    &self.dimensions(&q.category),
                )?))
            },
            self.parse_pair(Grounding::Referenced),
            |e, o| Self::pair_critique(&e.pair, o, CritiquePath::Path1),
        )?;
        let free = self.run_stage(
            "path1_r2rf",
            &referenced.kept,
            |e| e.pair.pair_id(),
            |e| {
                let q = self.query(&e.pair.query_id);
                let payload = R2rfPayload::Pair {
                    sample_1: &e.pair.sample_1.text,
                    sample_2: &e.pair.sample_2.text,
                    critique: &e.critique,
                };
                Ok(Prep::Ask(self.kit.render_r2rf(
                    &q.text,
                    e.pair.reference.as_deref(),
                    payload,
                )?))
            },
            self.parse_pair(Grounding::ReferenceFree),
            |e, o| Self::pair_critique(&e.pair, o, CritiquePath::Path1),
        )?;
        Ok((referenced, free))
    }

    /// Reference removal per sample, then reference-free pointwise-to-pairwise.
    /// Pairs missing either reference-free critique are cascade skips.
    pub fn run_path2(
        &self,
        d_point_r: &[PointEntry],
        pairs: &[PairEntry],
    ) -> Result<(StageOutput<PointEntry>, StageOutput<PairCritiqueEntry>), PipelineError> {
        let point_rf = self.run_stage(
            "point_rf",
            d_point_r,
            |e| e.sample.key(),
            |e| {
                let q = self.query(&e.sample.query_id);
                let payload = R2rfPayload::Point {
                    sample: &e.sample.text,
                    critique: &e.critique,
                };
                Ok(Prep::Ask(self.kit.render_r2rf(
                    &q.text,
                    e.sample.reference.as_deref(),
                    payload,
                )?))
            },
            self.parse_point(Grounding::ReferenceFree),
            |e, o| PointEntry {
                sample: e.sample.clone(),
                critique: o.pointwise().expect("pointwise").clone(),
            },
        )?;
        let rf: HashMap<String, &PointwiseCritique> = point_rf
            .kept
            .iter()
            .map(|e| (e.sample.key(), &e.critique))
            .collect();
        let pair_rf = self.run_stage(
            "path2_p2p",
            pairs,
            |e| e.pair.pair_id(),
            |e| {
                let (k1, k2) = (e.pair.sample_1.key(), e.pair.sample_2.key());
                let (Some(c1), Some(c2)) = (rf.get(&k1), rf.get(&k2)) else {
                    let missing = if rf.contains_key(&k1) { k2 } else { k1 };
                    return Ok(Prep::Skip(
                        DropReason::CascadeSkip,
                        format!("no reference-free critique for {missing}"),
                    ));
                };
                let q = self.query(&e.pair.query_id);
                Ok(Prep::Ask(self.kit.render_p2p(
                    &q.text,
                    None,
                    &e.pair.sample_1.text,
                    &e.pair.sample_2.text,
                    c1,
                    c2,
                    &self.dimensions(&q.category),
                )?))
            },
            self.parse_pair(Grounding::ReferenceFree),
            |e, o| Self::pair_critique(&e.pair, o, CritiquePath::Path2),
        )?;
        Ok((point_rf, pair_rf))
    }

    /// Cross validation over all pairs. Pairs lacking a candidate from either
    /// path are cascade skips; the ledger counts pairs, the output holds
    /// records per the inclusion policy.
    pub fn cross_validate_stage(
        &self,
        pairs: &[PairEntry],
        path1: &[PairCritiqueEntry],
        path2: &[PairCritiqueEntry],
    ) -> Result<(StageOutput<PairCritiqueEntry>, FilterRate), PipelineError> {
        let mut out = StageOutput::new("cross_validate", pairs.len());
        let ids1: HashSet<String> = path1.iter().map(|e| e.pair.pair_id()).collect();
        let ids2: HashSet<String> = path2.iter().map(|e| e.pair.pair_id()).collect();
        let both: HashSet<&String> = ids1.intersection(&ids2).collect();
        for e in pairs {
            let id = e.pair.pair_id();
            if !both.contains(&id) {
                let side = if ids1.contains(&id) {
                    "path 2"
                } else if ids2.contains(&id) {
                    "path 1"
                } else {
                    "both paths"
                };
                out.drop(
                    id,
                    DropReason::CascadeSkip,
                    format!("no candidate from {side}"),
                );
            }
        }
        let a: Vec<PairCritiqueEntry> = path1
            .iter()
            .filter(|e| both.contains(&e.pair.pair_id()))
            .cloned()
            .collect();
        let b: Vec<PairCritiqueEntry> = path2
            .iter()
            .filter(|e| both.contains(&e.pair.pair_id()))
            .cloned()
            .collect();
        let cv = cross_validate(&a, &b, self.config.inclusion)?;
        for id in &cv.disagreed {
            out.drop(id.clone(), DropReason::Disagreement, String::new());
        }
        out.ledger.output = cv.agreed.len();
        out.kept = cv.kept;
        let orphans = path1.len() + path2.len() - a.len() - b.len();
        let rate = FilterRate::new(
            cv.rate.candidate_pairs,
            cv.rate.filtered_pairs,
            path1.len() + path2.len(),
            cv.rate.discarded_records + orphans,
        );
        Ok((out, rate))
    }

    /// All stages in memory, without persistence.
    pub fn run_all(&self, samples: &[EvalSample]) -> Result<PipelineState, PipelineError> {
        let mut state = PipelineState::default();
        state.d_point_r = state.absorb(self.build_point_referenced(samples)?);
        state.pairs = self.make_pairs(&state.d_point_r);
        let (p2p, r2rf) = self.run_path1(&state.pairs)?;
        state.d_pair_r = state.absorb(p2p);
        state.path1_candidates = state.absorb(r2rf);
        let (point_rf, p2p_rf) = self.run_path2(&state.d_point_r, &state.pairs)?;
        state.d_point_rf = state.absorb(point_rf);
        state.path2_candidates = state.absorb(p2p_rf);
        let (cv, rate) = self.cross_validate_stage(
            &state.pairs,
            &state.path1_candidates,
            &state.path2_candidates,
        )?;
        state.d_pair_rf = state.absorb(cv);
        state.filter_rate = Some(rate);
        Ok(state)
    }

    fn sft_point(&self, setting: EvalSetting, e: &PointEntry) -> Result<SftRecord, PipelineError> {
        let q = self.query(&e.sample.query_id);
        let input = self.kit.render_sft_input(
            setting,
            &q.text,
            e.sample.reference.as_deref(),
            &[&e.sample.text],
            &self.dimensions(&q.category),
        )?;
        Ok(SftRecord {
            setting,
            input_prompt: input,
            target: e.critique.explanation.clone(),
            swap_augmented: false,
        })
    }

    fn sft_pair(
        &self,
        setting: EvalSetting,
        e: &PairCritiqueEntry,
        swap: bool,
    ) -> Result<Vec<SftRecord>, PipelineError> {
        let q = self.query(&e.pair.query_id);
        let dims = self.dimensions(&q.category);
        let render = |a: &str, b: &str| {
            self.kit.render_sft_input(
                setting,
                &q.text,
                e.pair.reference.as_deref(),
                &[a, b],
                &dims,
            )
        };
        let (s1, s2) = (&e.pair.sample_1.text, &e.pair.sample_2.text);
        let mut out = vec![SftRecord {
            setting,
            input_prompt: render(s1, s2)?,
            target: e.critique.explanation.clone(),
            swap_augmented: false,
        }];
        if swap {
            out.push(SftRecord {
                setting,
                input_prompt: render(s2, s1)?,
                target: swap_assistant_labels(&e.critique.explanation),
                swap_augmented: true,
            });
        }
        Ok(out)
    }

    /// SFT records for the four settings, in the order point_r, point_rf,
    /// pair_r, pair_rf. With `swap_augment` every pairwise record is
    /// followed by its mirror.
    pub fn emit_sft(
        &self,
        state: &PipelineState,
        swap_augment: bool,
    ) -> Result<Vec<SftRecord>, PipelineError> {
        let mut out = Vec::new();
        for e in &state.d_point_r {
            out.push(self.sft_point(EvalSetting::POINT_R, e)?);
        }
        for e in &state.d_point_rf {
            out.push(self.sft_point(EvalSetting::POINT_RF, e)?);
        }
        for e in &state.d_pair_r {
            out.extend(self.sft_pair(EvalSetting::PAIR_R, e, swap_augment)?);
        }
        for e in &state.d_pair_rf {
            out.extend(self.sft_pair(EvalSetting::PAIR_RF, e, swap_augment)?);
        }
        Ok(out)
    }
}

/// Ask `generator` to revise `response` under a reference-free critique.
/// An empty critique returns the response untouched.
pub fn refine_with_critique(
    generator: &JudgeClient,
    kit: &PromptKit,
    query: &str,
    response: &str,
    critique: &Critique,
) -> Result<Refined, PipelineError> {
    if critique.setting().is_referenced() {
        return Err(PipelineError::ReferencedCritique(critique.setting()));
    }
    if critique.explanation().trim().is_empty() {
        return Ok(Refined {
            text: response.to_string(),
            changed: false,
            warnings: vec!["empty critique; response left unchanged".into()],
        });
    }
    let rendered = kit.render_refine_with_critique(query, response, critique);
    let reply = generator.complete(&JudgeRequest::prompt(
        rendered.text,
        DecodingParams::greedy(),
        "refine",
    ))?;
    let text = reply.first().to_string();
    Ok(Refined {
        changed: text != response,
        text,
        warnings: rendered.warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::SyntheticOracle;
    use crate::model::{Locale, Verdict};
    use crate::parse::{pairwise_fragment, pointwise_fragment};
    use std::sync::Arc;

    fn sample(q: &str, m: &str) -> EvalSample {
        EvalSample {
            query_id: q.into(),
            model_id: m.into(),
            text: format!("{m} on {q}"),
            reference: Some("r".into()),
        }
    }

    fn point(q: &str, m: &str, score: i32) -> PointEntry {
        let scores: IndexMap<String, i32> = [("Overall Score".to_string(), score)].into();
        PointEntry {
            sample: sample(q, m),
            critique: PointwiseCritique {
                explanation: pointwise_fragment(&scores),
                dimension_scores: scores,
                overall_score: score,
                setting: EvalSetting::POINT_R,
            },
        }
    }

    fn candidate(q: &str, verdict: Verdict, path: CritiquePath) -> PairCritiqueEntry {
        PairCritiqueEntry {
            pair: PairRecord::new(sample(q, "a"), sample(q, "b"), Some("r".into()), None).unwrap(),
            critique: PairwiseCritique {
                verdict,
                explanation: format!(
                    "Assistant 1 vs Assistant 2.\n{}",
                    pairwise_fragment(verdict, Locale::En)
                ),
                setting: EvalSetting::PAIR_RF,
                path,
            },
        }
    }

    #[test]
    fn cross_validation_examples() {
        use Verdict::*;
        let p1: Vec<_> = [Win1, Tie, Win2]
            .iter()
            .enumerate()
            .map(|(i, &v)| candidate(&format!("q{i}"), v, CritiquePath::Path1))
            .collect();
        let p2: Vec<_> = [Win1, Win1, Win2]
            .iter()
            .enumerate()
            .map(|(i, &v)| candidate(&format!("q{i}"), v, CritiquePath::Path2))
            .collect();
        let cv = cross_validate(&p1, &p2, Inclusion::BothCritiques).unwrap();
        assert_eq!(cv.agreed, ["q0::a~b", "q2::a~b"]);
        assert!((cv.rate.pair_level - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cv.kept.len(), 4);
        assert_eq!(
            cross_validate(&p1, &p2, Inclusion::Path2Only).unwrap().kept[1]
                .critique
                .path,
            CritiquePath::Path2
        );

        let same = cross_validate(&p1, &p1, Inclusion::BothCritiques).unwrap();
        assert_eq!((same.rate.pair_level, same.kept.len()), (0.0, 6));

        let other = vec![candidate("zz", Win1, CritiquePath::Path2)];
        assert!(matches!(
            cross_validate(&p1[..1], &other, Inclusion::BothCritiques),
            Err(PipelineError::KeyMismatch { .. })
        ));
    }

    #[test]
    fn pairing_policies() {
        let d: Vec<PointEntry> = ["a", "b", "c", "d"]
            .iter()
            .map(|m| point("q1", m, 5))
            .chain([point("q2", "a", 5)])
            .collect();
        assert_eq!(make_pairs(&d, PairingPolicy::AllPairs, 0).len(), 6);
        let k2 = make_pairs(&d, PairingPolicy::Sampled { per_query: 2 }, 9);
        assert_eq!(k2.len(), 2);
        assert_eq!(
            k2,
            make_pairs(&d, PairingPolicy::Sampled { per_query: 2 }, 9)
        );
        assert!(k2
            .iter()
            .all(|p| p.pair.query_id == "q1" && p.pair.reference.is_some()));
        let dup = vec![point("q", "a", 1), point("q", "a", 2)];
        assert!(make_pairs(&dup, PairingPolicy::AllPairs, 0).is_empty());
    }

    fn setup(locale: Locale) -> (JudgeClient, PromptKit, Vec<Query>) {
        let client = JudgeClient::new(Arc::new(SyntheticOracle::noiseless(1)));
        let kit = PromptKit::builtin(locale);
        let queries = ["q0", "q1", "q2"]
            .iter()
            .map(|id| Query {
                id: id.to_string(),
                text: format!("question {id}"),
                category: locale.default_categories()[0].clone(),
                difficulty: None,
                origin: crate::model::Origin::Seed,
            })
            .collect();
        (client, kit, queries)
    }

    #[test]
    fn sft_swap_doubles_pairwise_and_mirrors() {
        let (client, kit, queries) = setup(Locale::En);
        let pipeline =
            Pipeline::new(&client, &kit, PipelineConfig::default(), 0, &queries).unwrap();
        let state = PipelineState {
            d_pair_r: (0..3)
                .map(|i| candidate(&format!("q{i}"), Verdict::Win1, CritiquePath::Path1))
                .collect(),
            ..Default::default()
        };
        let plain = pipeline.emit_sft(&state, false).unwrap();
        let swapped = pipeline.emit_sft(&state, true).unwrap();
        assert_eq!((plain.len(), swapped.len()), (3, 6));
        let mirror = &swapped[1];
        assert!(mirror.swap_augmented);
        let v = parse_pairwise(&mirror.target, Locale::En, Grounding::Referenced).unwrap();
        assert_eq!(v.pairwise().unwrap().verdict, Verdict::Win2);
        assert_eq!(swap_assistant_labels(&mirror.target), swapped[0].target);
        assert_eq!(SftCounts::of(&swapped).to_string(), "0 / 0 / 6 / 0");
    }

    #[test]
    fn refine_contract() {
        let (client, kit, _) = setup(Locale::En);
        let rf = Critique::Pairwise(candidate("q", Verdict::Win1, CritiquePath::Path1).critique);
        let out = refine_with_critique(&client, &kit, "q", "draft", &rf).unwrap();
        assert!(out.changed && out.text.starts_with("draft"));

        let mut empty = candidate("q", Verdict::Win1, CritiquePath::Path1).critique;
        empty.explanation = " ".into();
        let calls = client.backend_calls();
        let out =
            refine_with_critique(&client, &kit, "q", "draft", &Critique::Pairwise(empty)).unwrap();
        assert_eq!(
            (out.text.as_str(), out.changed, out.warnings.len()),
            ("draft", false, 1)
        );
        assert_eq!(client.backend_calls(), calls);

        let referenced = Critique::Pointwise(point("q", "a", 3).critique);
        assert!(matches!(
            refine_with_critique(&client, &kit, "q", "draft", &referenced),
            Err(PipelineError::ReferencedCritique(_))
        ));
    }
}
