//! Persisted, resumable execution of the construction stages.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::store::{sha256_hex, to_jsonl, FileEntry, RunStore, SCHEMA_VERSION};
use super::{
    DropEvent, FilterRate, PairCritiqueEntry, PairEntry, Pipeline, PipelineError, PipelineState,
    PointEntry, StageLedger,
};
use crate::model::{EvalSample, Locale, Query};
use crate::prompt::TEMPLATE_VERSION;

pub const MANIFEST: &str = "manifest.json";

/// Persisted stages in execution order.
pub const STAGES: [&str; 5] = ["point_r", "pairs", "path1", "path2", "cross_validate"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub name: String,
    pub files: BTreeMap<String, FileEntry>,
    pub ledgers: Vec<StageLedger>,
}

impl StageEntry {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            files: BTreeMap::new(),
            ledgers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub template_version: String,
    pub seed: u64,
    pub locale: Locale,
    pub backend: String,
    /// Digest of pipeline settings and prompt assets.
    pub config_digest: String,
    /// Digest of the ingested queries and samples.
    pub input_digest: String,
    pub stages: Vec<StageEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_rate: Option<FilterRate>,
    pub complete: bool,
}

impl Manifest {
    pub fn stage(&self, name: &str) -> Option<&StageEntry> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn ledger(&self) -> impl Iterator<Item = &StageLedger> {
        self.stages.iter().flat_map(|s| &s.ledgers)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BuildOptions {
    /// Stop after persisting this stage, as an interrupted run would.
    pub stop_after: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildSummary {
    pub manifest: Manifest,
    pub state: PipelineState,
    /// Stages loaded from disk instead of recomputed.
    pub reused: Vec<String>,
}

struct Runner<'s> {
    store: &'s RunStore,
    prior: Option<Manifest>,
    manifest: Manifest,
    stale: bool,
    reused: Vec<String>,
}

impl Runner<'_> {
    /// A prior stage entry whose files are intact, unless something upstream
    /// was recomputed.
    fn reusable(&mut self, name: &str) -> Option<StageEntry> {
        if self.stale {
            return None;
        }
        let entry = self.prior.as_ref()?.stage(name)?.clone();
        if entry
            .files
            .iter()
            .all(|(f, e)| self.store.verify(f, &e.digest))
        {
            Some(entry)
        } else {
            log::warn!("stage {name}: files changed since the last run, recomputing");
            None
        }
    }

    fn commit(&mut self, entry: StageEntry, reused: bool) -> Result<(), PipelineError> {
        if reused {
            self.reused.push(entry.name.clone());
        } else {
            self.stale = true;
        }
        self.manifest.stages.push(entry);
        self.store.write_json(MANIFEST, &self.manifest)?;
        Ok(())
    }
}

fn write<T: Serialize>(
    store: &RunStore,
    entry: &mut StageEntry,
    name: &str,
    records: &[T],
) -> Result<(), PipelineError> {
    entry.files.insert(name.into(), store.write(name, records)?);
    Ok(())
}

fn config_digest(pipeline: &Pipeline<'_>) -> String {
    let config = serde_json::to_vec(pipeline.config()).expect("config serializes");
    sha256_hex(
        format!(
            "{}|{}|{}",
            hex_of(&config),
            pipeline.kit.fingerprint(),
            pipeline.seed
        )
        .as_bytes(),
    )
}

fn hex_of(bytes: &[u8]) -> String {
    sha256_hex(bytes)
}

fn input_digest(queries: &[Query], samples: &[EvalSample]) -> String {
    let mut bytes = to_jsonl(queries).expect("queries serialize");
    bytes.extend(to_jsonl(samples).expect("samples serialize"));
    sha256_hex(&bytes)
}

/// Run every stage, persisting each one to `store` before the next starts.
/// Stages recorded in an earlier manifest with identical settings, inputs
/// and intact files are loaded instead of recomputed.
pub fn build(
    pipeline: &Pipeline<'_>,
    queries: &[Query],
    samples: &[EvalSample],
    store: &RunStore,
    options: &BuildOptions,
) -> Result<BuildSummary, PipelineError> {
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        template_version: TEMPLATE_VERSION.into(),
        seed: pipeline.seed,
        locale: pipeline.kit.locale(),
        backend: pipeline.client.backend_id().to_string(),
        config_digest: config_digest(pipeline),
        input_digest: input_digest(queries, samples),
        stages: Vec::new(),
        filter_rate: None,
        complete: false,
    };
    let prior = store.read_json::<Manifest>(MANIFEST).ok().filter(|m| {
        m.schema_version == SCHEMA_VERSION
            && m.config_digest == manifest.config_digest
            && m.input_digest == manifest.input_digest
    });
    let mut run = Runner {
        store,
        prior,
        manifest,
        stale: false,
        reused: Vec::new(),
    };
    let mut state = PipelineState::default();
    let stop = |name: &str| options.stop_after.as_deref() == Some(name);
    macro_rules! finish_if_stopped {
        ($name:expr) => {
            if stop($name) {
                return Ok(BuildSummary {
                    manifest: run.manifest,
                    state,
                    reused: run.reused,
                });
            }
        };
    }

    match run.reusable("point_r") {
        Some(entry) => {
            state.d_point_r = store.read("point_r.jsonl")?;
            restore(&mut state, store, &entry, "point_r.drops.jsonl")?;
            run.commit(entry, true)?;
        }
        None => {
            let mut entry = StageEntry::new("point_r");
            let out = pipeline.build_point_referenced(samples)?;
            write(store, &mut entry, "point_r.jsonl", &out.kept)?;
            write(store, &mut entry, "point_r.drops.jsonl", &out.events)?;
            entry.ledgers.push(out.ledger.clone());
            state.d_point_r = state.absorb(out);
            run.commit(entry, false)?;
        }
    }
    finish_if_stopped!("point_r");

    match run.reusable("pairs") {
        Some(entry) => {
            state.pairs = store.read("pairs.jsonl")?;
            run.commit(entry, true)?;
        }
        None => {
            let mut entry = StageEntry::new("pairs");
            state.pairs = pipeline.make_pairs(&state.d_point_r);
            write(store, &mut entry, "pairs.jsonl", &state.pairs)?;
            run.commit(entry, false)?;
        }
    }
    finish_if_stopped!("pairs");

    match run.reusable("path1") {
        Some(entry) => {
            state.d_pair_r = store.read("pair_r.jsonl")?;
            state.path1_candidates = store.read("path1.candidates.jsonl")?;
            restore(&mut state, store, &entry, "path1.drops.jsonl")?;
            run.commit(entry, true)?;
        }
        None => {
            let mut entry = StageEntry::new("path1");
            let (p2p, r2rf) = pipeline.run_path1(&state.pairs)?;
            write(store, &mut entry, "pair_r.jsonl", &p2p.kept)?;
            write(store, &mut entry, "path1.candidates.jsonl", &r2rf.kept)?;
            let events: Vec<&DropEvent> = p2p.events.iter().chain(&r2rf.events).collect();
            write(store, &mut entry, "path1.drops.jsonl", &events)?;
            entry
                .ledgers
                .extend([p2p.ledger.clone(), r2rf.ledger.clone()]);
            state.d_pair_r = state.absorb(p2p);
            state.path1_candidates = state.absorb(r2rf);
            run.commit(entry, false)?;
        }
    }
    finish_if_stopped!("path1");

    match run.reusable("path2") {
        Some(entry) => {
            state.d_point_rf = store.read("point_rf.jsonl")?;
            state.path2_candidates = store.read("path2.candidates.jsonl")?;
            restore(&mut state, store, &entry, "path2.drops.jsonl")?;
            run.commit(entry, true)?;
        }
        None => {
            let mut entry = StageEntry::new("path2");
            let (point_rf, p2p_rf) = pipeline.run_path2(&state.d_point_r, &state.pairs)?;
            write(store, &mut entry, "point_rf.jsonl", &point_rf.kept)?;
            write(store, &mut entry, "path2.candidates.jsonl", &p2p_rf.kept)?;
            let events: Vec<&DropEvent> = point_rf.events.iter().chain(&p2p_rf.events).collect();
            write(store, &mut entry, "path2.drops.jsonl", &events)?;
            entry
                .ledgers
                .extend([point_rf.ledger.clone(), p2p_rf.ledger.clone()]);
            state.d_point_rf = state.absorb(point_rf);
            state.path2_candidates = state.absorb(p2p_rf);
            run.commit(entry, false)?;
        }
    }
    finish_if_stopped!("path2");

    let reused_cv = run.reusable("cross_validate");
    let prior_rate = run.prior.as_ref().and_then(|m| m.filter_rate);
    match reused_cv {
        Some(entry) if prior_rate.is_some() => {
            state.d_pair_rf = store.read("pair_rf.jsonl")?;
            restore(&mut state, store, &entry, "cross_validate.drops.jsonl")?;
            state.filter_rate = prior_rate;
            run.manifest.filter_rate = prior_rate;
            run.manifest.complete = true;
            run.commit(entry, true)?;
        }
        _ => {
            let mut entry = StageEntry::new("cross_validate");
            let (cv, rate) = pipeline.cross_validate_stage(
                &state.pairs,
                &state.path1_candidates,
                &state.path2_candidates,
            )?;
            write(store, &mut entry, "pair_rf.jsonl", &cv.kept)?;
            write(store, &mut entry, "cross_validate.drops.jsonl", &cv.events)?;
            entry.ledgers.push(cv.ledger.clone());
            state.d_pair_rf = state.absorb(cv);
            state.filter_rate = Some(rate);
            run.manifest.filter_rate = Some(rate);
            run.manifest.complete = true;
            run.commit(entry, false)?;
        }
    }
    Ok(BuildSummary {
        manifest: run.manifest,
        state,
        reused: run.reused,
    })
}

fn restore(
    state: &mut PipelineState,
    store: &RunStore,
    entry: &StageEntry,
    drops: &str,
) -> Result<(), PipelineError> {
    state.ledger.extend(entry.ledgers.iter().cloned());
    state.events.extend(store.read::<DropEvent>(drops)?);
    Ok(())
}

/// Load a finished run. Fails naming the first stage that is missing and
/// on any file whose digest no longer matches the manifest.
pub fn load_state(store: &RunStore) -> Result<(Manifest, PipelineState), PipelineError> {
    let manifest: Manifest = store
        .read_json(MANIFEST)
        .map_err(|_| PipelineError::MissingStage(STAGES[0].to_string()))?;
    for name in STAGES {
        let entry = manifest
            .stage(name)
            .ok_or_else(|| PipelineError::MissingStage(name.to_string()))?;
        for (file, e) in &entry.files {
            if !store.verify(file, &e.digest) {
                return Err(PipelineError::Tampered(file.clone()));
            }
        }
    }
    let state = PipelineState {
        d_point_r: store.read::<PointEntry>("point_r.jsonl")?,
        pairs: store.read::<PairEntry>("pairs.jsonl")?,
        d_pair_r: store.read::<PairCritiqueEntry>("pair_r.jsonl")?,
        path1_candidates: store.read::<PairCritiqueEntry>("path1.candidates.jsonl")?,
        d_point_rf: store.read::<PointEntry>("point_rf.jsonl")?,
        path2_candidates: store.read::<PairCritiqueEntry>("path2.candidates.jsonl")?,
        d_pair_rf: store.read::<PairCritiqueEntry>("pair_rf.jsonl")?,
        filter_rate: manifest.filter_rate,
        ledger: manifest.ledger().cloned().collect(),
        events: Vec::new(),
    };
    Ok((manifest, state))
}
