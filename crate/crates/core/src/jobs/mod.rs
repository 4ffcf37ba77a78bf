//! File-level jobs behind the command-line tool: configuration, backend
//! wiring, ingestion and report writing.

mod config;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    AugmentJob, BackendKind, BuildJob, Config, EmitSftJob, JudgmentInput, MetaEvalJob, MockConfig,
    MockRule, OracleConfig, Overrides, RefineJob, ScoreInput,
};

use crate::augment::{run_augmentation, AugmentError, AugmentReport};
use crate::judge::{
    Backend, DecodingParams, JudgeClient, JudgeError, JudgeRequest, LiveBackend, QualityBook,
    ResponseCache, ScriptedBackend, SyntheticOracle,
};
use crate::metrics::report::{
    agreement_table, correlation_table, AgreementCells, CorrelationCells,
};
use crate::metrics::{
    agreement_consistency, system_level, text_level, AgreementReport, CorrelationReport, Level,
    MetricError, ScoreRow, ScoreTable, SwapJudgment, TextLevelOptions,
};
use crate::model::{
    Critique, EvalSetting, Grounding, ModelError, PointwiseCritique, Query, SftRecord,
};
use crate::parse::parse_pointwise;
use crate::pipeline::store::{read_jsonl, write_atomic, write_jsonl};
use crate::pipeline::{
    build, load_state, refine_with_critique, BuildOptions, BuildSummary, Pipeline, PipelineError,
    RunStore, SftCounts, StoreError,
};
use crate::prompt::{PromptError, PromptKit};
use crate::synth::{SynthCorpus, SynthSpec};

#[derive(Debug, Error)]
pub enum JobError {
    #[error("{0}")]
    Config(String),
    #[error("input file not found: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("input file has no records: {}", .0.display())]
    EmptyInput(PathBuf),
    #[error("{}: {source}", path.display())]
    Invalid { path: PathBuf, source: ModelError },
    #[error("{context}: {source}")]
    Metric {
        context: String,
        source: MetricError,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl JobError {
    /// 2 for configuration and usage problems, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            JobError::Config(_)
            | JobError::MissingInput(_)
            | JobError::EmptyInput(_)
            | JobError::Invalid { .. }
            | JobError::Pipeline(PipelineError::MissingStage(_))
            | JobError::Pipeline(PipelineError::InvalidConfig(_))
            | JobError::Augment(AugmentError::InvalidConfig(_))
            | JobError::Prompt(_) => 2,
            _ => 1,
        }
    }
}

fn read_input<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JobError> {
    if !path.is_file() {
        return Err(JobError::MissingInput(path.to_path_buf()));
    }
    let records = read_jsonl(path)?;
    if records.is_empty() {
        return Err(JobError::EmptyInput(path.to_path_buf()));
    }
    Ok(records)
}

fn write_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), JobError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

/// `(text, quality)` line of a quality book file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityLine {
    pub text: String,
    pub quality: f64,
}

pub fn prompt_kit(config: &Config) -> Result<PromptKit, JobError> {
    Ok(
        PromptKit::load(config.locale, config.templates_dir.as_deref())?
            .with_scale(config.scale)
            .with_categories(config.categories()),
    )
}

fn quality_book(config: &Config) -> Result<Arc<QualityBook>, JobError> {
    let book = QualityBook::new();
    if let Some(path) = &config.oracle.qualities {
        for line in read_input::<QualityLine>(path)? {
            book.insert(&line.text, line.quality);
        }
    }
    Ok(Arc::new(book))
}

/// Judge client for the configured backend, with retry, concurrency limit
/// and cache applied.
pub fn make_client(config: &Config, kit: &PromptKit) -> Result<JudgeClient, JobError> {
    let backend: Arc<dyn Backend> = match config.backend {
        BackendKind::Live => Arc::new(LiveBackend::new(config.live.clone())?),
        BackendKind::Oracle => Arc::new(
            SyntheticOracle::new(
                config.oracle.seed.unwrap_or(config.seed),
                config.oracle.noise.clone(),
            )
            .with_kits(vec![kit.clone()])
            .with_book(quality_book(config)?),
        ),
        BackendKind::Mock => {
            let fallback = SyntheticOracle::noiseless(config.oracle.seed.unwrap_or(config.seed))
                .with_kits(vec![kit.clone()])
                .with_book(quality_book(config)?);
            let mut scripted = ScriptedBackend::new("mock");
            for rule in &config.mock.rules {
                scripted = scripted.with_rule(rule.contains.clone(), rule.reply.clone());
            }
            Arc::new(scripted.with_fallback(move |r: &JudgeRequest| fallback.call(r)))
        }
    };
    let cache = config
        .cache_dir
        .as_ref()
        .map(ResponseCache::on_disk)
        .transpose()?;
    Ok(JudgeClient::new(backend)
        .with_retry(config.retry.clone())
        .with_max_inflight(config.max_inflight)
        .with_cache(cache))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentOutcome {
    pub output: PathBuf,
    pub report_path: PathBuf,
    pub queries: usize,
    pub report: AugmentReport,
}

/// Expand the seed queries and write them with a JSON report beside them.
pub fn cmd_augment(config: &Config) -> Result<AugmentOutcome, JobError> {
    let job = &config.augment;
    let seeds: Vec<Query> = read_input(&job.seeds)?;
    let categories = config.categories();
    for q in &seeds {
        q.validate(&categories)
            .map_err(|source| JobError::Invalid {
                path: job.seeds.clone(),
                source,
            })?;
    }
    let kit = prompt_kit(config)?;
    let client = make_client(config, &kit)?;
    let (queries, report) = run_augmentation(
        &seeds,
        &client,
        &kit,
        &job.settings,
        config.seed,
        &job.id_prefix,
    )?;
    write_jsonl(&job.output, &queries)?;
    let report_path = job
        .report
        .clone()
        .unwrap_or_else(|| sibling(&job.output, "report.json"));
    write_pretty(&report_path, &report)?;
    Ok(AugmentOutcome {
        output: job.output.clone(),
        report_path,
        queries: queries.len(),
        report,
    })
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn load_build_inputs(
    config: &Config,
) -> Result<(Vec<Query>, Vec<crate::model::EvalSample>), JobError> {
    let job = &config.build;
    let queries: Vec<Query> = read_input(&job.queries)?;
    let categories = config.categories();
    for q in &queries {
        q.validate(&categories)
            .map_err(|source| JobError::Invalid {
                path: job.queries.clone(),
                source,
            })?;
    }
    let samples = read_input(&job.samples)?;
    Ok((queries, samples))
}

/// Run or resume every construction stage into `build.run_dir`.
pub fn cmd_build(config: &Config, options: &BuildOptions) -> Result<BuildSummary, JobError> {
    let (queries, samples) = load_build_inputs(config)?;
    let kit = prompt_kit(config)?;
    let client = make_client(config, &kit)?;
    let pipeline = Pipeline::new(
        &client,
        &kit,
        config.build.pipeline.clone(),
        config.seed,
        &queries,
    )?;
    let store = RunStore::open(&config.build.run_dir)?;
    Ok(build(&pipeline, &queries, &samples, &store, options)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftOutcome {
    pub output_dir: PathBuf,
    pub counts: SftCounts,
}

/// Stream files written by [`cmd_emit_sft`], in emission order.
pub const SFT_FILES: [&str; 4] = [
    "point_r.jsonl",
    "point_rf.jsonl",
    "pair_r.jsonl",
    "pair_rf.jsonl",
];

/// Write the four training streams and their concatenation. Refuses when
/// the run has not reached cross validation.
pub fn cmd_emit_sft(config: &Config) -> Result<SftOutcome, JobError> {
    let run_dir = config
        .emit_sft
        .run_dir
        .as_ref()
        .unwrap_or(&config.build.run_dir);
    if !run_dir.is_dir() {
        return Err(PipelineError::MissingStage(crate::pipeline::STAGES[0].into()).into());
    }
    let store = RunStore::open(run_dir)?;
    let (_, state) = load_state(&store)?;
    let queries: Vec<Query> = read_input(&config.build.queries)?;
    let kit = prompt_kit(config)?;
    // Rendering training inputs never reaches the backend.
    let client = JudgeClient::new(Arc::new(ScriptedBackend::new("offline")));
    let pipeline = Pipeline::new(
        &client,
        &kit,
        config.build.pipeline.clone(),
        config.seed,
        &queries,
    )?;
    let records = pipeline.emit_sft(&state, config.emit_sft.swap_augment)?;
    let dir = &config.emit_sft.output_dir;
    for (file, setting) in SFT_FILES.iter().zip(EvalSetting::ALL) {
        let stream: Vec<&SftRecord> = records.iter().filter(|r| r.setting == setting).collect();
        write_jsonl(&dir.join(file), &stream)?;
    }
    write_jsonl(&dir.join("all.jsonl"), &records)?;
    Ok(SftOutcome {
        output_dir: dir.clone(),
        counts: SftCounts::of(&records),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationLine {
    pub evaluator: String,
    pub grounding: Grounding,
    #[serde(flatten)]
    pub report: CorrelationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementLine {
    pub evaluator: String,
    pub dataset: String,
    pub grounding: Grounding,
    #[serde(flatten)]
    pub report: AgreementReport,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetaEvalOutcome {
    pub correlations: Vec<CorrelationLine>,
    pub agreements: Vec<AgreementLine>,
    pub correlation_table: String,
    pub agreement_table: String,
}

/// Correlation and agreement reports, as JSON Lines and aligned tables.
pub fn cmd_meta_eval(config: &Config) -> Result<MetaEvalOutcome, JobError> {
    let job = &config.meta_eval;
    if job.scores.is_empty() && job.judgments.is_empty() {
        return Err(JobError::Config(
            "meta_eval needs at least one scores or judgments input".into(),
        ));
    }
    let options = TextLevelOptions {
        min_group: job.min_group,
        skip_degenerate: job.skip_degenerate,
        weighting: job.weighting,
    };
    let mut out = MetaEvalOutcome::default();

    let mut cells: IndexMap<String, CorrelationCells> = IndexMap::new();
    for input in &job.scores {
        let rows: Vec<ScoreRow> = read_input(&input.file)?;
        let context = format!("{} ({})", input.name, input.file.display());
        let metric = |source| JobError::Metric {
            context: context.clone(),
            source,
        };
        let table = ScoreTable::new(rows).map_err(metric)?;
        let text = text_level(&table, options).map_err(metric)?;
        let system = system_level(&table).map_err(metric)?;
        let entry = cells.entry(input.name.clone()).or_default();
        for report in [text, system] {
            entry.insert((report.level, input.grounding), report.clone());
            out.correlations.push(CorrelationLine {
                evaluator: input.name.clone(),
                grounding: input.grounding,
                report,
            });
        }
    }
    out.correlations.sort_by_key(|l| {
        let level = matches!(l.report.level, Level::System);
        (cells.get_index_of(&l.evaluator), level, l.grounding)
    });

    let mut columns: Vec<(String, Grounding)> = Vec::new();
    let mut agreement: IndexMap<String, AgreementCells> = IndexMap::new();
    for input in &job.judgments {
        let judgments: Vec<SwapJudgment> = read_input(&input.file)?;
        let report = agreement_consistency(&judgments);
        let key = (input.dataset.clone(), input.grounding);
        if !columns.contains(&key) {
            columns.push(key.clone());
        }
        agreement
            .entry(input.name.clone())
            .or_default()
            .insert(key, report);
        out.agreements.push(AgreementLine {
            evaluator: input.name.clone(),
            dataset: input.dataset.clone(),
            grounding: input.grounding,
            report,
        });
    }

    let dir = &job.output_dir;
    if !job.scores.is_empty() {
        let rows: Vec<(String, CorrelationCells)> = cells.into_iter().collect();
        out.correlation_table = correlation_table(&rows);
        write_jsonl(&dir.join("correlations.jsonl"), &out.correlations)?;
        write_atomic(
            &dir.join("correlations.txt"),
            out.correlation_table.as_bytes(),
        )?;
    }
    if !job.judgments.is_empty() {
        let rows: Vec<_> = agreement.into_iter().collect();
        out.agreement_table = agreement_table(&columns, &rows);
        write_jsonl(&dir.join("agreement.jsonl"), &out.agreements)?;
        write_atomic(&dir.join("agreement.txt"), out.agreement_table.as_bytes())?;
    }
    Ok(out)
}

/// One response to revise.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineItem {
    pub id: String,
    pub query: String,
    pub response: String,
    /// Reference-free critique text.
    pub critique: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinedItem {
    pub id: String,
    pub response: String,
    pub changed: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_before: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_after: Option<i32>,
}

/// Wrap free critique text as a reference-free pointwise critique, keeping
/// its scores when it carries a parseable terminal fragment.
fn as_critique(text: &str, kit: &PromptKit) -> Critique {
    match parse_pointwise(text, kit.scale(), kit.locale(), Grounding::ReferenceFree) {
        Ok(outcome) => outcome.result,
        Err(_) => Critique::Pointwise(PointwiseCritique {
            dimension_scores: IndexMap::new(),
            overall_score: kit.scale().min,
            explanation: text.to_string(),
            setting: EvalSetting::POINT_RF,
        }),
    }
}

fn referenced_score(
    client: &JudgeClient,
    kit: &PromptKit,
    item: &RefineItem,
    text: &str,
) -> Result<Option<i32>, JobError> {
    let dims = kit.locale().default_dimensions();
    let prompt =
        kit.render_referenced_pointwise(&item.query, item.reference.as_deref(), text, &dims)?;
    let reply = client.complete(&JudgeRequest::prompt(
        prompt,
        DecodingParams::greedy(),
        format!("rescore:{}", item.id),
    ))?;
    Ok(parse_pointwise(
        reply.first(),
        kit.scale(),
        kit.locale(),
        Grounding::Referenced,
    )
    .ok()
    .and_then(|o| o.pointwise().map(|c| c.overall_score)))
}

/// Revise each response under its critique, optionally grading the original
/// and the revision against the item's reference.
pub fn cmd_refine(config: &Config) -> Result<Vec<RefinedItem>, JobError> {
    let job = &config.refine;
    let items: Vec<RefineItem> = read_input(&job.input)?;
    let kit = prompt_kit(config)?;
    let client = make_client(config, &kit)?;
    let mut out = Vec::with_capacity(items.len());
    for item in &items {
        let critique = as_critique(&item.critique, &kit);
        let refined = refine_with_critique(&client, &kit, &item.query, &item.response, &critique)?;
        let rescore = job.rescore
            && item
                .reference
                .as_deref()
                .is_some_and(|r| !r.trim().is_empty());
        let (score_before, score_after) = if rescore {
            (
                referenced_score(&client, &kit, item, &item.response)?,
                referenced_score(&client, &kit, item, &refined.text)?,
            )
        } else {
            (None, None)
        };
        out.push(RefinedItem {
            id: item.id.clone(),
            response: refined.text,
            changed: refined.changed,
            warnings: refined.warnings,
            score_before,
            score_after,
        });
    }
    write_jsonl(&job.output, &out)?;
    Ok(out)
}

/// Write a synthetic corpus as `queries.jsonl`, `samples.jsonl` and
/// `qualities.jsonl` under `dir`.
pub fn write_synth(dir: &Path, config: &Config, spec: SynthSpec) -> Result<SynthCorpus, JobError> {
    let corpus = SynthCorpus::generate(config.locale, spec, config.seed);
    write_jsonl(&dir.join("queries.jsonl"), &corpus.queries)?;
    write_jsonl(&dir.join("samples.jsonl"), &corpus.samples)?;
    let lines: Vec<QualityLine> = corpus
        .qualities
        .iter()
        .map(|(text, quality)| QualityLine {
            text: text.clone(),
            quality: *quality,
        })
        .collect();
    write_jsonl(&dir.join("qualities.jsonl"), &lines)?;
    Ok(corpus)
}
