use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::JobError;
use crate::augment::AugmentConfig;
use crate::judge::{LiveConfig, NoiseSpec, RetryPolicy};
use crate::metrics::GroupWeighting;
use crate::model::{Grounding, Locale, ScoreScale};
use crate::pipeline::PipelineConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    /// Scripted rules, falling back to the noiseless synthetic oracle.
    #[default]
    Mock,
    /// Synthetic oracle with the configured noise.
    Oracle,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "live" => Ok(Self::Live),
            "mock" => Ok(Self::Mock),
            "oracle" => Ok(Self::Oracle),
            other => Err(format!(
                "unknown backend {other:?} (expected live, mock or oracle)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    /// Defaults to the run seed.
    pub seed: Option<u64>,
    /// JSON Lines of `{"text": ..., "quality": ...}`.
    pub qualities: Option<PathBuf>,
    #[serde(flatten)]
    pub noise: NoiseSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    /// Substring of the prompt.
    pub contains: String,
    pub reply: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub rules: Vec<MockRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentJob {
    pub seeds: PathBuf,
    pub output: PathBuf,
    /// Defaults to `<output>.report.json`.
    pub report: Option<PathBuf>,
    pub id_prefix: String,
    #[serde(flatten)]
    pub settings: AugmentConfig,
}

impl Default for AugmentJob {
    fn default() -> Self {
        Self {
            seeds: "seeds.jsonl".into(),
            output: "augmented.jsonl".into(),
            report: None,
            id_prefix: "aug-".into(),
            settings: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildJob {
    pub queries: PathBuf,
    pub samples: PathBuf,
    pub run_dir: PathBuf,
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
}

impl Default for BuildJob {
    fn default() -> Self {
        Self {
            queries: "queries.jsonl".into(),
            samples: "samples.jsonl".into(),
            run_dir: "run".into(),
            pipeline: PipelineConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmitSftJob {
    /// Defaults to `build.run_dir`.
    pub run_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub swap_augment: bool,
}

impl Default for EmitSftJob {
    fn default() -> Self {
        Self {
            run_dir: None,
            output_dir: "sft".into(),
            swap_augment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreInput {
    /// Evaluator name, one table row.
    pub name: String,
    pub grounding: Grounding,
    /// JSON Lines of `{query_id, model_id, human_score, metric_score}`.
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentInput {
    pub name: String,
    pub dataset: String,
    pub grounding: Grounding,
    /// JSON Lines of `{ab, ba, human}` verdicts.
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaEvalJob {
    pub scores: Vec<ScoreInput>,
    pub judgments: Vec<JudgmentInput>,
    pub output_dir: PathBuf,
    pub min_group: usize,
    pub skip_degenerate: bool,
    pub weighting: GroupWeighting,
}

impl Default for MetaEvalJob {
    fn default() -> Self {
        let text = crate::metrics::TextLevelOptions::default();
        Self {
            scores: Vec::new(),
            judgments: Vec::new(),
            output_dir: "meta_eval".into(),
            min_group: text.min_group,
            skip_degenerate: text.skip_degenerate,
            weighting: text.weighting,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineJob {
    /// JSON Lines of `{id, query, response, critique, reference?}`.
    pub input: PathBuf,
    pub output: PathBuf,
    /// Grade original and revision with the referenced pointwise prompt
    /// when the item carries a reference.
    pub rescore: bool,
}

impl Default for RefineJob {
    fn default() -> Self {
        Self {
            input: "refine.jsonl".into(),
            output: "refined.jsonl".into(),
            rescore: true,
        }
    }
}

/// Whole-run configuration, one TOML document. Relative paths are resolved
/// against the directory holding the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub locale: Locale,
    pub backend: BackendKind,
    pub max_inflight: usize,
    pub cache_dir: Option<PathBuf>,
    /// Directory laid out as `<locale>/<kind>.txt` overriding builtin prompts.
    pub templates_dir: Option<PathBuf>,
    pub scale: ScoreScale,
    /// Task categories; empty means the locale default.
    pub categories: Vec<String>,
    pub retry: RetryPolicy,
    pub live: LiveConfig,
    pub oracle: OracleConfig,
    pub mock: MockConfig,
    pub augment: AugmentJob,
    pub build: BuildJob,
    pub emit_sft: EmitSftJob,
    pub meta_eval: MetaEvalJob,
    pub refine: RefineJob,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            locale: Locale::Zh,
            backend: BackendKind::default(),
            max_inflight: 8,
            cache_dir: None,
            templates_dir: None,
            scale: ScoreScale::default(),
            categories: Vec::new(),
            retry: RetryPolicy::default(),
            live: LiveConfig::default(),
            oracle: OracleConfig::default(),
            mock: MockConfig::default(),
            augment: AugmentJob::default(),
            build: BuildJob::default(),
            emit_sft: EmitSftJob::default(),
            meta_eval: MetaEvalJob::default(),
            refine: RefineJob::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub locale: Option<Locale>,
    pub backend: Option<BackendKind>,
    pub max_inflight: Option<usize>,
    pub cache_dir: Option<PathBuf>,
}

impl Config {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, JobError> {
        let mut config: Config =
            toml::from_str(text).map_err(|e| JobError::Config(format!("invalid config: {e}")))?;
        config.resolve(base);
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, JobError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| JobError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), JobError> {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(locale) = o.locale {
            self.locale = locale;
        }
        if let Some(backend) = o.backend {
            self.backend = backend;
        }
        if let Some(n) = o.max_inflight {
            self.max_inflight = n;
        }
        if let Some(dir) = &o.cache_dir {
            self.cache_dir = Some(dir.clone());
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), JobError> {
        let bad = |m: String| Err(JobError::Config(m));
        if self.max_inflight == 0 {
            return bad("max_inflight must be at least 1".into());
        }
        if let Err(e) = self.oracle.noise.validate() {
            return bad(format!("oracle: {e}"));
        }
        if let Err(e) = self.retry.validate() {
            return bad(format!("retry: {e}"));
        }
        if let Err(e) = self.augment.settings.validate() {
            return bad(format!("augment: {e}"));
        }
        if let Err(e) = self.build.pipeline.validate() {
            return bad(format!("build: {e}"));
        }
        if let Err(e) = ScoreScale::new(self.scale.min, self.scale.max) {
            return bad(e.to_string());
        }
        Ok(())
    }

    pub fn categories(&self) -> Vec<String> {
        if self.categories.is_empty() {
            self.locale.default_categories()
        } else {
            self.categories.clone()
        }
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.augment.seeds,
            &mut self.augment.output,
            &mut self.build.queries,
            &mut self.build.samples,
            &mut self.build.run_dir,
            &mut self.emit_sft.output_dir,
            &mut self.meta_eval.output_dir,
            &mut self.refine.input,
            &mut self.refine.output,
        ] {
            fix(p);
        }
        for p in [
            &mut self.cache_dir,
            &mut self.templates_dir,
            &mut self.oracle.qualities,
            &mut self.augment.report,
            &mut self.emit_sft.run_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        for s in &mut self.meta_eval.scores {
            fix(&mut s.file);
        }
        for j in &mut self.meta_eval.judgments {
            fix(&mut j.file);
        }
    }
}
