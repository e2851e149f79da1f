//! Stage orchestration: one TOML config, one output directory, one manifest
//! per stage so unchanged stages are skipped on re-runs.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{contexts_for_document, load_corpus, Context, LengthUnit};
use crate::cst::{build_tree, collect_queries, CollectedQuery, CstConfig, CstPromptAssets, QueryRecord};
use crate::eval::{depth_histogram, diversity_report, exact_match_accuracy, DiversityReport, QaItem};
use crate::filter::{consolidate, filter_root, round_seed, FilterConfig, MetricField, ScoredQuery};
use crate::jsonl::{read_jsonl, write_atomic, write_jsonl};
use crate::llm::{
    parallel_map, BackendConfig, GenerationParams, LlmClient, MockBackend, OpenAiTransport, PromptBudget, Transcript,
    QUERY_TEMPERATURE, RESPONSE_TEMPERATURE,
};
use crate::response::{
    generate_responses, load_annotations, random_search_fewshot, split_annotations, FewshotSelection, PrincipleSet,
    SearchConfig,
};
use crate::scorer::{build_contrastive_pairs, train_scorer, PairRecord, Positive, ScorerModel, TrainConfig};
use crate::seed::{derive_seed, sha256_hex};

pub const SCHEMA_VERSION: u32 = 1;

pub const CONTEXTS_FILE: &str = "contexts.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const PAIRS_FILE: &str = "scorer_pairs.jsonl";
pub const MODEL_FILE: &str = "scorer_model.json";
pub const FILTERED_FILE: &str = "filtered.jsonl";
pub const SELECTION_FILE: &str = "fewshot_selection.json";
pub const SFT_FILE: &str = "sft.jsonl";
pub const FAILURES_FILE: &str = "respond_failures.jsonl";
pub const REPORT_FILE: &str = "eval_report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSettings {
    pub path: PathBuf,
    pub unit: LengthUnit,
    pub max_context_length: usize,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        Self {
            path: PathBuf::from("corpus"),
            unit: LengthUnit::Words,
            max_context_length: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CstSettings {
    pub lambda: usize,
    pub parse_retries: u32,
    pub hallucination_threshold: f64,
    /// Directory with `instruction.txt` and `fewshot.jsonl`; built-in English
    /// assets when unset.
    pub assets: Option<PathBuf>,
    pub parallel: bool,
}

impl Default for CstSettings {
    fn default() -> Self {
        Self {
            lambda: 50,
            parse_retries: 3,
            hallucination_threshold: 0.7,
            assets: None,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerSettings {
    pub per_kind: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub holdout_fraction: f64,
}

impl Default for ScorerSettings {
    fn default() -> Self {
        Self {
            per_kind: 500,
            learning_rate: 0.05,
            epochs: 500,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSettings {
    pub quota_ratio: usize,
    pub rouge_threshold: f64,
    pub metric_field: MetricField,
    pub max_rounds: u32,
}

impl Default for FilterSettings {
    fn default() -> Self {
        let d = FilterConfig::default();
        Self {
            quota_ratio: d.quota_ratio,
            rouge_threshold: d.rouge_threshold,
            metric_field: d.metric_field,
            max_rounds: d.max_rounds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResponseSettings {
    /// Off: answer with no principles and no few-shot examples.
    pub self_alignment: bool,
    pub k: usize,
    pub iterations: usize,
    pub frac: f64,
    pub principles: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
}

impl Default for ResponseSettings {
    fn default() -> Self {
        Self {
            self_alignment: true,
            k: 3,
            iterations: 16,
            frac: 0.8,
            principles: Some(PathBuf::from("principles.txt")),
            annotations: Some(PathBuf::from("annotated.jsonl")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Real,
    Mock,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "real" => Ok(Self::Real),
            "mock" => Ok(Self::Mock),
            other => Err(format!("unknown backend `{other}` (expected real or mock)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSettings {
    pub kind: BackendKind,
    pub script: Option<PathBuf>,
    pub endpoint: String,
    pub model_name: String,
    pub max_in_flight: usize,
    pub retry_limit: u32,
    pub retry_backoff_ms: u64,
    pub timeout_secs: u64,
    pub max_prompt_tokens: usize,
    pub chars_per_token: usize,
}

impl Default for BackendSettings {
    fn default() -> Self {
        let d = BackendConfig::default();
        Self {
            kind: BackendKind::Real,
            script: None,
            endpoint: d.endpoint,
            model_name: d.model_name,
            max_in_flight: d.max_in_flight,
            retry_limit: d.retry_limit,
            retry_backoff_ms: d.retry_backoff_ms,
            timeout_secs: d.timeout_secs,
            max_prompt_tokens: d.budget.max_prompt_tokens,
            chars_per_token: d.budget.chars_per_token,
        }
    }
}

impl BackendSettings {
    pub fn backend_config(&self) -> BackendConfig {
        BackendConfig {
            endpoint: self.endpoint.clone(),
            model_name: self.model_name.clone(),
            max_in_flight: self.max_in_flight,
            retry_limit: self.retry_limit,
            retry_backoff_ms: self.retry_backoff_ms,
            timeout_secs: self.timeout_secs,
            budget: PromptBudget {
                max_prompt_tokens: self.max_prompt_tokens,
                chars_per_token: self.chars_per_token,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSettings {
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub top_k: u32,
    pub top_p: f64,
}

impl SamplingSettings {
    fn with_temperature(temperature: f64) -> Self {
        let d = GenerationParams::default();
        Self {
            temperature,
            max_new_tokens: d.max_new_tokens,
            top_k: d.top_k,
            top_p: d.top_p,
        }
    }

    pub fn params(&self) -> GenerationParams {
        GenerationParams {
            max_new_tokens: self.max_new_tokens,
            top_k: self.top_k,
            top_p: self.top_p,
            temperature: self.temperature,
            seed: None,
        }
    }
}

impl Default for SamplingSettings {
    fn default() -> Self {
        Self::with_temperature(QUERY_TEMPERATURE)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSettings {
    pub query: SamplingSettings,
    pub response: SamplingSettings,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            query: SamplingSettings::with_temperature(QUERY_TEMPERATURE),
            response: SamplingSettings::with_temperature(RESPONSE_TEMPERATURE),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Optional `predictions.jsonl` to score with exact match.
    pub predictions: Option<PathBuf>,
    pub normalize: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            predictions: None,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusSettings,
    pub cst: CstSettings,
    pub scorer: ScorerSettings,
    pub filter: FilterSettings,
    pub response: ResponseSettings,
    pub backend: BackendSettings,
    pub generation: GenerationSettings,
    pub eval: EvalSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            output_dir: PathBuf::from("out"),
            corpus: CorpusSettings::default(),
            cst: CstSettings::default(),
            scorer: ScorerSettings::default(),
            filter: FilterSettings::default(),
            response: ResponseSettings::default(),
            backend: BackendSettings::default(),
            generation: GenerationSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

fn unit_interval(name: &str, v: f64, errs: &mut Vec<String>) {
    if !(v > 0.0 && v <= 1.0) {
        errs.push(format!("{name} = {v} must lie in (0, 1]"));
    }
}

fn at_least<T: PartialOrd + fmt::Display + Copy>(name: &str, v: T, min: T, errs: &mut Vec<String>) {
    if v < min {
        errs.push(format!("{name} = {v} must be >= {min}"));
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Validation(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read and validate a config file. Relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.corpus.path);
        for p in [
            &mut self.cst.assets,
            &mut self.response.principles,
            &mut self.response.annotations,
            &mut self.backend.script,
            &mut self.eval.predictions,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut errs = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            errs.push(format!(
                "schema_version = {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        at_least("corpus.max_context_length", self.corpus.max_context_length, 1, &mut errs);
        at_least("cst.lambda", self.cst.lambda, 1, &mut errs);
        unit_interval("cst.hallucination_threshold", self.cst.hallucination_threshold, &mut errs);
        at_least("scorer.per_kind", self.scorer.per_kind, 1, &mut errs);
        at_least("scorer.epochs", self.scorer.epochs, 1, &mut errs);
        if !(self.scorer.learning_rate > 0.0 && self.scorer.learning_rate.is_finite()) {
            errs.push("scorer.learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.scorer.holdout_fraction) {
            errs.push("scorer.holdout_fraction must lie in [0, 1)".into());
        }
        at_least("filter.quota_ratio", self.filter.quota_ratio, 1, &mut errs);
        unit_interval("filter.rouge_threshold", self.filter.rouge_threshold, &mut errs);
        at_least("filter.max_rounds", self.filter.max_rounds, 1, &mut errs);
        at_least("response.k", self.response.k, 1, &mut errs);
        at_least("response.iterations", self.response.iterations, 1, &mut errs);
        if !(self.response.frac > 0.0 && self.response.frac < 1.0) {
            errs.push("response.frac must lie in (0, 1)".into());
        }
        if self.response.self_alignment && (self.response.principles.is_none() || self.response.annotations.is_none()) {
            errs.push("response.self_alignment needs principles and annotations paths".into());
        }
        at_least("backend.max_in_flight", self.backend.max_in_flight, 1, &mut errs);
        at_least("backend.max_prompt_tokens", self.backend.max_prompt_tokens, 1, &mut errs);
        at_least("backend.chars_per_token", self.backend.chars_per_token, 1, &mut errs);
        if self.backend.kind == BackendKind::Mock && self.backend.script.is_none() {
            errs.push("backend.kind = \"mock\" needs backend.script".into());
        }
        for (name, s) in [("query", &self.generation.query), ("response", &self.generation.response)] {
            if !(s.temperature >= 0.0 && s.temperature.is_finite()) {
                errs.push(format!("generation.{name}.temperature must be >= 0"));
            }
            unit_interval(&format!("generation.{name}.top_p"), s.top_p, &mut errs);
            at_least(&format!("generation.{name}.max_new_tokens"), s.max_new_tokens, 1, &mut errs);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::Validation(errs.join("; ")))
        }
    }

    pub fn cst_config(&self) -> CstConfig {
        CstConfig {
            lambda: self.cst.lambda,
            parse_retries: self.cst.parse_retries,
            unit: self.corpus.unit,
            hallucination_threshold: self.cst.hallucination_threshold,
            params: self.generation.query.params(),
            parallel: self.cst.parallel,
        }
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            quota_ratio: self.filter.quota_ratio,
            rouge_threshold: self.filter.rouge_threshold,
            metric_field: self.filter.metric_field,
            max_rounds: self.filter.max_rounds,
            unit: self.corpus.unit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Extract,
    Cst,
    ScorerData,
    ScorerTrain,
    Filter,
    FewshotSearch,
    Respond,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Extract,
        Stage::Cst,
        Stage::ScorerData,
        Stage::ScorerTrain,
        Stage::Filter,
        Stage::FewshotSearch,
        Stage::Respond,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Extract => "extract",
            Stage::Cst => "cst",
            Stage::ScorerData => "scorer-data",
            Stage::ScorerTrain => "scorer-train",
            Stage::Filter => "filter",
            Stage::FewshotSearch => "fewshot-search",
            Stage::Respond => "respond",
            Stage::Eval => "eval",
        }
    }

    fn uses_backend(self) -> bool {
        matches!(self, Stage::Cst | Stage::ScorerData | Stage::Filter | Stage::FewshotSearch | Stage::Respond)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage `{s}`"))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Validation(String),
    #[error("stage {stage}: missing or unreadable input {path}: {message}")]
    StageInput {
        stage: Stage,
        path: PathBuf,
        message: String,
    },
    #[error("stage {stage} failed: {message}")]
    Stage { stage: Stage, message: String },
}

impl PipelineError {
    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub config_hash: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub warnings: Vec<String>,
    /// True when this run reused the previous outputs.
    #[serde(default)]
    pub cache_hit: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript_hash: Option<String>,
}

/// Content hash of a file, or of a directory's sorted (name, hash) listing.
pub fn hash_path(path: &Path) -> std::io::Result<String> {
    if path.is_dir() {
        let mut entries: Vec<(String, String)> = Vec::new();
        for e in std::fs::read_dir(path)? {
            let p = e?.path();
            if p.is_file() {
                let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
                entries.push((name, sha256_hex(std::fs::read(&p)?)));
            }
        }
        entries.sort();
        let listing: Vec<String> = entries.into_iter().map(|(n, h)| format!("{n}\t{h}")).collect();
        Ok(sha256_hex(listing.join("\n")))
    } else {
        Ok(sha256_hex(std::fs::read(path)?))
    }
}

struct StageResult {
    warnings: Vec<String>,
    transcript: Option<Arc<Transcript>>,
}

/// Stage runner bound to one config.
pub struct Pipeline {
    cfg: PipelineConfig,
    /// Re-run stages even when their manifest matches.
    pub force: bool,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Self { cfg, force: false })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn out(&self, file: &str) -> PathBuf {
        self.cfg.output_dir.join(file)
    }

    pub fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.cfg.output_dir.join("manifests").join(format!("{}.json", stage.name()))
    }

    pub fn transcript_path(&self, stage: Stage) -> PathBuf {
        self.cfg.output_dir.join("transcripts").join(format!("{}.jsonl", stage.name()))
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        derive_seed(self.cfg.seed, stage.name())
    }

    fn input_paths(&self, stage: Stage) -> Vec<PathBuf> {
        let c = &self.cfg;
        let mut v = match stage {
            Stage::Extract => vec![c.corpus.path.clone()],
            Stage::Cst => vec![self.out(CONTEXTS_FILE)],
            Stage::ScorerData => vec![self.out(QUERIES_FILE)],
            Stage::ScorerTrain => vec![self.out(PAIRS_FILE)],
            Stage::Filter => vec![self.out(CONTEXTS_FILE), self.out(QUERIES_FILE), self.out(MODEL_FILE)],
            Stage::FewshotSearch => {
                if c.response.self_alignment {
                    [&c.response.annotations, &c.response.principles].into_iter().flatten().cloned().collect()
                } else {
                    vec![]
                }
            }
            Stage::Respond => {
                let mut v = vec![self.out(FILTERED_FILE), self.out(SELECTION_FILE)];
                if c.response.self_alignment {
                    v.extend(c.response.principles.clone());
                }
                v
            }
            Stage::Eval => {
                let mut v = vec![self.out(FILTERED_FILE)];
                v.extend(c.eval.predictions.clone());
                v
            }
        };
        if matches!(stage, Stage::Cst | Stage::ScorerData | Stage::Filter) {
            v.extend(c.cst.assets.iter().map(|a| a.join("instruction.txt")));
            v.extend(c.cst.assets.iter().map(|a| a.join("fewshot.jsonl")));
        }
        if stage.uses_backend() && c.backend.kind == BackendKind::Mock {
            v.extend(c.backend.script.clone());
        }
        v
    }

    fn output_paths(&self, stage: Stage) -> Vec<PathBuf> {
        match stage {
            Stage::Extract => vec![self.out(CONTEXTS_FILE)],
            Stage::Cst => vec![self.out(QUERIES_FILE)],
            Stage::ScorerData => vec![self.out(PAIRS_FILE)],
            Stage::ScorerTrain => vec![self.out(MODEL_FILE)],
            Stage::Filter => vec![self.out(FILTERED_FILE)],
            Stage::FewshotSearch => vec![self.out(SELECTION_FILE)],
            Stage::Respond => vec![self.out(SFT_FILE), self.out(FAILURES_FILE)],
            Stage::Eval => vec![self.out(REPORT_FILE)],
        }
    }

    /// Hash of the settings a stage reads.
    pub fn config_hash(&self, stage: Stage) -> String {
        let c = &self.cfg;
        let backend = stage.uses_backend().then(|| {
            serde_json::json!({
                "kind": c.backend.kind,
                "endpoint": c.backend.endpoint,
                "model_name": c.backend.model_name,
                "max_prompt_tokens": c.backend.max_prompt_tokens,
                "chars_per_token": c.backend.chars_per_token,
            })
        });
        let section = match stage {
            Stage::Extract => serde_json::to_value(&c.corpus),
            Stage::Cst | Stage::ScorerData | Stage::ScorerTrain | Stage::Filter => serde_json::to_value((
                c.corpus.unit,
                &c.cst.lambda,
                &c.cst.parse_retries,
                &c.cst.hallucination_threshold,
                &c.generation.query,
                match stage {
                    Stage::Cst => serde_json::Value::Null,
                    Stage::Filter => serde_json::to_value(&c.filter).unwrap_or_default(),
                    _ => serde_json::to_value(&c.scorer).unwrap_or_default(),
                },
            )),
            Stage::FewshotSearch | Stage::Respond => {
                serde_json::to_value((&c.response.self_alignment, &c.response.k, &c.response.iterations, &c.response.frac, &c.generation.response))
            }
            Stage::Eval => serde_json::to_value((&c.eval.normalize, &c.filter.rouge_threshold, c.corpus.unit)),
        }
        .expect("settings serialize");
        let all = serde_json::json!({"stage": stage.name(), "settings": section, "backend": backend});
        sha256_hex(all.to_string())
    }

    fn hash_all(&self, stage: Stage, paths: &[PathBuf]) -> Result<BTreeMap<String, String>, PipelineError> {
        paths
            .iter()
            .map(|p| {
                hash_path(p)
                    .map(|h| (p.display().to_string(), h))
                    .map_err(|e| PipelineError::StageInput {
                        stage,
                        path: p.clone(),
                        message: e.to_string(),
                    })
            })
            .collect()
    }

    fn cached(&self, stage: Stage, inputs: &BTreeMap<String, String>, config_hash: &str) -> Option<StageManifest> {
        let raw = std::fs::read_to_string(self.manifest_path(stage)).ok()?;
        let prev: StageManifest = serde_json::from_str(&raw).ok()?;
        if prev.inputs != *inputs || prev.seed != self.stage_seed(stage) {
            return None;
        }
        if prev.config_hash != config_hash {
            log::warn!("stage {stage}: config changed since last run; re-running");
            return None;
        }
        let outputs_intact = prev
            .outputs
            .iter()
            .all(|(p, h)| hash_path(Path::new(p)).is_ok_and(|cur| cur == *h));
        outputs_intact.then_some(prev)
    }

    /// Run one stage, or reuse its previous outputs when inputs, settings and
    /// seed are unchanged.
    pub fn run_stage(&self, stage: Stage) -> Result<StageManifest, PipelineError> {
        let inputs = self.hash_all(stage, &self.input_paths(stage))?;
        let config_hash = self.config_hash(stage);
        if !self.force {
            if let Some(mut prev) = self.cached(stage, &inputs, &config_hash) {
                log::info!("stage {stage}: unchanged, skipping");
                prev.cache_hit = true;
                return Ok(prev);
            }
        }
        let started_at = now();
        let result = self.execute(stage)?;
        let outputs = self.hash_all(stage, &self.output_paths(stage))?;
        let transcript_hash = match &result.transcript {
            Some(t) => {
                t.write(&self.transcript_path(stage)).map_err(|e| stage_err(stage, e))?;
                Some(t.content_hash())
            }
            None => None,
        };
        let manifest = StageManifest {
            stage: stage.name().to_string(),
            inputs,
            outputs,
            config_hash,
            seed: self.stage_seed(stage),
            started_at,
            finished_at: now(),
            warnings: result.warnings,
            cache_hit: false,
            transcript_hash,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&self.manifest_path(stage), json.as_bytes()).map_err(|e| stage_err(stage, e))?;
        log::info!("stage {stage}: done");
        Ok(manifest)
    }

    /// Every stage in dependency order.
    pub fn run_all(&self) -> Result<Vec<StageManifest>, PipelineError> {
        Stage::ALL.into_iter().map(|s| self.run_stage(s)).collect()
    }

    fn client(&self, stage: Stage) -> Result<(LlmClient, Arc<Transcript>), PipelineError> {
        let b = &self.cfg.backend;
        let transcript = Arc::new(Transcript::default());
        let client = match b.kind {
            BackendKind::Mock => {
                let script = b.script.as_ref().expect("validated");
                let mock = MockBackend::load_script(script).map_err(|e| PipelineError::StageInput {
                    stage,
                    path: script.clone(),
                    message: e.to_string(),
                })?;
                let cfg = BackendConfig {
                    retry_backoff_ms: 0,
                    ..b.backend_config()
                };
                LlmClient::new(Arc::new(mock), cfg)
            }
            BackendKind::Real => {
                let mut cfg = b.backend_config();
                cfg.apply_env();
                let transport = OpenAiTransport::from_env(&cfg).map_err(|e| stage_err(stage, e))?;
                LlmClient::new(Arc::new(transport), cfg)
            }
        };
        Ok((client.with_transcript(transcript.clone()), transcript))
    }

    fn read<T: DeserializeOwned>(&self, stage: Stage, file: &str) -> Result<Vec<T>, PipelineError> {
        let path = self.out(file);
        read_jsonl(&path).map_err(|e| PipelineError::StageInput {
            stage,
            path,
            message: e.to_string(),
        })
    }

    fn read_json<T: DeserializeOwned>(&self, stage: Stage, file: &str) -> Result<T, PipelineError> {
        let path = self.out(file);
        std::fs::read_to_string(&path)
            .map_err(|e| e.to_string())
            .and_then(|raw| serde_json::from_str(&raw).map_err(|e| e.to_string()))
            .map_err(|message| PipelineError::StageInput { stage, path, message })
    }

    fn assets(&self, stage: Stage) -> Result<CstPromptAssets, PipelineError> {
        match &self.cfg.cst.assets {
            None => Ok(CstPromptAssets::english_default()),
            Some(dir) => CstPromptAssets::load(dir).map_err(|e| PipelineError::StageInput {
                stage,
                path: dir.clone(),
                message: e.to_string(),
            }),
        }
    }

    fn principles(&self, stage: Stage) -> Result<PrincipleSet, PipelineError> {
        if !self.cfg.response.self_alignment {
            return Ok(PrincipleSet::default());
        }
        let path = self.cfg.response.principles.as_ref().expect("validated");
        PrincipleSet::load(path).map_err(|e| PipelineError::StageInput {
            stage,
            path: path.clone(),
            message: e.to_string(),
        })
    }

    fn contexts(&self, stage: Stage) -> Result<Vec<Context>, PipelineError> {
        self.read(stage, CONTEXTS_FILE)
    }

    /// Round-one queries grouped by root, in file order.
    fn collected_by_root(&self, stage: Stage) -> Result<HashMap<String, Vec<CollectedQuery>>, PipelineError> {
        let records: Vec<QueryRecord> = self.read(stage, QUERIES_FILE)?;
        let doc_of: HashMap<String, String> = self
            .contexts(stage)
            .unwrap_or_default()
            .into_iter()
            .map(|c| (c.id, c.doc_id))
            .collect();
        let unit = self.cfg.corpus.unit;
        let mut out: HashMap<String, Vec<CollectedQuery>> = HashMap::new();
        for r in records {
            let doc_id = doc_of.get(&r.root_context_id).cloned().unwrap_or_default();
            out.entry(r.root_context_id.clone()).or_default().push(CollectedQuery {
                root_id: r.root_context_id,
                context: Context::from_text(r.context_id, doc_id, &r.node_context_text, unit),
                node_path: r.node_path,
                depth: r.depth,
                query: r.query,
                terminal: r.terminal_reason,
            });
        }
        Ok(out)
    }

    fn execute(&self, stage: Stage) -> Result<StageResult, PipelineError> {
        let c = &self.cfg;
        let seed = self.stage_seed(stage);
        let mut warnings = Vec::new();
        let mut transcript = None;
        match stage {
            Stage::Extract => {
                let docs = load_corpus(&c.corpus.path).map_err(|e| PipelineError::StageInput {
                    stage,
                    path: c.corpus.path.clone(),
                    message: e.to_string(),
                })?;
                let contexts: Vec<Context> = docs
                    .iter()
                    .flat_map(|d| contexts_for_document(d, c.corpus.max_context_length, c.corpus.unit))
                    .collect();
                for ctx in contexts.iter().filter(|x| x.length > c.corpus.max_context_length) {
                    warnings.push(format!("context `{}` is a single sentence of {} units", ctx.id, ctx.length));
                }
                write_jsonl(&self.out(CONTEXTS_FILE), &contexts).map_err(|e| stage_err(stage, e))?;
            }
            Stage::Cst => {
                let roots = self.contexts(stage)?;
                let assets = self.assets(stage)?;
                let (client, t) = self.client(stage)?;
                let cst = c.cst_config();
                // Round one of every root; the filter stage continues from here.
                let cst_seed = self.stage_seed(Stage::Cst);
                let trees = parallel_map(&roots, client.max_in_flight(), |root| {
                    let cfg = CstConfig {
                        params: cst.params.with_seed(round_seed(cst_seed, &root.id, 1)),
                        ..cst
                    };
                    build_tree(root, &assets, &cfg, &client)
                });
                let mut records = Vec::new();
                for tree in trees {
                    let tree = tree.map_err(|e| stage_err(stage, e))?;
                    records.extend(collect_queries(&tree).iter().map(|q| QueryRecord::from_collected(q, 1)));
                }
                write_jsonl(&self.out(QUERIES_FILE), &records).map_err(|e| stage_err(stage, e))?;
                transcript = Some(t);
            }
            Stage::ScorerData => {
                let records: Vec<QueryRecord> = self.read(stage, QUERIES_FILE)?;
                let pool: Vec<Positive> = records
                    .into_iter()
                    .map(|r| Positive {
                        context: Context::from_text(r.context_id, r.root_context_id, &r.node_context_text, c.corpus.unit),
                        query: r.query,
                    })
                    .collect();
                let assets = self.assets(stage)?;
                let (client, t) = self.client(stage)?;
                let pairs = build_contrastive_pairs(&pool, &assets, c.scorer.per_kind, &c.cst_config(), &client, seed)
                    .map_err(|e| stage_err(stage, e))?;
                let out: Vec<PairRecord> = pairs.iter().map(PairRecord::from_pair).collect();
                write_jsonl(&self.out(PAIRS_FILE), &out).map_err(|e| stage_err(stage, e))?;
                transcript = Some(t);
            }
            Stage::ScorerTrain => {
                let records: Vec<PairRecord> = self.read(stage, PAIRS_FILE)?;
                let pairs: Vec<_> = records.into_iter().map(|r| r.into_pair(c.corpus.unit)).collect();
                let cfg = TrainConfig {
                    learning_rate: c.scorer.learning_rate,
                    epochs: c.scorer.epochs,
                    holdout_fraction: c.scorer.holdout_fraction,
                    seed,
                    unit: c.corpus.unit,
                };
                let model = train_scorer(&pairs, &cfg).map_err(|e| stage_err(stage, e))?;
                model.save(&self.out(MODEL_FILE)).map_err(|e| stage_err(stage, e))?;
            }
            Stage::Filter => {
                let roots = self.contexts(stage)?;
                let mut first = self.collected_by_root(stage)?;
                let model = ScorerModel::load(&self.out(MODEL_FILE)).map_err(|e| PipelineError::StageInput {
                    stage,
                    path: self.out(MODEL_FILE),
                    message: e.to_string(),
                })?;
                let assets = self.assets(stage)?;
                let (client, t) = self.client(stage)?;
                let fcfg = c.filter_config();
                let cst = c.cst_config();
                let cst_seed = self.stage_seed(Stage::Cst);
                let jobs: Vec<(Context, Vec<CollectedQuery>)> = roots
                    .into_iter()
                    .map(|r| {
                        let q = first.remove(&r.id).unwrap_or_default();
                        (r, q)
                    })
                    .collect();
                let outcomes = parallel_map(&jobs, client.max_in_flight(), |(root, round1)| {
                    filter_root(root, &assets, &model, &fcfg, &cst, &client, cst_seed, Some(round1.clone()))
                });
                let mut per_root = Vec::new();
                for o in outcomes {
                    let o = o.map_err(|e| stage_err(stage, e))?;
                    warnings.extend(o.warning);
                    per_root.push(o.selected);
                }
                let filtered: Vec<ScoredQuery> = consolidate(per_root);
                write_jsonl(&self.out(FILTERED_FILE), &filtered).map_err(|e| stage_err(stage, e))?;
                transcript = Some(t);
            }
            Stage::FewshotSearch => {
                let selection = if c.response.self_alignment {
                    let path = c.response.annotations.as_ref().expect("validated");
                    let annotated = load_annotations(path).map_err(|e| PipelineError::StageInput {
                        stage,
                        path: path.clone(),
                        message: e.to_string(),
                    })?;
                    let principles = self.principles(stage)?;
                    let (train, test) =
                        split_annotations(&annotated, c.response.frac, seed).map_err(|e| stage_err(stage, e))?;
                    let (client, t) = self.client(stage)?;
                    let cfg = SearchConfig {
                        k: c.response.k,
                        iterations: c.response.iterations,
                        params: c.generation.response.params(),
                        ..SearchConfig::default()
                    };
                    let sel = random_search_fewshot(&train, &test, &cfg, &principles, &client, seed)
                        .map_err(|e| stage_err(stage, e))?;
                    warnings.extend(sel.warnings.iter().cloned());
                    transcript = Some(t);
                    sel
                } else {
                    FewshotSelection::empty(seed)
                };
                let json = serde_json::to_string_pretty(&selection).expect("selection serializes");
                write_atomic(&self.out(SELECTION_FILE), json.as_bytes()).map_err(|e| stage_err(stage, e))?;
            }
            Stage::Respond => {
                let filtered: Vec<ScoredQuery> = self.read(stage, FILTERED_FILE)?;
                let selection: FewshotSelection = self.read_json(stage, SELECTION_FILE)?;
                let principles = self.principles(stage)?;
                let (client, t) = self.client(stage)?;
                let run = generate_responses(
                    &filtered,
                    &selection.chosen,
                    &principles,
                    c.generation.response.params(),
                    &client,
                    seed,
                );
                warnings.extend(run.warnings);
                warnings.extend(run.failures.iter().map(|f| format!("`{}` failed: {}", f.query_id, f.error)));
                write_jsonl(&self.out(SFT_FILE), &run.pairs).map_err(|e| stage_err(stage, e))?;
                write_jsonl(&self.out(FAILURES_FILE), &run.failures).map_err(|e| stage_err(stage, e))?;
                transcript = Some(t);
            }
            Stage::Eval => {
                let filtered: Vec<ScoredQuery> = self.read(stage, FILTERED_FILE)?;
                let queries: Vec<String> = filtered.iter().map(|q| q.query.clone()).collect();
                let diversity: Option<DiversityReport> =
                    diversity_report(&queries, c.filter.rouge_threshold, c.corpus.unit).ok();
                let exact_match = match &c.eval.predictions {
                    Some(p) => {
                        let items: Vec<QaItem> = read_jsonl(p).map_err(|e| PipelineError::StageInput {
                            stage,
                            path: p.clone(),
                            message: e.to_string(),
                        })?;
                        Some(exact_match_accuracy(&items, c.eval.normalize).map_err(|e| stage_err(stage, e))?)
                    }
                    None => None,
                };
                let report = serde_json::json!({
                    "query_count": filtered.len(),
                    "depth_histogram": depth_histogram(&filtered),
                    "diversity": diversity,
                    "exact_match": exact_match,
                });
                let json = serde_json::to_string_pretty(&report).expect("report serializes");
                write_atomic(&self.out(REPORT_FILE), json.as_bytes()).map_err(|e| stage_err(stage, e))?;
            }
        }
        Ok(StageResult { warnings, transcript })
    }
}

fn stage_err(stage: Stage, e: impl fmt::Display) -> PipelineError {
    PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
