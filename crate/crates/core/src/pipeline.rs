//! Experiment configs, end-to-end evaluation runs, lesson ablations and bias
//! mining over completed runs.
//!
//! A run lives in `<output_dir>/runs/<run_id>/` and is never modified once
//! written. The run id is a hash of the manifest with its timestamps left
//! out, so repeating a replay run with identical inputs lands on the same id
//! and reuses the existing directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bias::{
    assign_categories, filter_reliable_mistakes, prevalence, Assignment, BiasError, PrevalenceReport, Taxonomy,
    DEFAULT_CONFIDENCE_THRESHOLD, DEFAULT_TAU,
};
use crate::corpus::io::{read_avatar, read_pairs, read_poolc, write_pairs, PoolcFields};
use crate::corpus::{
    build_benchmark, check_unique_ids, convert_avatar, required_sample_size, sample_uniform, ClonePair, CorpusError,
    SamplingSpec,
};
use crate::digest::{json_hash, sha256_hex};
use crate::gateway::{BackendConfig, BackendMode, Gateway, GatewayError};
use crate::prompt::{
    render_confidence, render_rationale, render_with_lessons, template_checksums, Lesson, LessonSet, PromptError,
    PromptGuard, TemplateId,
};
use crate::report::{ablation_text, eval_text, to_json, AblationReport, EvalReport};
use crate::stats::{
    aligned_correctness, confusion, delta_f1, metrics, paired_significance, shift_from_correctness,
    SignificanceTest, StatsError,
};
use crate::verdict::{parse_confidence, VerdictRecord};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Bias(#[from] BiasError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("no run {0}")]
    RunNotFound(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// Normalised pair records as written by `convert`.
    #[default]
    Pairs,
    /// Java/Python translation records to be converted into pairs.
    Avatar,
    /// Within-language pairs with configurable column names.
    Poolc,
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    #[serde(default)]
    pub format: DatasetFormat,
    /// Avatar only.
    #[serde(default = "one")]
    pub negatives_per_positive: usize,
    /// Poolc only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fields: Option<PoolcFields>,
    /// Skip malformed lines instead of failing.
    #[serde(default)]
    pub lenient: bool,
}

/// Either a fixed benchmark size, or a confidence level and margin of error
/// from which the size is derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence_level: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin_of_error: Option<f64>,
    #[serde(default = "yes")]
    pub balanced: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommentVariant {
    #[default]
    With,
    Without,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    /// Lessons injected in `eval`; empty means the default prompt.
    #[serde(default)]
    pub lessons: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lesson_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_prompt_chars: Option<usize>,
}

fn default_threshold() -> u8 {
    DEFAULT_CONFIDENCE_THRESHOLD
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningConfig {
    #[serde(default = "default_threshold")]
    pub confidence_threshold: u8,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taxonomy_file: Option<PathBuf>,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
            tau: DEFAULT_TAU,
            taxonomy_file: None,
        }
    }
}

/// One experiment, read from a TOML file. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub comments: CommentVariant,
    /// Run the full lesson ablation instead of a single condition.
    #[serde(default)]
    pub ablation: bool,
    #[serde(default)]
    pub significance_test: SignificanceTest,
    pub dataset: DatasetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling: Option<SamplingConfig>,
    #[serde(default)]
    pub prompt: PromptConfig,
    pub backend: BackendConfig,
    #[serde(default)]
    pub mining: MiningConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configs serialize")
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.dataset.path);
        if let Some(p) = self.backend.cache_path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.prompt.lesson_file.as_mut() {
            fix(p);
        }
        if let Some(p) = self.mining.taxonomy_file.as_mut() {
            fix(p);
        }
    }

    /// Checks everything that can be checked without touching the backend
    /// or writing anything.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.backend.validate()?;
        if !self.dataset.path.is_file() {
            return bad(format!("dataset {} does not exist", self.dataset.path.display()));
        }
        if self.backend.mode == BackendMode::Replay {
            let cache = self.backend.cache_path.as_ref().expect("validated by backend");
            if !cache.is_file() {
                return bad(format!("replay fixture {} does not exist", cache.display()));
            }
        }
        if self.dataset.fields.is_some() && self.dataset.format != DatasetFormat::Poolc {
            return bad("dataset.fields only applies to the poolc format".into());
        }
        if let Some(s) = &self.sampling {
            match (s.size, s.confidence_level, s.margin_of_error) {
                (Some(0), _, _) => return bad("sampling.size must be positive".into()),
                (Some(n), _, _) if s.balanced && n % 2 != 0 => {
                    return bad(format!("balanced sampling.size {n} is not even"))
                }
                (Some(_), None, None) => {}
                (Some(_), _, _) => return bad("give sampling.size or confidence_level/margin_of_error, not both".into()),
                (None, Some(cl), Some(e)) => SamplingSpec {
                    population_size: 1,
                    confidence_level: cl,
                    margin_of_error: e,
                    seed: 0,
                    balanced: s.balanced,
                }
                .validate()?,
                (None, _, _) => return bad("sampling needs size, or both confidence_level and margin_of_error".into()),
            }
        }
        if self.prompt.max_prompt_chars == Some(0) {
            return bad("prompt.max_prompt_chars must be positive".into());
        }
        if self.mining.confidence_threshold > 100 {
            return bad("mining.confidence_threshold must be within 0..=100".into());
        }
        if !(self.mining.tau > 0.0 && self.mining.tau <= 1.0) {
            return bad("mining.tau must be in (0, 1]".into());
        }
        let mut ids = BTreeSet::new();
        for id in &self.prompt.lessons {
            if !ids.insert(id) {
                return bad(format!("lesson {id} selected twice"));
            }
        }
        Ok(())
    }
}

/// A validated config together with the lesson library and taxonomy it uses.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub lessons: LessonSet,
    pub taxonomy: Taxonomy,
}

impl Experiment {
    pub fn load(config: ExperimentConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let lessons = match &config.prompt.lesson_file {
            Some(path) => LessonSet::load(path)?,
            None => LessonSet::standard(),
        };
        let taxonomy = match &config.mining.taxonomy_file {
            Some(path) => Taxonomy::load(path)?,
            None => Taxonomy::standard(),
        };
        Self::new(config, lessons, taxonomy)
    }

    pub fn new(config: ExperimentConfig, lessons: LessonSet, taxonomy: Taxonomy) -> Result<Self, PipelineError> {
        config.validate()?;
        lessons.select(&config.prompt.lessons)?;
        Ok(Experiment {
            config,
            lessons,
            taxonomy,
        })
    }

    fn guard(&self) -> PromptGuard {
        PromptGuard {
            max_chars: self.config.prompt.max_prompt_chars,
        }
    }
}

/// What was evaluated, recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub file_name: String,
    pub format: DatasetFormat,
    pub source_sha256: String,
    pub records_read: u64,
    pub skipped_lines: u64,
    pub conversion_warnings: u64,
    pub comments: CommentVariant,
    pub sampled: Option<SamplingRecord>,
    pub pair_count: u64,
    /// Hash of the exact pairs evaluated, after sampling and stripping.
    pub benchmark_hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingRecord {
    pub size: u64,
    pub balanced: bool,
    pub seed: u64,
}

/// The benchmark actually evaluated.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub pairs: Vec<ClonePair>,
    pub dataset: DatasetDescriptor,
}

pub fn prepare_pairs(cfg: &ExperimentConfig) -> Result<Prepared, PipelineError> {
    let path = &cfg.dataset.path;
    let bytes = fs::read(path).map_err(io_err(path))?;
    let lenient = cfg.dataset.lenient;
    let (pairs, records_read, skipped, warnings) = match cfg.dataset.format {
        DatasetFormat::Pairs => {
            let loaded = read_pairs(bytes.as_slice(), lenient)?;
            (loaded.records, None, loaded.skipped.len(), 0)
        }
        DatasetFormat::Poolc => {
            let fields = cfg.dataset.fields.clone().unwrap_or_default();
            let loaded = read_poolc(bytes.as_slice(), &fields, lenient)?;
            (loaded.records, None, loaded.skipped.len(), 0)
        }
        DatasetFormat::Avatar => {
            let loaded = read_avatar(bytes.as_slice(), lenient)?;
            let conv = convert_avatar(&loaded.records, cfg.dataset.negatives_per_positive, cfg.seed)?;
            for w in &conv.warnings {
                log::warn!("{w:?}");
            }
            (conv.pairs, Some(loaded.records.len()), loaded.skipped.len(), conv.warnings.len())
        }
    };
    if skipped > 0 {
        log::warn!("skipped {skipped} malformed dataset lines");
    }
    check_unique_ids(&pairs)?;
    let records_read = records_read.unwrap_or(pairs.len()) as u64;

    let (pairs, sampled) = match &cfg.sampling {
        None => (pairs, None),
        Some(s) => {
            let size = match s.size {
                Some(n) => n,
                None => {
                    let n = required_sample_size(&SamplingSpec {
                        population_size: pairs.len() as u64,
                        confidence_level: s.confidence_level.expect("validated"),
                        margin_of_error: s.margin_of_error.expect("validated"),
                        seed: cfg.seed,
                        balanced: s.balanced,
                    })? as usize;
                    if s.balanced {
                        n + n % 2
                    } else {
                        n
                    }
                }
            };
            let picked = if s.balanced {
                build_benchmark(&pairs, size, cfg.seed)?
            } else {
                sample_uniform(&pairs, size, cfg.seed)?
            };
            (
                picked,
                Some(SamplingRecord {
                    size: size as u64,
                    balanced: s.balanced,
                    seed: cfg.seed,
                }),
            )
        }
    };

    let pairs = match cfg.comments {
        CommentVariant::With => pairs,
        CommentVariant::Without => pairs
            .iter()
            .map(|p| p.without_comments())
            .collect::<Result<Vec<_>, _>>()?,
    };
    if pairs.is_empty() {
        return Err(CorpusError::EmptyInput.into());
    }

    let dataset = DatasetDescriptor {
        file_name: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        format: cfg.dataset.format,
        source_sha256: sha256_hex(&bytes),
        records_read,
        skipped_lines: skipped as u64,
        conversion_warnings: warnings as u64,
        comments: cfg.comments,
        sampled,
        pair_count: pairs.len() as u64,
        benchmark_hash: sha256_hex(pairs_jsonl(&pairs)),
    };
    Ok(Prepared { pairs, dataset })
}

fn pairs_jsonl(pairs: &[ClonePair]) -> Vec<u8> {
    let mut out = Vec::new();
    write_pairs(&mut out, pairs).expect("writing to memory");
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Eval,
    Ablation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub name: String,
    pub template_id: TemplateId,
    pub lesson_ids: Vec<u8>,
}

/// Backend settings as recorded in a manifest. Credentials are never read
/// into the config, so only the variable name is kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRecord {
    pub provider_id: String,
    pub model_name: String,
    pub temperature: f64,
    pub mode: BackendMode,
    pub max_retries: u32,
    pub requests_per_minute: u32,
    pub max_concurrency: usize,
    pub base_url: Option<String>,
    pub credentials: Option<String>,
    /// Content hash of the replay fixture, in replay mode.
    pub fixture_sha256: Option<String>,
}

impl BackendRecord {
    fn new(cfg: &BackendConfig) -> Result<Self, PipelineError> {
        let fixture_sha256 = match (cfg.mode, &cfg.cache_path) {
            (BackendMode::Replay, Some(p)) => Some(sha256_hex(fs::read(p).map_err(io_err(p))?)),
            _ => None,
        };
        Ok(BackendRecord {
            provider_id: cfg.provider_id.clone(),
            model_name: cfg.model_name.clone(),
            temperature: cfg.temperature,
            mode: cfg.mode,
            max_retries: cfg.max_retries,
            requests_per_minute: cfg.requests_per_minute,
            max_concurrency: cfg.max_concurrency,
            base_url: cfg.base_url.clone(),
            credentials: (cfg.mode != BackendMode::Replay).then(|| format!("env:{}", cfg.credential_var())),
            fixture_sha256,
        })
    }
}

/// Protocol choices the source study leaves open.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub retries: String,
    pub truncation: String,
    pub follow_up_prompts: String,
    pub max_prompt_chars: Option<usize>,
}

impl Protocol {
    fn new(max_prompt_chars: Option<usize>) -> Self {
        Protocol {
            retries: "transport failures only (rate limit, timeout); exponential backoff from 1s, capped at 60s".into(),
            truncation: "never; prompts over max_prompt_chars are rejected per pair".into(),
            follow_up_prompts: "single-turn; confidence and rationale prompts embed the detection prompt".into(),
            max_prompt_chars,
        }
    }
}

/// Everything that determines a run's outputs. Hashed to form the run id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestBody {
    pub kind: RunKind,
    pub tool_version: String,
    pub dataset: DatasetDescriptor,
    pub conditions: Vec<ConditionSpec>,
    pub template_checksums: BTreeMap<TemplateId, String>,
    pub lesson_set_version: String,
    pub taxonomy_version: String,
    pub backend: BackendRecord,
    pub seed: u64,
    pub significance_test: SignificanceTest,
    pub protocol: Protocol,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    #[serde(flatten)]
    pub body: ManifestBody,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
}

impl RunManifest {
    /// Hash over everything except the timestamps; equal to the run id.
    pub fn content_hash(&self) -> String {
        json_hash(&self.body)
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// A detection response that held no yes/no verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnparsedEntry {
    pub pair_id: String,
    pub raw: String,
}

/// A pair that produced no response (prompt rejected or backend error).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedEntry {
    pub pair_id: String,
    pub error: String,
}

/// Per-condition logs, in benchmark order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConditionLog {
    pub verdicts: Vec<VerdictRecord>,
    pub unparsed: Vec<UnparsedEntry>,
    pub failures: Vec<FailedEntry>,
}

impl ConditionLog {
    /// Every pair id that appears in any of the three logs.
    pub fn pair_ids(&self) -> BTreeSet<&str> {
        self.verdicts
            .iter()
            .map(|v| v.pair_id.as_str())
            .chain(self.unparsed.iter().map(|u| u.pair_id.as_str()))
            .chain(self.failures.iter().map(|f| f.pair_id.as_str()))
            .collect()
    }
}

/// Renders, completes and parses one condition over all pairs.
pub fn evaluate_condition(
    pairs: &[ClonePair],
    lessons: &[Lesson],
    guard: PromptGuard,
    gateway: &Gateway,
) -> Result<ConditionLog, PipelineError> {
    let mut log = ConditionLog::default();
    let mut pending = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let prompt = render_with_lessons(pair, lessons)?;
        match guard.check(&prompt) {
            Ok(()) => pending.push((pair, prompt.text)),
            Err(e) => log.failures.push(FailedEntry {
                pair_id: pair.id.clone(),
                error: e.to_string(),
            }),
        }
    }
    let texts: Vec<&str> = pending.iter().map(|(_, t)| t.as_str()).collect();
    for ((pair, _), result) in pending.iter().zip(gateway.complete_texts(&texts)) {
        match result {
            Ok(raw) => match VerdictRecord::from_response(&pair.id, pair.label, raw.clone()) {
                Ok(v) => log.verdicts.push(v),
                Err(_) => log.unparsed.push(UnparsedEntry {
                    pair_id: pair.id.clone(),
                    raw,
                }),
            },
            Err(e) => log.failures.push(FailedEntry {
                pair_id: pair.id.clone(),
                error: e.to_string(),
            }),
        }
    }
    Ok(log)
}

fn condition_report(run_id: &str, spec: &ConditionSpec, total: usize, log: &ConditionLog) -> EvalReport {
    let counts = confusion(&log.verdicts);
    EvalReport {
        run_id: run_id.to_string(),
        condition: spec.name.clone(),
        template_id: spec.template_id,
        lesson_ids: spec.lesson_ids.clone(),
        total_pairs: total as u64,
        scored: log.verdicts.len() as u64,
        unparsed: log.unparsed.len() as u64,
        failed: log.failures.len() as u64,
        counts,
        metrics: metrics(&counts),
        baseline: None,
        significance: None,
        shift: None,
        compared_pairs: None,
    }
}

/// Fills ΔF1, p-value and shifts of `report` against the baseline log, on
/// the pairs scored under both.
fn compare(report: &mut EvalReport, log: &ConditionLog, base: &EvalReport, base_log: &ConditionLog, test: SignificanceTest) {
    let (ids, a, b) = aligned_correctness(&base_log.verdicts, &log.verdicts);
    report.baseline = Some(base.condition.clone());
    report.compared_pairs = Some(ids.len() as u64);
    report.shift = Some(shift_from_correctness(&a, &b));
    report.metrics.delta_f1_points = match delta_f1(&report.metrics, &base.metrics) {
        Ok(d) => Some(d),
        Err(e) => {
            log::warn!("{}: no F1 delta ({e})", report.condition);
            None
        }
    };
    match paired_significance(&a, &b, test) {
        Ok(r) => {
            report.metrics.p_value = Some(r.p_value);
            report.significance = Some(r);
        }
        Err(e) => log::warn!("{}: no significance test ({e})", report.condition),
    }
}

fn condition_specs(lessons: &LessonSet, kind: RunKind, selection: &[u8]) -> Vec<ConditionSpec> {
    let spec = |name: String, ids: Vec<u8>| ConditionSpec {
        name,
        template_id: if ids.is_empty() {
            TemplateId::Default
        } else {
            TemplateId::LessonAugmented
        },
        lesson_ids: ids,
    };
    match kind {
        RunKind::Eval => {
            let mut ids = selection.to_vec();
            ids.sort_unstable();
            let name = match ids.as_slice() {
                [] => "default".to_string(),
                [one] => format!("lesson_{one}"),
                many if many == lessons.ids().as_slice() => "all_lessons".to_string(),
                many => format!("lessons_{}", many.iter().map(u8::to_string).collect::<Vec<_>>().join("_")),
            };
            vec![spec(name, ids)]
        }
        RunKind::Ablation => {
            let mut out = vec![spec("default".into(), vec![])];
            out.extend(lessons.ids().into_iter().map(|id| spec(format!("lesson_{id}"), vec![id])));
            out.push(spec("all_lessons".into(), lessons.ids()));
            out
        }
    }
}

/// A finished (or previously finished) run.
#[derive(Debug, Clone)]
pub struct RunOutcome<R> {
    pub run_id: String,
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub report: R,
    /// True when an identical run already existed and was returned as is.
    pub reused: bool,
}

pub fn runs_dir(output_dir: &Path) -> PathBuf {
    output_dir.join("runs")
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("records serialize"));
        out.push('\n');
    }
    out
}

fn write_new(path: &Path, contents: &[u8]) -> Result<(), PipelineError> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new().write(true).create_new(true).open(path).map_err(io_err(path))?;
    f.write_all(contents).map_err(io_err(path))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let f = File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| PipelineError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Parse {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// Writes a complete run into a staging directory and moves it into place,
/// so a run directory is either absent or complete.
fn commit_run(runs: &Path, run_id: &str, files: Vec<(PathBuf, Vec<u8>)>) -> Result<(PathBuf, bool), PipelineError> {
    let target = runs.join(run_id);
    if target.exists() {
        return Ok((target, true));
    }
    fs::create_dir_all(runs).map_err(io_err(runs))?;
    let staging = runs.join(format!(".staging-{run_id}-{}-{}", std::process::id(), now_ms()));
    for (rel, bytes) in files {
        let path = staging.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        write_new(&path, &bytes)?;
    }
    match fs::rename(&staging, &target) {
        Ok(()) => Ok((target, false)),
        Err(_) if target.exists() => {
            let _ = fs::remove_dir_all(&staging);
            Ok((target, true))
        }
        Err(e) => Err(PipelineError::Io { path: target, source: e }),
    }
}

struct Planned {
    prepared: Prepared,
    specs: Vec<ConditionSpec>,
    body: ManifestBody,
    run_id: String,
}

fn plan(exp: &Experiment, kind: RunKind) -> Result<Planned, PipelineError> {
    let cfg = &exp.config;
    let prepared = prepare_pairs(cfg)?;
    let specs = condition_specs(&exp.lessons, kind, &cfg.prompt.lessons);
    let body = ManifestBody {
        kind,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        dataset: prepared.dataset.clone(),
        conditions: specs.clone(),
        template_checksums: template_checksums(),
        lesson_set_version: exp.lessons.version_hash(),
        taxonomy_version: exp.taxonomy.version_hash(),
        backend: BackendRecord::new(&cfg.backend)?,
        seed: cfg.seed,
        significance_test: cfg.significance_test,
        protocol: Protocol::new(cfg.prompt.max_prompt_chars),
    };
    let run_id = json_hash(&body);
    Ok(Planned {
        prepared,
        specs,
        body,
        run_id,
    })
}

fn check_backend(exp: &Experiment, gateway: &Gateway) -> Result<(), PipelineError> {
    let (a, b) = (&exp.config.backend, gateway.config());
    if a.model_name != b.model_name || a.temperature != b.temperature || a.mode != b.mode {
        return Err(PipelineError::Config("gateway does not match the experiment's backend".into()));
    }
    Ok(())
}

/// Evaluates the configured condition (default prompt, or the selected
/// lessons) over the benchmark.
pub fn run_eval(exp: &Experiment, gateway: &Gateway) -> Result<RunOutcome<EvalReport>, PipelineError> {
    check_backend(exp, gateway)?;
    let planned = plan(exp, RunKind::Eval)?;
    let dir = runs_dir(&exp.config.output_dir).join(&planned.run_id);
    if dir.join("report.json").is_file() {
        return load_existing(&dir);
    }
    let started = now_ms();
    let spec = &planned.specs[0];
    let lessons = exp.lessons.select(&spec.lesson_ids)?;
    let pairs = &planned.prepared.pairs;
    let log = evaluate_condition(pairs, &lessons, exp.guard(), gateway)?;
    let report = condition_report(&planned.run_id, spec, pairs.len(), &log);

    let manifest = RunManifest {
        run_id: planned.run_id.clone(),
        body: planned.body,
        started_at_ms: started,
        finished_at_ms: now_ms(),
    };
    let files = vec![
        ("manifest.json".into(), to_json(&manifest).into_bytes()),
        ("pairs.jsonl".into(), pairs_jsonl(pairs)),
        ("verdicts.jsonl".into(), jsonl(&log.verdicts).into_bytes()),
        ("unparsed.jsonl".into(), jsonl(&log.unparsed).into_bytes()),
        ("failures.jsonl".into(), jsonl(&log.failures).into_bytes()),
        ("report.json".into(), to_json(&report).into_bytes()),
        ("report.txt".into(), eval_text(&report).into_bytes()),
    ];
    let (dir, reused) = commit_run(&runs_dir(&exp.config.output_dir), &planned.run_id, files)?;
    if reused {
        return load_existing(&dir);
    }
    Ok(RunOutcome {
        run_id: planned.run_id,
        dir,
        manifest,
        report,
        reused: false,
    })
}

/// Runs the default prompt, each lesson alone and all lessons together over
/// the same benchmark, comparing every condition against the default.
pub fn run_ablation(exp: &Experiment, gateway: &Gateway) -> Result<RunOutcome<AblationReport>, PipelineError> {
    check_backend(exp, gateway)?;
    let planned = plan(exp, RunKind::Ablation)?;
    let dir = runs_dir(&exp.config.output_dir).join(&planned.run_id);
    if dir.join("report.json").is_file() {
        return load_existing(&dir);
    }
    let started = now_ms();
    let pairs = &planned.prepared.pairs;
    let mut logs = Vec::with_capacity(planned.specs.len());
    for spec in &planned.specs {
        let lessons = exp.lessons.select(&spec.lesson_ids)?;
        logs.push(evaluate_condition(pairs, &lessons, exp.guard(), gateway)?);
    }
    let expected: BTreeSet<&str> = pairs.iter().map(|p| p.id.as_str()).collect();
    debug_assert!(logs.iter().all(|l| l.pair_ids() == expected));

    let mut reports: Vec<EvalReport> = planned
        .specs
        .iter()
        .zip(&logs)
        .map(|(spec, log)| condition_report(&planned.run_id, spec, pairs.len(), log))
        .collect();
    if reports[0].metrics.f1.value().is_some() {
        reports[0].metrics.delta_f1_points = Some(0.0);
    }
    let base = reports[0].clone();
    for (report, log) in reports.iter_mut().zip(&logs).skip(1) {
        compare(report, log, &base, &logs[0], exp.config.significance_test);
    }
    let report = AblationReport {
        run_id: planned.run_id.clone(),
        lesson_set_version: exp.lessons.version_hash(),
        significance_test: exp.config.significance_test,
        conditions: reports,
    };

    let manifest = RunManifest {
        run_id: planned.run_id.clone(),
        body: planned.body,
        started_at_ms: started,
        finished_at_ms: now_ms(),
    };
    let mut files: Vec<(PathBuf, Vec<u8>)> = vec![
        ("manifest.json".into(), to_json(&manifest).into_bytes()),
        ("pairs.jsonl".into(), pairs_jsonl(pairs)),
        ("report.json".into(), to_json(&report).into_bytes()),
        ("report.txt".into(), ablation_text(&report).into_bytes()),
    ];
    for (spec, log) in planned.specs.iter().zip(&logs) {
        let base = Path::new("conditions").join(&spec.name);
        files.push((base.join("verdicts.jsonl"), jsonl(&log.verdicts).into_bytes()));
        files.push((base.join("unparsed.jsonl"), jsonl(&log.unparsed).into_bytes()));
        files.push((base.join("failures.jsonl"), jsonl(&log.failures).into_bytes()));
    }
    let (dir, reused) = commit_run(&runs_dir(&exp.config.output_dir), &planned.run_id, files)?;
    if reused {
        return load_existing(&dir);
    }
    Ok(RunOutcome {
        run_id: planned.run_id,
        dir,
        manifest,
        report,
        reused: false,
    })
}

fn load_existing<R: DeserializeOwned>(dir: &Path) -> Result<RunOutcome<R>, PipelineError> {
    let manifest: RunManifest = read_json(&dir.join("manifest.json"))?;
    log::info!("run {} already exists; reusing it", manifest.run_id);
    Ok(RunOutcome {
        run_id: manifest.run_id.clone(),
        dir: dir.to_path_buf(),
        report: read_json(&dir.join("report.json"))?,
        manifest,
        reused: true,
    })
}

/// Handle on a completed run directory.
#[derive(Debug, Clone)]
pub struct StoredRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl StoredRun {
    pub fn open(output_dir: &Path, run_id: &str) -> Result<Self, PipelineError> {
        let valid = !run_id.is_empty() && run_id.chars().all(|c| c.is_ascii_hexdigit());
        let dir = runs_dir(output_dir).join(run_id);
        if !valid || !dir.join("manifest.json").is_file() {
            return Err(PipelineError::RunNotFound(run_id.to_string()));
        }
        Self::open_dir(&dir)
    }

    pub fn open_dir(dir: &Path) -> Result<Self, PipelineError> {
        Ok(StoredRun {
            dir: dir.to_path_buf(),
            manifest: read_json(&dir.join("manifest.json"))?,
        })
    }

    pub fn run_id(&self) -> &str {
        &self.manifest.run_id
    }

    pub fn pairs(&self) -> Result<Vec<ClonePair>, PipelineError> {
        let path = self.dir.join("pairs.jsonl");
        let f = File::open(&path).map_err(io_err(&path))?;
        Ok(read_pairs(BufReader::new(f), false)?.records)
    }

    /// Condition whose mistakes are mined: the single eval condition, or the
    /// default prompt of an ablation.
    pub fn primary_condition(&self) -> &ConditionSpec {
        &self.manifest.body.conditions[0]
    }

    fn condition_dir(&self, name: &str) -> PathBuf {
        match self.manifest.body.kind {
            RunKind::Eval => self.dir.clone(),
            RunKind::Ablation => self.dir.join("conditions").join(name),
        }
    }

    pub fn verdicts(&self, condition: &str) -> Result<Vec<VerdictRecord>, PipelineError> {
        read_jsonl(&self.condition_dir(condition).join("verdicts.jsonl"))
    }

    pub fn condition_log(&self, condition: &str) -> Result<ConditionLog, PipelineError> {
        let dir = self.condition_dir(condition);
        Ok(ConditionLog {
            verdicts: read_jsonl(&dir.join("verdicts.jsonl"))?,
            unparsed: read_jsonl(&dir.join("unparsed.jsonl"))?,
            failures: read_jsonl(&dir.join("failures.jsonl"))?,
        })
    }

    pub fn report_json(&self) -> Result<String, PipelineError> {
        let path = self.dir.join("report.json");
        fs::read_to_string(&path).map_err(io_err(&path))
    }

    pub fn report_text(&self) -> Result<String, PipelineError> {
        let path = self.dir.join("report.txt");
        fs::read_to_string(&path).map_err(io_err(&path))
    }

    pub fn mining(&self, mining_id: &str) -> Result<Option<StoredMining>, PipelineError> {
        let dir = self.dir.join("mining").join(mining_id);
        if !dir.join("mining.json").is_file() {
            return Ok(None);
        }
        Ok(Some(StoredMining {
            report: read_json(&dir.join("mining.json"))?,
            dir,
        }))
    }

    /// Ids of every mining pass stored for this run, sorted.
    pub fn mining_ids(&self) -> Result<Vec<String>, PipelineError> {
        let dir = self.dir.join("mining");
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("mining.json").is_file())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        Ok(ids)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub kind: RunKind,
    pub model_name: String,
    pub pair_count: u64,
    pub conditions: Vec<String>,
    pub lesson_set_version: String,
    pub finished_at_ms: u64,
}

/// Every completed run under `output_dir`, oldest first.
pub fn list_runs(output_dir: &Path) -> Result<Vec<RunSummary>, PipelineError> {
    let runs = runs_dir(output_dir);
    if !runs.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(&runs).map_err(io_err(&runs))? {
        let entry = entry.map_err(io_err(&runs))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') || !entry.path().join("manifest.json").is_file() {
            continue;
        }
        let run = StoredRun::open_dir(&entry.path())?;
        let m = &run.manifest;
        out.push(RunSummary {
            run_id: m.run_id.clone(),
            kind: m.body.kind,
            model_name: m.body.backend.model_name.clone(),
            pair_count: m.body.dataset.pair_count,
            conditions: m.body.conditions.iter().map(|c| c.name.clone()).collect(),
            lesson_set_version: m.body.lesson_set_version.clone(),
            finished_at_ms: m.finished_at_ms,
        });
    }
    out.sort_by(|a, b| a.finished_at_ms.cmp(&b.finished_at_ms).then_with(|| a.run_id.cmp(&b.run_id)));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningStatus {
    Ok,
    NoReliableMistakes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub run_id: String,
    pub mining_id: String,
    pub condition: String,
    pub taxonomy_version: String,
    pub confidence_threshold: u8,
    pub tau: f64,
    pub mistakes: u64,
    pub confidence_requested: u64,
    /// Mistakes without a usable confidence (failed or unparseable).
    pub missing_confidence: u64,
    pub reliable: u64,
    pub rationales: u64,
    pub rationale_failures: u64,
    pub status: MiningStatus,
    pub prevalence: Option<PrevalenceReport>,
}

impl MiningReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "run {}  condition {}  mining {}\nmistakes {}  reliable {} (confidence >= {})  missing confidence {}  rationales {}  failed rationales {}\n\n",
            self.run_id,
            self.condition,
            self.mining_id,
            self.mistakes,
            self.reliable,
            self.confidence_threshold,
            self.missing_confidence,
            self.rationales,
            self.rationale_failures
        );
        match (&self.status, &self.prevalence) {
            (MiningStatus::Ok, Some(p)) => out.push_str(&p.to_table()),
            _ => out.push_str("no reliable mistakes\n"),
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct StoredMining {
    pub dir: PathBuf,
    pub report: MiningReport,
}

impl StoredMining {
    /// Reliable mistakes with their confidence and rationale.
    pub fn mistakes(&self) -> Result<Vec<VerdictRecord>, PipelineError> {
        read_jsonl(&self.dir.join("mistakes.jsonl"))
    }

    pub fn assignments(&self) -> Result<Vec<Assignment>, PipelineError> {
        read_jsonl(&self.dir.join("assignments.jsonl"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct MiningKey<'a> {
    run_id: &'a str,
    taxonomy_version: String,
    confidence_threshold: u8,
    tau: f64,
    model_name: &'a str,
    temperature: f64,
}

/// Identifier of a mining pass: the run plus every input that affects it.
pub fn mining_id(run_id: &str, taxonomy: &Taxonomy, mining: &MiningConfig, backend: &BackendConfig) -> String {
    json_hash(&MiningKey {
        run_id,
        taxonomy_version: taxonomy.version_hash(),
        confidence_threshold: mining.confidence_threshold,
        tau: mining.tau,
        model_name: &backend.model_name,
        temperature: backend.temperature,
    })[..16]
        .to_string()
}

/// Confidence-filters the run's mistakes, asks for rationales on the
/// reliable ones and measures category prevalence. Follow-up prompts are
/// only issued for mistakes.
pub fn mine_bias(
    run: &StoredRun,
    taxonomy: &Taxonomy,
    mining: &MiningConfig,
    gateway: &Gateway,
) -> Result<StoredMining, PipelineError> {
    let id = mining_id(run.run_id(), taxonomy, mining, gateway.config());
    if let Some(existing) = run.mining(&id)? {
        return Ok(existing);
    }
    let condition = run.primary_condition().name.clone();
    let pairs = run.pairs()?;
    let by_id: BTreeMap<&str, &ClonePair> = pairs.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut mistakes: Vec<VerdictRecord> = run.verdicts(&condition)?.into_iter().filter(|v| !v.is_correct()).collect();

    let pair_of = |v: &VerdictRecord| {
        by_id.get(v.pair_id.as_str()).copied().ok_or_else(|| PipelineError::Parse {
            path: run.dir.join("pairs.jsonl"),
            message: format!("verdict for unknown pair {}", v.pair_id),
        })
    };

    let needs: Vec<usize> = (0..mistakes.len()).filter(|&i| mistakes[i].confidence.is_none()).collect();
    let prompts = needs
        .iter()
        .map(|&i| Ok(render_confidence(pair_of(&mistakes[i])?, mistakes[i].predicted).text))
        .collect::<Result<Vec<String>, PipelineError>>()?;
    let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
    let mut failures: Vec<FailedEntry> = Vec::new();
    for (&i, result) in needs.iter().zip(gateway.complete_texts(&refs)) {
        match result.map_err(|e| e.to_string()).and_then(|raw| parse_confidence(&raw).map_err(|e| e.to_string())) {
            Ok(c) => mistakes[i].confidence = Some(c),
            Err(e) => failures.push(FailedEntry {
                pair_id: mistakes[i].pair_id.clone(),
                error: format!("confidence: {e}"),
            }),
        }
    }

    let filtered = filter_reliable_mistakes(&mistakes, mining.confidence_threshold);
    let mut reliable = filtered.records;
    let prompts = reliable
        .iter()
        .map(|v| Ok(render_rationale(pair_of(v)?, v.predicted, v.gold)?.text))
        .collect::<Result<Vec<String>, PipelineError>>()?;
    let refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
    let mut assignments = Vec::new();
    let mut rationale_failures = 0;
    for (v, result) in reliable.iter_mut().zip(gateway.complete_texts(&refs)) {
        match result {
            Ok(raw) if !raw.trim().is_empty() => {
                let text = raw.trim().to_string();
                assignments.push(Assignment {
                    pair_id: v.pair_id.clone(),
                    categories: assign_categories(&text, taxonomy, mining.tau),
                    rationale: text.clone(),
                });
                v.rationale = Some(text);
            }
            other => {
                rationale_failures += 1;
                failures.push(FailedEntry {
                    pair_id: v.pair_id.clone(),
                    error: match other {
                        Err(e) => format!("rationale: {e}"),
                        Ok(_) => "rationale: empty response".into(),
                    },
                });
            }
        }
    }

    let prevalence_report = if assignments.is_empty() {
        None
    } else {
        Some(prevalence(&assignments, taxonomy, mining.tau)?)
    };
    let report = MiningReport {
        run_id: run.run_id().to_string(),
        mining_id: id.clone(),
        condition,
        taxonomy_version: taxonomy.version_hash(),
        confidence_threshold: mining.confidence_threshold,
        tau: mining.tau,
        mistakes: mistakes.len() as u64,
        confidence_requested: needs.len() as u64,
        missing_confidence: filtered.missing_confidence as u64,
        reliable: reliable.len() as u64,
        rationales: assignments.len() as u64,
        rationale_failures,
        status: if prevalence_report.is_some() {
            MiningStatus::Ok
        } else {
            MiningStatus::NoReliableMistakes
        },
        prevalence: prevalence_report,
    };

    let mining_root = run.dir.join("mining");
    let mut files: Vec<(PathBuf, Vec<u8>)> = vec![
        ("mining.json".into(), to_json(&report).into_bytes()),
        ("mining.txt".into(), report.to_text().into_bytes()),
        ("confidences.jsonl".into(), jsonl(&mistakes).into_bytes()),
        ("mistakes.jsonl".into(), jsonl(&reliable).into_bytes()),
        ("assignments.jsonl".into(), jsonl(&assignments).into_bytes()),
        ("failures.jsonl".into(), jsonl(&failures).into_bytes()),
        ("taxonomy.json".into(), taxonomy.to_json().into_bytes()),
    ];
    if let Some(p) = &report.prevalence {
        files.push(("prevalence.json".into(), to_json(p).into_bytes()));
    }
    let (dir, _) = commit_run(&mining_root, &id, files)?;
    Ok(run.mining(&id)?.unwrap_or(StoredMining { dir, report }))
}

/// Recomputes prevalence from a stored assignment log.
pub fn prevalence_from_log(mining: &StoredMining, taxonomy: &Taxonomy) -> Result<PrevalenceReport, PipelineError> {
    Ok(prevalence(&mining.assignments()?, taxonomy, mining.report.tau)?)
}
