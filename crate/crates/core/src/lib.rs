//! Evaluation workbench for prompt-driven code clone detection.
//!
//! The crate is organised along the pipeline:
//!
//! * [`corpus`] ingests clone datasets, strips comments and samples balanced benchmarks.
//! * [`prompt`] renders the detection, confidence, rationale and lesson-augmented prompts.
//! * [`gateway`] talks to model backends, with a persistent cache and a replay mode.
//! * [`verdict`] turns raw model text into verdicts and confidence scores.
//! * [`bias`] filters confident mistakes and assigns their rationales to mistake categories.
//! * [`stats`] computes confusion metrics, F1 deltas, significance tests and agreement.
//! * [`pipeline`] ties everything together into reproducible runs and lesson ablations.
//! * [`demo`] builds replay fixtures and a small synthetic corpus for offline runs.

pub mod bias;
pub mod corpus;
pub mod demo;
pub mod digest;
pub mod gateway;
pub mod pipeline;
pub mod prompt;
pub mod report;
pub mod stats;
pub mod verdict;

pub use bias::{MistakeCategory, PrevalenceReport, Taxonomy};
pub use corpus::{ClonePair, CodeSnippet, Label, Language, Origin, SamplingSpec, TranslationRecord};
pub use gateway::{BackendConfig, BackendMode, Exchange, Gateway};
pub use pipeline::{Experiment, ExperimentConfig, RunManifest};
pub use prompt::{Lesson, LessonSet, RenderedPrompt, TemplateId};
pub use report::{AblationReport, EvalReport};
pub use stats::{ConfusionCounts, MetricSet, ShiftCounts};
pub use verdict::VerdictRecord;
