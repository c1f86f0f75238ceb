//! Clone datasets: snippet and pair types, avatar conversion, comment
//! stripping, sample sizing and balanced benchmark construction.

mod avatar;
pub mod io;
mod sampling;
mod strip;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use avatar::{convert_avatar, AvatarConversion, ConversionWarning};
pub use sampling::{build_benchmark, required_sample_size, sample_uniform, z_score, SamplingSpec};
pub use strip::{strip_comments, strip_source};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("input contains no records")]
    EmptyInput,
    #[error("code snippet text is empty")]
    EmptySnippet,
    #[error("line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("unterminated block comment starting at byte {offset}")]
    UnterminatedBlockComment { offset: usize },
    #[error("unterminated string literal starting at byte {offset}")]
    UnterminatedStringLiteral { offset: usize },
    #[error("benchmark size {0} is not even")]
    OddBenchmarkSize(usize),
    #[error("not enough {label} pairs: need {required}, have {available}")]
    InsufficientClassCount {
        label: Label,
        required: usize,
        available: usize,
    },
    #[error("record {record} (idx {idx}) has only {available} cross-theme partners, {requested} requested")]
    InsufficientNegatives {
        record: usize,
        idx: String,
        available: usize,
        requested: usize,
    },
    #[error("sample of {requested} exceeds population of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("invalid sampling spec: {0}")]
    InvalidSamplingSpec(String),
    #[error("duplicate pair id {0}")]
    DuplicatePairId(String),
    #[error("unknown language {0:?}")]
    UnknownLanguage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Language {
    Java,
    Python,
}

impl Language {
    /// Capitalised English name, as it appears in prompts.
    pub fn name(self) -> &'static str {
        match self {
            Language::Java => "Java",
            Language::Python => "Python",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Language {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "java" => Ok(Language::Java),
            "python" | "py" => Ok(Language::Python),
            _ => Err(CorpusError::UnknownLanguage(s.to_string())),
        }
    }
}

/// Ground-truth (or predicted) clone label. `Clone` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Clone,
    NotClone,
}

impl Label {
    /// The answer word the detection prompt asks for.
    pub fn answer(self) -> &'static str {
        match self {
            Label::Clone => "Yes",
            Label::NotClone => "No",
        }
    }

    pub fn as_bit(self) -> u8 {
        match self {
            Label::Clone => 1,
            Label::NotClone => 0,
        }
    }

    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            1 => Some(Label::Clone),
            0 => Some(Label::NotClone),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Clone => f.write_str("Clone"),
            Label::NotClone => f.write_str("NotClone"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Avatar,
    #[serde(rename = "poolc")]
    PoolC,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSnippet {
    text: String,
    language: Language,
    comments_stripped: bool,
}

impl CodeSnippet {
    pub fn new(text: impl Into<String>, language: Language) -> Result<Self, CorpusError> {
        let text = text.into();
        if text.is_empty() {
            return Err(CorpusError::EmptySnippet);
        }
        Ok(Self {
            text,
            language,
            comments_stripped: false,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn language(&self) -> Language {
        self.language
    }

    pub fn comments_stripped(&self) -> bool {
        self.comments_stripped
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClonePair {
    pub id: String,
    pub a: CodeSnippet,
    pub b: CodeSnippet,
    pub label: Label,
    pub origin: Origin,
}

impl ClonePair {
    /// Both snippets with comments removed. The id, label and origin are kept.
    pub fn without_comments(&self) -> Result<ClonePair, CorpusError> {
        Ok(ClonePair {
            id: self.id.clone(),
            a: strip_comments(&self.a)?,
            b: strip_comments(&self.b)?,
            label: self.label,
            origin: self.origin,
        })
    }
}

/// One line of an avatar translation file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationRecord {
    pub java: String,
    pub python: String,
    pub idx: String,
}

/// Fails on the first repeated id.
pub fn check_unique_ids(pairs: &[ClonePair]) -> Result<(), CorpusError> {
    let mut seen = std::collections::HashSet::with_capacity(pairs.len());
    for pair in pairs {
        if !seen.insert(pair.id.as_str()) {
            return Err(CorpusError::DuplicatePairId(pair.id.clone()));
        }
    }
    Ok(())
}
