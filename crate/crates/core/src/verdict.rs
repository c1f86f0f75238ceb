//! Parsing raw model text into verdicts and confidence scores.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;

#[derive(Debug, Clone, Error, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictError {
    #[error("response contains neither a standalone yes nor no")]
    UnparseableVerdict,
    #[error("response contains no integer between 0 and 100")]
    UnparseableConfidence,
}

/// First standalone `yes`/`no` (case-insensitive) decides the verdict.
///
/// Tokens are maximal runs of alphanumeric characters, so surrounding
/// punctuation and markup (`**Yes**`, `No.`, `Response:Yes`) is ignored.
pub fn parse_verdict(raw: &str) -> Result<Label, VerdictError> {
    raw.split(|c: char| !c.is_alphanumeric())
        .find_map(|token| {
            if token.eq_ignore_ascii_case("yes") {
                Some(Label::Clone)
            } else if token.eq_ignore_ascii_case("no") {
                Some(Label::NotClone)
            } else {
                None
            }
        })
        .ok_or(VerdictError::UnparseableVerdict)
}

/// First integer literal within `[0, 100]`. Out-of-range integers (including
/// negative ones) are skipped, never clamped.
pub fn parse_confidence(raw: &str) -> Result<u8, VerdictError> {
    let bytes = raw.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if !bytes[i].is_ascii_digit() {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        let negative = start > 0 && bytes[start - 1] == b'-';
        let digits = raw[start..i].trim_start_matches('0');
        // Anything longer than three significant digits is out of range.
        if !negative && digits.len() <= 3 {
            let value: u16 = if digits.is_empty() { 0 } else { digits.parse().unwrap_or(u16::MAX) };
            if value <= 100 {
                return Ok(value as u8);
            }
        }
    }
    Err(VerdictError::UnparseableConfidence)
}

/// One scored instance. Serialized as a verdict-log line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub pair_id: String,
    pub predicted: Label,
    pub gold: Label,
    pub confidence: Option<u8>,
    #[serde(rename = "raw")]
    pub raw_response: String,
    pub rationale: Option<String>,
}

impl VerdictRecord {
    pub fn from_response(pair_id: impl Into<String>, gold: Label, raw: impl Into<String>) -> Result<Self, VerdictError> {
        let raw = raw.into();
        let predicted = parse_verdict(&raw)?;
        Ok(VerdictRecord {
            pair_id: pair_id.into(),
            predicted,
            gold,
            confidence: None,
            raw_response: raw,
            rationale: None,
        })
    }

    pub fn is_correct(&self) -> bool {
        self.predicted == self.gold
    }
}
