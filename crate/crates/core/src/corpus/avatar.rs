//! Cross-language clone pairs from Java/Python translation records.
//!
//! Two snippets are clones iff they come from records with the same theme
//! (`idx`). Each record contributes its own Java/Python pair as a positive;
//! negatives pair a record's Java with Python from records of other themes.

use std::collections::HashMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ClonePair, CodeSnippet, CorpusError, Label, Language, Origin, TranslationRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum ConversionWarning {
    /// Two records share an `idx` but carry different code.
    DuplicateIdxWithDifferingCode {
        idx: String,
        first_record: usize,
        record: usize,
    },
}

#[derive(Debug, Clone)]
pub struct AvatarConversion {
    pub pairs: Vec<ClonePair>,
    pub warnings: Vec<ConversionWarning>,
}

impl AvatarConversion {
    pub fn positives(&self) -> usize {
        self.pairs.iter().filter(|p| p.label == Label::Clone).count()
    }
}

/// Builds one positive per record followed by `negatives_per_positive`
/// cross-theme negatives per record, drawn without replacement under `seed`.
pub fn convert_avatar(
    records: &[TranslationRecord],
    negatives_per_positive: usize,
    seed: u64,
) -> Result<AvatarConversion, CorpusError> {
    if records.is_empty() {
        return Err(CorpusError::EmptyInput);
    }

    let mut warnings = Vec::new();
    let mut first_by_idx: HashMap<&str, usize> = HashMap::new();
    let mut theme_size: HashMap<&str, usize> = HashMap::new();
    for (i, rec) in records.iter().enumerate() {
        if rec.java.is_empty() || rec.python.is_empty() || rec.idx.is_empty() {
            return Err(CorpusError::MalformedRecord {
                line: i + 1,
                message: "java, python and idx must all be non-empty".into(),
            });
        }
        *theme_size.entry(rec.idx.as_str()).or_default() += 1;
        match first_by_idx.get(rec.idx.as_str()) {
            Some(&first) => {
                let prev = &records[first];
                if prev.java != rec.java || prev.python != rec.python {
                    warnings.push(ConversionWarning::DuplicateIdxWithDifferingCode {
                        idx: rec.idx.clone(),
                        first_record: first,
                        record: i,
                    });
                }
            }
            None => {
                first_by_idx.insert(rec.idx.as_str(), i);
            }
        }
    }

    let pair = |id: String, java: &TranslationRecord, python: &TranslationRecord, label| {
        Ok::<_, CorpusError>(ClonePair {
            id,
            a: CodeSnippet::new(java.java.clone(), Language::Java)?,
            b: CodeSnippet::new(python.python.clone(), Language::Python)?,
            label,
            origin: Origin::Avatar,
        })
    };

    let mut pairs = Vec::with_capacity(records.len() * (1 + negatives_per_positive));
    for (i, rec) in records.iter().enumerate() {
        pairs.push(pair(format!("avatar-p{i}"), rec, rec, Label::Clone)?);
    }

    if negatives_per_positive > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = records.len();
        for (i, rec) in records.iter().enumerate() {
            let available = n - theme_size[rec.idx.as_str()];
            if available < negatives_per_positive {
                return Err(CorpusError::InsufficientNegatives {
                    record: i,
                    idx: rec.idx.clone(),
                    available,
                    requested: negatives_per_positive,
                });
            }
            let partners = draw_partners(records, i, negatives_per_positive, available, &mut rng);
            for j in partners {
                pairs.push(pair(format!("avatar-n{i}-{j}"), rec, &records[j], Label::NotClone)?);
            }
        }
    }

    Ok(AvatarConversion { pairs, warnings })
}

/// Distinct record indices whose theme differs from record `i`.
fn draw_partners(
    records: &[TranslationRecord],
    i: usize,
    k: usize,
    available: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let idx = records[i].idx.as_str();
    let n = records.len();
    if available * 2 >= n {
        // Most records qualify: rejection sampling avoids building the candidate list.
        let mut chosen = Vec::with_capacity(k);
        while chosen.len() < k {
            let j = rng.random_range(0..n);
            if records[j].idx != idx && !chosen.contains(&j) {
                chosen.push(j);
            }
        }
        chosen
    } else {
        let candidates: Vec<usize> = (0..n).filter(|&j| records[j].idx != idx).collect();
        index::sample(rng, candidates.len(), k)
            .into_iter()
            .map(|c| candidates[c])
            .collect()
    }
}
