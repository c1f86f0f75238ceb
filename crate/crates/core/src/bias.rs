//! Confident-mistake filtering, rationale categorisation and category
//! prevalence.
//!
//! Categorisation is a deterministic seeded-term matcher: a rationale and
//! each seed term are normalised (lowercase, punctuation to spaces, collapsed
//! whitespace) and a term matches when it occurs as a whole word or phrase.
//! A category's score is the fraction of its seed terms that match; every
//! category scoring at least the threshold is assigned, so one rationale can
//! carry several categories.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::json_hash;
use crate::verdict::VerdictRecord;

/// Minimum self-reported confidence for a mistake to count as reliable.
pub const DEFAULT_CONFIDENCE_THRESHOLD: u8 = 80;
/// Default matching threshold for category assignment.
pub const DEFAULT_TAU: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum BiasError {
    #[error("prevalence needs at least one rationale")]
    EmptyRationaleSet,
    #[error("taxonomy has no categories")]
    EmptyTaxonomy,
    #[error("category {0}: no seed terms")]
    NoSeedTerms(String),
    #[error("duplicate category {0}")]
    DuplicateCategory(String),
    #[error("assignment references unknown category {0}")]
    UnknownCategory(String),
    #[error("cannot read taxonomy: {0}")]
    TaxonomyFile(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MistakeCategory {
    pub id: String,
    pub name: String,
    pub seed_terms: Vec<String>,
    pub description: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
}

/// An immutable, content-hashed list of mistake categories.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Taxonomy {
    #[serde(rename = "category")]
    categories: Vec<MistakeCategory>,
}

impl Taxonomy {
    pub fn new(mut categories: Vec<MistakeCategory>) -> Result<Self, BiasError> {
        if categories.is_empty() {
            return Err(BiasError::EmptyTaxonomy);
        }
        let mut ids = HashSet::new();
        let mut names = HashSet::new();
        for cat in &mut categories {
            cat.seed_terms = cat
                .seed_terms
                .iter()
                .map(|t| normalize(t))
                .filter(|t| !t.is_empty())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if cat.seed_terms.is_empty() {
                return Err(BiasError::NoSeedTerms(cat.id.clone()));
            }
            if !ids.insert(cat.id.clone()) {
                return Err(BiasError::DuplicateCategory(cat.id.clone()));
            }
            if !names.insert(cat.name.to_lowercase()) {
                return Err(BiasError::DuplicateCategory(cat.name.clone()));
            }
        }
        Ok(Self { categories })
    }

    pub fn standard() -> Self {
        Self::from_toml(include_str!("../assets/taxonomy.toml")).expect("shipped taxonomy is valid")
    }

    pub fn from_toml(text: &str) -> Result<Self, BiasError> {
        let raw: Taxonomy = toml::from_str(text).map_err(|e| BiasError::TaxonomyFile(e.to_string()))?;
        Self::new(raw.categories)
    }

    pub fn from_json(text: &str) -> Result<Self, BiasError> {
        let raw: Taxonomy = serde_json::from_str(text).map_err(|e| BiasError::TaxonomyFile(e.to_string()))?;
        Self::new(raw.categories)
    }

    pub fn load(path: &Path) -> Result<Self, BiasError> {
        let text = std::fs::read_to_string(path).map_err(|e| BiasError::TaxonomyFile(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn categories(&self) -> &[MistakeCategory] {
        &self.categories
    }

    pub fn version_hash(&self) -> String {
        json_hash(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("taxonomies serialize")
    }
}

/// Lowercase, map every non-alphanumeric char to a space and collapse runs.
fn normalize(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Fraction of the category's seed terms found in `rationale`.
pub fn score(rationale: &str, category: &MistakeCategory) -> f64 {
    if category.seed_terms.is_empty() {
        return 0.0;
    }
    let hay = format!(" {} ", normalize(rationale));
    let hits = category
        .seed_terms
        .iter()
        .filter(|term| {
            let term = normalize(term);
            !term.is_empty() && hay.contains(&format!(" {term} "))
        })
        .count();
    hits as f64 / category.seed_terms.len() as f64
}

/// Ids of every category whose score reaches `tau`. May be empty.
pub fn assign_categories(rationale: &str, taxonomy: &Taxonomy, tau: f64) -> BTreeSet<String> {
    taxonomy
        .categories
        .iter()
        .filter(|c| score(rationale, c) >= tau)
        .map(|c| c.id.clone())
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReliableMistakes {
    pub records: Vec<VerdictRecord>,
    /// Mistakes excluded because no confidence was recorded for them.
    pub missing_confidence: usize,
}

/// Mistakes whose confidence reaches `threshold`.
pub fn filter_reliable_mistakes(records: &[VerdictRecord], threshold: u8) -> ReliableMistakes {
    let mut out = ReliableMistakes::default();
    for rec in records.iter().filter(|r| !r.is_correct()) {
        match rec.confidence {
            Some(c) if c >= threshold => out.records.push(rec.clone()),
            Some(_) => {}
            None => out.missing_confidence += 1,
        }
    }
    out
}

/// One line of the assignment log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub pair_id: String,
    pub rationale: String,
    pub categories: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryPrevalence {
    pub id: String,
    pub name: String,
    pub count: u64,
    pub prevalence: f64,
}

/// Share of rationales assigned to each category. Multi-label, so the
/// prevalences can add up to more than 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceReport {
    pub taxonomy_version: String,
    pub threshold: f64,
    pub total_rationales: u64,
    pub uncategorized: u64,
    pub categories: Vec<CategoryPrevalence>,
}

impl PrevalenceReport {
    pub fn get(&self, id: &str) -> Option<&CategoryPrevalence> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn prevalence_sum(&self) -> f64 {
        self.categories.iter().map(|c| c.prevalence).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Aligned plain-text table, most prevalent first.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<&CategoryPrevalence> = self.categories.iter().collect();
        rows.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.id.cmp(&b.id)));
        let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(8).max(8);
        let mut out = format!("{:<width$}  {:>6}  {:>9}\n", "Category", "Count", "Frequency");
        for r in rows {
            out.push_str(&format!("{:<width$}  {:>6}  {:>8.2}%\n", r.name, r.count, r.prevalence * 100.0));
        }
        out.push_str(&format!(
            "{} rationales, {} uncategorized, threshold {}\n",
            self.total_rationales, self.uncategorized, self.threshold
        ));
        out
    }
}

/// `count / total_rationales` for every category, folded from the assignment log.
pub fn prevalence(assignments: &[Assignment], taxonomy: &Taxonomy, tau: f64) -> Result<PrevalenceReport, BiasError> {
    if assignments.is_empty() {
        return Err(BiasError::EmptyRationaleSet);
    }
    let mut counts: BTreeMap<&str, u64> = taxonomy.categories.iter().map(|c| (c.id.as_str(), 0)).collect();
    let mut uncategorized = 0;
    for a in assignments {
        if a.categories.is_empty() {
            uncategorized += 1;
        }
        for id in &a.categories {
            *counts.get_mut(id.as_str()).ok_or_else(|| BiasError::UnknownCategory(id.clone()))? += 1;
        }
    }
    let total = assignments.len() as u64;
    Ok(PrevalenceReport {
        taxonomy_version: taxonomy.version_hash(),
        threshold: tau,
        total_rationales: total,
        uncategorized,
        categories: taxonomy
            .categories
            .iter()
            .map(|c| {
                let count = counts[c.id.as_str()];
                CategoryPrevalence {
                    id: c.id.clone(),
                    name: c.name.clone(),
                    count,
                    prevalence: count as f64 / total as f64,
                }
            })
            .collect(),
    })
}

/// A seeded subset drawn for manual review, with the parameters that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewSample {
    pub seed: u64,
    pub requested: usize,
    pub population: usize,
    pub pair_ids: Vec<String>,
}

pub fn sample_for_review(records: &[VerdictRecord], n: usize, seed: u64) -> ReviewSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let take = n.min(records.len());
    let mut picked = index::sample(&mut rng, records.len(), take).into_vec();
    picked.sort_unstable();
    ReviewSample {
        seed,
        requested: n,
        population: records.len(),
        pair_ids: picked.into_iter().map(|i| records[i].pair_id.clone()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Label;
    use proptest::prelude::*;

    fn cat(id: &str, terms: &[&str]) -> MistakeCategory {
        MistakeCategory {
            id: id.into(),
            name: format!("Category {id}"),
            seed_terms: terms.iter().map(|t| t.to_string()).collect(),
            description: String::new(),
            aliases: vec![],
        }
    }

    fn verdict(id: &str, predicted: Label, gold: Label, confidence: Option<u8>) -> VerdictRecord {
        VerdictRecord {
            pair_id: id.into(),
            predicted,
            gold,
            confidence,
            raw_response: String::new(),
            rationale: None,
        }
    }

    #[test]
    fn reliability_gate() {
        let recs = vec![
            verdict("a", Label::NotClone, Label::Clone, Some(0)),
            verdict("b", Label::NotClone, Label::Clone, Some(80)),
            verdict("c", Label::Clone, Label::Clone, Some(100)),
            verdict("d", Label::Clone, Label::NotClone, None),
            verdict("e", Label::Clone, Label::NotClone, Some(79)),
        ];
        let out = filter_reliable_mistakes(&recs, DEFAULT_CONFIDENCE_THRESHOLD);
        assert_eq!(out.records.iter().map(|r| r.pair_id.as_str()).collect::<Vec<_>>(), vec!["b"]);
        assert_eq!(out.missing_confidence, 1);
    }

    #[test]
    fn nomenclature_example_scores_by_whole_phrase() {
        let nomenclature = cat("api", &["function name", "api", "library", "method name", "nomenclature"]);
        let rationale = "the two functions have different names for the same API";
        // Only "api" occurs as a whole word; "functions ... names" is not the
        // phrase "function name".
        assert_eq!(score(rationale, &nomenclature), 1.0 / 5.0);
        let taxonomy = Taxonomy::new(vec![nomenclature]).unwrap();
        assert_eq!(assign_categories(rationale, &taxonomy, DEFAULT_TAU), BTreeSet::from(["api".to_string()]));
    }

    #[test]
    fn empty_rationale_gets_nothing() {
        assert!(assign_categories("", &Taxonomy::standard(), DEFAULT_TAU).is_empty());
    }

    #[test]
    fn multi_label_assignment() {
        let taxonomy = Taxonomy::new(vec![cat("x", &["list", "set"]), cat("y", &["variable", "names"]), cat("z", &["theme"])]).unwrap();
        let got = assign_categories("One uses a list, the other uses different variable names.", &taxonomy, 0.2);
        assert_eq!(got, BTreeSet::from(["x".to_string(), "y".to_string()]));
    }

    #[test]
    fn standard_taxonomy_examples() {
        let t = Taxonomy::standard();
        assert_eq!(t.categories().len(), 8);
        let got = assign_categories(
            "The functions call different library API methods, so the function name and names differ.",
            &t,
            DEFAULT_TAU,
        );
        assert!(got.contains("api_nomenclature"), "{got:?}");
        let got = assign_categories("The code snippets are not identical; an exact copy is required for a clone.", &t, DEFAULT_TAU);
        assert!(got.contains("clone_definition"), "{got:?}");
        let varied = t.categories().iter().find(|c| c.id == "varied_approaches").unwrap();
        assert_eq!(varied.aliases, vec!["Overemphasis On Textual Similarity".to_string()]);
    }

    #[test]
    fn taxonomy_validation() {
        assert_eq!(Taxonomy::new(vec![]).unwrap_err(), BiasError::EmptyTaxonomy);
        assert_eq!(Taxonomy::new(vec![cat("a", &["  ", "!!"])]).unwrap_err(), BiasError::NoSeedTerms("a".into()));
        assert!(matches!(Taxonomy::new(vec![cat("a", &["x"]), cat("a", &["y"])]), Err(BiasError::DuplicateCategory(_))));
        let t = Taxonomy::new(vec![cat("a", &["Data-Structure", "data structure", "LIST"])]).unwrap();
        assert_eq!(t.categories()[0].seed_terms, vec!["data structure".to_string(), "list".to_string()]);
    }

    #[test]
    fn taxonomy_hash_tracks_content() {
        let t = Taxonomy::standard();
        assert_eq!(Taxonomy::from_json(&t.to_json()).unwrap(), t);
        let mut cats = t.categories().to_vec();
        cats[0].seed_terms.push("verbatim".into());
        assert_ne!(Taxonomy::new(cats).unwrap().version_hash(), t.version_hash());
    }

    fn assignment(i: usize, cats: &[&str]) -> Assignment {
        Assignment {
            pair_id: format!("p{i}"),
            rationale: format!("r{i}"),
            categories: cats.iter().map(|c| c.to_string()).collect(),
        }
    }

    #[test]
    fn prevalence_arithmetic() {
        let t = Taxonomy::new(vec![cat("x", &["a"]), cat("y", &["b"])]).unwrap();
        let log: Vec<_> = (0..20).map(|i| assignment(i, if i < 5 { &["x"] } else { &[] })).collect();
        let r = prevalence(&log, &t, 0.2).unwrap();
        assert_eq!(r.get("x").unwrap().count, 5);
        assert_eq!(r.get("x").unwrap().prevalence, 0.25);
        assert_eq!(r.uncategorized, 15);

        let log: Vec<_> = (0..10).map(|i| assignment(i, &["x", "y"])).collect();
        let r = prevalence(&log, &t, 0.2).unwrap();
        assert_eq!(r.get("x").unwrap().prevalence, 1.0);
        assert_eq!(r.get("y").unwrap().prevalence, 1.0);
        assert_eq!(r.prevalence_sum(), 2.0);
        assert_eq!(PrevalenceReport::from_json(&r.to_json()).unwrap(), r);

        assert_eq!(prevalence(&[], &t, 0.2).unwrap_err(), BiasError::EmptyRationaleSet);
        assert_eq!(
            prevalence(&[assignment(0, &["nope"])], &t, 0.2).unwrap_err(),
            BiasError::UnknownCategory("nope".into())
        );
    }

    #[test]
    fn review_sample_is_seeded() {
        let recs: Vec<_> = (0..50).map(|i| verdict(&format!("p{i:02}"), Label::Clone, Label::NotClone, Some(90))).collect();
        let a = sample_for_review(&recs, 10, 3);
        assert_eq!(a, sample_for_review(&recs, 10, 3));
        assert_eq!(a.pair_ids.len(), 10);
        assert_eq!(sample_for_review(&recs[..4], 10, 3).pair_ids.len(), 4);
    }

    proptest! {
        #[test]
        fn scoring_is_case_insensitive(s in "[A-Za-z ,.]{0,60}") {
            for c in Taxonomy::standard().categories() {
                prop_assert_eq!(score(&s, c), score(&s.to_lowercase(), c));
            }
        }

        #[test]
        fn filter_output_is_reliable_subset(rows in prop::collection::vec((any::<bool>(), any::<bool>(), prop::option::of(0u8..=100)), 0..40), threshold in 0u8..=100) {
            let label = |b: bool| if b { Label::Clone } else { Label::NotClone };
            let recs: Vec<_> = rows.iter().enumerate().map(|(i, &(p, g, c))| verdict(&i.to_string(), label(p), label(g), c)).collect();
            let out = filter_reliable_mistakes(&recs, threshold);
            for r in &out.records {
                prop_assert!(recs.contains(r));
                prop_assert!(r.predicted != r.gold && r.confidence.unwrap() >= threshold);
            }
            let expected = recs.iter().filter(|r| r.predicted != r.gold && r.confidence.is_some_and(|c| c >= threshold)).count();
            prop_assert_eq!(out.records.len(), expected);
        }
    }
}
