//! Prompt templates, prompt bias lessons and rendering.
//!
//! Templates ship as plain-text assets under `assets/templates/`; each is
//! the exact text of its prompt with `<placeholder>` markers. Rendering is a
//! single left-to-right pass over the template, so code that happens to
//! contain a marker such as `<code2>` is inserted verbatim and never expanded.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ClonePair, Label};
use crate::digest::{json_hash, sha256_hex};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("lesson id {0} appears more than once")]
    DuplicateLessonId(u8),
    #[error("lesson {id}: {reason}")]
    InvalidLesson { id: u8, reason: String },
    #[error("prediction {0} equals the gold label; rationales are only requested for mistakes")]
    NotAMistake(Label),
    #[error("unknown lesson id {0}")]
    UnknownLesson(u8),
    #[error("prompt for pair {pair_id} is {len} chars, over the limit of {max}")]
    PromptTooLong { pair_id: String, len: usize, max: usize },
    #[error("cannot read lesson file: {0}")]
    LessonFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Default,
    Confidence,
    Rationale,
    LessonAugmented,
}

impl TemplateId {
    pub const ALL: [TemplateId; 4] = [
        TemplateId::Default,
        TemplateId::Confidence,
        TemplateId::Rationale,
        TemplateId::LessonAugmented,
    ];

    /// Raw template text, exactly as shipped.
    pub fn body(self) -> &'static str {
        fn trim(s: &'static str) -> &'static str {
            s.strip_suffix('\n').unwrap_or(s)
        }
        match self {
            TemplateId::Default => trim(include_str!("../assets/templates/default.txt")),
            TemplateId::Confidence => trim(include_str!("../assets/templates/confidence.txt")),
            TemplateId::Rationale => trim(include_str!("../assets/templates/rationale.txt")),
            TemplateId::LessonAugmented => trim(include_str!("../assets/templates/lesson_augmented.txt")),
        }
    }

    pub fn placeholders(self) -> &'static [Placeholder] {
        use Placeholder::*;
        match self {
            TemplateId::Default => &[Language1, Language2, Code1, Code2],
            TemplateId::Confidence => &[Language1, Language2, Code1, Code2, Prediction],
            TemplateId::Rationale => &[Language1, Language2, Code1, Code2, ModelPrediction, Label],
            TemplateId::LessonAugmented => &[Language1, Language2, Lessons, Code1, Code2],
        }
    }

    pub fn checksum(self) -> String {
        sha256_hex(self.body())
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            TemplateId::Default => "default",
            TemplateId::Confidence => "confidence",
            TemplateId::Rationale => "rationale",
            TemplateId::LessonAugmented => "lesson_augmented",
        };
        f.write_str(name)
    }
}

/// Checksums of every shipped template, keyed by template id.
pub fn template_checksums() -> BTreeMap<TemplateId, String> {
    TemplateId::ALL.iter().map(|&id| (id, id.checksum())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placeholder {
    Language1,
    Language2,
    Code1,
    Code2,
    Prediction,
    ModelPrediction,
    Label,
    Lessons,
}

impl Placeholder {
    const ALL: [Placeholder; 8] = [
        Placeholder::Language1,
        Placeholder::Language2,
        Placeholder::Code1,
        Placeholder::Code2,
        Placeholder::Prediction,
        Placeholder::ModelPrediction,
        Placeholder::Label,
        Placeholder::Lessons,
    ];

    pub fn marker(self) -> &'static str {
        match self {
            Placeholder::Language1 => "<language1>",
            Placeholder::Language2 => "<language2>",
            Placeholder::Code1 => "<code1>",
            Placeholder::Code2 => "<code2>",
            Placeholder::Prediction => "<prediction>",
            Placeholder::ModelPrediction => "<model_prediction>",
            Placeholder::Label => "<label>",
            Placeholder::Lessons => "<lessons>",
        }
    }
}

/// One corrective sentence injected into the detection prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lesson {
    pub id: u8,
    pub text: String,
}

impl Lesson {
    fn validate(&self) -> Result<(), PromptError> {
        let invalid = |reason: &str| PromptError::InvalidLesson {
            id: self.id,
            reason: reason.to_string(),
        };
        if self.id == 0 {
            return Err(invalid("ids start at 1"));
        }
        let text = self.text.trim();
        if text.is_empty() {
            return Err(invalid("text is empty"));
        }
        if !text.ends_with('.') {
            return Err(invalid("text must end with a period"));
        }
        if text != self.text {
            return Err(invalid("text has surrounding whitespace"));
        }
        Ok(())
    }
}

/// A versioned lesson library.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LessonSet {
    #[serde(rename = "lesson")]
    lessons: Vec<Lesson>,
}

impl LessonSet {
    pub fn new(mut lessons: Vec<Lesson>) -> Result<Self, PromptError> {
        lessons.sort_by_key(|l| l.id);
        for pair in lessons.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(PromptError::DuplicateLessonId(pair[0].id));
            }
        }
        for lesson in &lessons {
            lesson.validate()?;
        }
        Ok(Self { lessons })
    }

    /// The eight shipped lessons.
    pub fn standard() -> Self {
        Self::from_toml(include_str!("../assets/lessons.toml")).expect("shipped lessons are valid")
    }

    pub fn from_toml(text: &str) -> Result<Self, PromptError> {
        let raw: LessonSet = toml::from_str(text).map_err(|e| PromptError::LessonFile(e.to_string()))?;
        Self::new(raw.lessons)
    }

    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let raw: LessonSet = serde_json::from_str(text).map_err(|e| PromptError::LessonFile(e.to_string()))?;
        Self::new(raw.lessons)
    }

    /// Reads `.json` files as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|e| PromptError::LessonFile(format!("{}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn lessons(&self) -> &[Lesson] {
        &self.lessons
    }

    pub fn ids(&self) -> Vec<u8> {
        self.lessons.iter().map(|l| l.id).collect()
    }

    pub fn get(&self, id: u8) -> Option<&Lesson> {
        self.lessons.iter().find(|l| l.id == id)
    }

    /// Lessons for `ids`, in the order given.
    pub fn select(&self, ids: &[u8]) -> Result<Vec<Lesson>, PromptError> {
        ids.iter()
            .map(|&id| self.get(id).cloned().ok_or(PromptError::UnknownLesson(id)))
            .collect()
    }

    /// Content hash identifying this version of the library.
    pub fn version_hash(&self) -> String {
        json_hash(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("lesson sets serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub pair_id: String,
    pub template_id: TemplateId,
    pub lesson_ids: Vec<u8>,
}

fn render(template: TemplateId, values: &[(Placeholder, &str)]) -> String {
    let body = template.body();
    let mut out = String::with_capacity(body.len() + values.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = body;
    while let Some(pos) = rest.find('<') {
        out.push_str(&rest[..pos]);
        rest = &rest[pos..];
        let hit = Placeholder::ALL
            .iter()
            .find(|p| rest.starts_with(p.marker()))
            .and_then(|p| values.iter().find(|(q, _)| q == p).map(|(_, v)| (p, v)));
        match hit {
            Some((p, value)) => {
                out.push_str(value);
                rest = &rest[p.marker().len()..];
            }
            None => {
                out.push('<');
                rest = &rest[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

fn pair_values(pair: &ClonePair) -> [(Placeholder, &str); 4] {
    [
        (Placeholder::Language1, pair.a.language().name()),
        (Placeholder::Language2, pair.b.language().name()),
        (Placeholder::Code1, pair.a.text()),
        (Placeholder::Code2, pair.b.text()),
    ]
}

pub fn render_default(pair: &ClonePair) -> RenderedPrompt {
    RenderedPrompt {
        text: render(TemplateId::Default, &pair_values(pair)),
        pair_id: pair.id.clone(),
        template_id: TemplateId::Default,
        lesson_ids: Vec::new(),
    }
}

/// Detection prompt with lessons inserted after the language sentence, in
/// ascending id order, each followed by one space. An empty list yields the
/// default prompt.
pub fn render_with_lessons(pair: &ClonePair, lessons: &[Lesson]) -> Result<RenderedPrompt, PromptError> {
    let mut sorted: Vec<&Lesson> = lessons.iter().collect();
    sorted.sort_by_key(|l| l.id);
    let mut seen = BTreeSet::new();
    for lesson in &sorted {
        if !seen.insert(lesson.id) {
            return Err(PromptError::DuplicateLessonId(lesson.id));
        }
    }
    if sorted.is_empty() {
        return Ok(render_default(pair));
    }
    let block: String = sorted.iter().map(|l| format!("{} ", l.text)).collect();
    let mut values = pair_values(pair).to_vec();
    values.push((Placeholder::Lessons, &block));
    Ok(RenderedPrompt {
        text: render(TemplateId::LessonAugmented, &values),
        pair_id: pair.id.clone(),
        template_id: TemplateId::LessonAugmented,
        lesson_ids: sorted.iter().map(|l| l.id).collect(),
    })
}

pub fn render_confidence(pair: &ClonePair, prediction: Label) -> RenderedPrompt {
    let mut values = pair_values(pair).to_vec();
    values.push((Placeholder::Prediction, prediction.answer()));
    RenderedPrompt {
        text: render(TemplateId::Confidence, &values),
        pair_id: pair.id.clone(),
        template_id: TemplateId::Confidence,
        lesson_ids: Vec::new(),
    }
}

pub fn render_rationale(pair: &ClonePair, prediction: Label, gold: Label) -> Result<RenderedPrompt, PromptError> {
    if prediction == gold {
        return Err(PromptError::NotAMistake(gold));
    }
    let mut values = pair_values(pair).to_vec();
    values.push((Placeholder::ModelPrediction, prediction.answer()));
    values.push((Placeholder::Label, gold.answer()));
    Ok(RenderedPrompt {
        text: render(TemplateId::Rationale, &values),
        pair_id: pair.id.clone(),
        template_id: TemplateId::Rationale,
        lesson_ids: Vec::new(),
    })
}

/// Optional budget guard on rendered prompt length (in chars). Off by default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptGuard {
    pub max_chars: Option<usize>,
}

impl PromptGuard {
    pub fn check(&self, prompt: &RenderedPrompt) -> Result<(), PromptError> {
        match self.max_chars {
            Some(max) => {
                let len = prompt.text.chars().count();
                if len > max {
                    Err(PromptError::PromptTooLong {
                        pair_id: prompt.pair_id.clone(),
                        len,
                        max,
                    })
                } else {
                    Ok(())
                }
            }
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CodeSnippet, Language, Origin};
    use proptest::prelude::*;

    fn pair(code_a: &str, code_b: &str) -> ClonePair {
        ClonePair {
            id: "p1".into(),
            a: CodeSnippet::new(code_a, Language::Java).unwrap(),
            b: CodeSnippet::new(code_b, Language::Python).unwrap(),
            label: Label::Clone,
            origin: Origin::Avatar,
        }
    }

    #[test]
    fn templates_contain_exactly_their_placeholders() {
        for id in TemplateId::ALL {
            let body = id.body();
            for p in Placeholder::ALL {
                let expected = id.placeholders().contains(&p);
                assert_eq!(body.contains(p.marker()), expected, "{id} {:?}", p);
            }
            assert!(!body.ends_with('\n'));
        }
    }

    #[test]
    fn default_prompt_slots() {
        let r = render_default(&pair("int a;", "a = 1"));
        assert!(r.text.contains("written in Java, and the second code snippet is written in Python."));
        assert!(r.text.contains("Code Snippet1: int a;. Code Snippet2: a = 1."));
        assert_eq!(r, render_default(&pair("int a;", "a = 1")));
        assert_eq!(r.template_id, TemplateId::Default);
    }

    #[test]
    fn code_containing_markers_is_not_expanded() {
        let r = render_default(&pair("s = \"<code2>\";", "x = '<language1>'"));
        assert!(r.text.contains("Code Snippet1: s = \"<code2>\";. Code Snippet2: x = '<language1>'."));
    }

    #[test]
    fn single_lesson_sits_before_snippets() {
        let lessons = LessonSet::standard().select(&[7]).unwrap();
        let r = render_with_lessons(&pair("a", "b"), &lessons).unwrap();
        let lesson = &lessons[0].text;
        assert_eq!(r.text.matches(lesson.as_str()).count(), 1);
        assert!(r.text.contains(&format!("written in Python. {lesson} Here are the two code snippets")));
        assert_eq!(r.lesson_ids, vec![7]);
    }

    #[test]
    fn empty_lessons_equal_default() {
        let p = pair("a", "b");
        assert_eq!(render_with_lessons(&p, &[]).unwrap(), render_default(&p));
    }

    #[test]
    fn lessons_render_in_ascending_order() {
        let set = LessonSet::standard();
        let r = render_with_lessons(&pair("a", "b"), &set.select(&[3, 1]).unwrap()).unwrap();
        let one = r.text.find(&set.get(1).unwrap().text).unwrap();
        let three = r.text.find(&set.get(3).unwrap().text).unwrap();
        assert!(one < three);
        assert_eq!(r.lesson_ids, vec![1, 3]);
    }

    #[test]
    fn duplicate_lesson_ids_rejected() {
        let set = LessonSet::standard();
        let err = render_with_lessons(&pair("a", "b"), &set.select(&[2, 2]).unwrap()).unwrap_err();
        assert_eq!(err, PromptError::DuplicateLessonId(2));
        let dup = vec![set.get(1).unwrap().clone(), set.get(1).unwrap().clone()];
        assert_eq!(LessonSet::new(dup).unwrap_err(), PromptError::DuplicateLessonId(1));
    }

    #[test]
    fn confidence_answer_mapping() {
        let p = pair("a", "b");
        assert!(render_confidence(&p, Label::Clone).text.contains("documented your answer as Yes."));
        assert!(render_confidence(&p, Label::NotClone).text.contains("documented your answer as No."));
    }

    #[test]
    fn rationale_answer_mapping() {
        let p = pair("a", "b");
        let r = render_rationale(&p, Label::NotClone, Label::Clone).unwrap();
        assert!(r.text.contains("Your answer was No. However, the correct answer is Yes."));
        assert_eq!(
            render_rationale(&p, Label::Clone, Label::Clone).unwrap_err(),
            PromptError::NotAMistake(Label::Clone)
        );
    }

    #[test]
    fn rationale_embeds_default_verbatim() {
        let p = pair("int x;", "x = 0");
        let default = render_default(&p).text;
        let r = render_rationale(&p, Label::Clone, Label::NotClone).unwrap().text;
        assert!(r.starts_with(&format!("\"{default}\" ")));
    }

    #[test]
    fn confidence_embeds_default_modulo_figure_punctuation() {
        let p = pair("int x;", "x = 0");
        let default = render_default(&p).text;
        let c = render_confidence(&p, Label::Clone).text.replacen("answer Yes; otherwise", "answer Yes, otherwise", 1);
        assert!(c.starts_with(&format!("\"{default}\" I have documented")));
    }

    #[test]
    fn standard_library_has_eight_lessons() {
        let set = LessonSet::standard();
        assert_eq!(set.ids(), (1..=8).collect::<Vec<u8>>());
        assert!(set.lessons().iter().all(|l| l.text.ends_with('.')));
        assert_eq!(set.version_hash(), LessonSet::from_json(&set.to_json()).unwrap().version_hash());
    }

    #[test]
    fn lesson_validation() {
        let bad = |text: &str| LessonSet::new(vec![Lesson { id: 1, text: text.into() }]);
        assert!(bad("").is_err());
        assert!(bad("No period").is_err());
        assert!(bad(" Padded.").is_err());
        assert!(LessonSet::new(vec![Lesson { id: 0, text: "Zero.".into() }]).is_err());
        assert!(bad("Fine.").is_ok());
    }

    #[test]
    fn guard_rejects_long_prompts() {
        let r = render_default(&pair("a", "b"));
        assert!(PromptGuard::default().check(&r).is_ok());
        let guard = PromptGuard { max_chars: Some(10) };
        assert!(matches!(guard.check(&r), Err(PromptError::PromptTooLong { max: 10, .. })));
    }

    proptest! {
        #[test]
        fn rendering_leaves_no_markers(a in "[a-zA-Z0-9 ;=(){}\n]{1,40}", b in "[a-zA-Z0-9 ;=(){}\n]{1,40}",
                                       ids in prop::collection::btree_set(1u8..=8, 0..8)) {
            let p = pair(&a, &b);
            let set = LessonSet::standard();
            let ids: Vec<u8> = ids.into_iter().collect();
            let texts = [
                render_default(&p).text,
                render_confidence(&p, Label::NotClone).text,
                render_rationale(&p, Label::NotClone, Label::Clone).unwrap().text,
                render_with_lessons(&p, &set.select(&ids).unwrap()).unwrap().text,
            ];
            for t in &texts {
                for m in Placeholder::ALL {
                    prop_assert!(!t.contains(m.marker()));
                }
            }
        }

        #[test]
        fn lesson_order_is_irrelevant(ids in Just((1u8..=8).collect::<Vec<_>>()).prop_shuffle(), split in 0usize..8) {
            let set = LessonSet::standard();
            let p = pair("int a;", "a = 1");
            let (left, right) = ids.split_at(split);
            let mut joined = set.select(right).unwrap();
            joined.extend(set.select(left).unwrap());
            let mut sorted_ids: Vec<u8> = ids.clone();
            sorted_ids.sort();
            let expected = render_with_lessons(&p, &set.select(&sorted_ids).unwrap()).unwrap();
            prop_assert_eq!(render_with_lessons(&p, &joined).unwrap(), expected);
        }
    }
}
