//! Offline fixtures: a replay-fixture builder, a small synthetic Java/Python
//! corpus and a scripted model that answers every prompt the pipeline can
//! issue for it.
//!
//! The scripted model decides each answer from a hash of the seed, the pair
//! id and the prompt condition, so fixtures are reproducible byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::corpus::{ClonePair, CodeSnippet, CorpusError, Label, Language, Origin};
use crate::digest::sha256_hex;
use crate::gateway::{digest, write_fixture, BackendConfig, Exchange};
use crate::pipeline::{
    CommentVariant, DatasetConfig, DatasetFormat, ExperimentConfig, MiningConfig, PromptConfig, SamplingConfig,
};
use crate::prompt::{render_confidence, render_rationale, render_with_lessons, LessonSet, PromptError};
use crate::stats::SignificanceTest;

/// Accumulates prompt/response exchanges for one model setting.
#[derive(Debug, Clone)]
pub struct FixtureBuilder {
    model_name: String,
    temperature: f64,
    entries: BTreeMap<String, Exchange>,
}

impl FixtureBuilder {
    pub fn new(model_name: impl Into<String>, temperature: f64) -> Self {
        FixtureBuilder {
            model_name: model_name.into(),
            temperature,
            entries: BTreeMap::new(),
        }
    }

    /// Records `response` for `prompt`. A later answer for the same prompt
    /// replaces the earlier one.
    pub fn add(&mut self, prompt: &str, response: impl Into<String>) -> &mut Self {
        let d = digest(&self.model_name, self.temperature, prompt);
        self.entries.insert(
            d.clone(),
            Exchange {
                prompt_digest: d,
                prompt_text: prompt.to_string(),
                response_text: response.into(),
                latency_ms: 0,
                timestamp: 0,
            },
        );
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Exchanges ordered by digest.
    pub fn exchanges(&self) -> Vec<Exchange> {
        self.entries.values().cloned().collect()
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        write_fixture(path, &self.exchanges())
    }
}

struct Task {
    java: &'static str,
    python: &'static str,
}

const TASKS: [Task; 8] = [
    Task {
        java: "// Sum of an array\nint sum(int[] xs) {\n    int total = 0;\n    for (int x : xs) total += x;\n    return total;\n}",
        python: "def total(xs):\n    # add every element\n    acc = 0\n    for x in xs:\n        acc += x\n    return acc\n",
    },
    Task {
        java: "int maxOf(int[] xs) {\n    /* assumes xs is non-empty */\n    int best = xs[0];\n    for (int x : xs) if (x > best) best = x;\n    return best;\n}",
        python: "def max_of(xs):\n    best = xs[0]  # first element\n    for x in xs[1:]:\n        if x > best:\n            best = x\n    return best\n",
    },
    Task {
        java: "String reverse(String s) {\n    // build from the end\n    return new StringBuilder(s).reverse().toString();\n}",
        python: "def reverse(s):\n    return s[::-1]  # slice backwards\n",
    },
    Task {
        java: "long factorial(int n) {\n    long r = 1;\n    for (int i = 2; i <= n; i++) r *= i;\n    return r;\n}",
        python: "def factorial(n):\n    \"\"\"Iterative factorial.\"\"\"\n    r = 1\n    for i in range(2, n + 1):\n        r *= i\n    return r\n",
    },
    Task {
        java: "int countVowels(String s) {\n    int n = 0;\n    for (char c : s.toCharArray()) if (\"aeiou\".indexOf(c) >= 0) n++; // vowels only\n    return n;\n}",
        python: "def count_vowels(s):\n    # '#' inside strings stays\n    return sum(1 for c in s if c in \"aeiou#\"[:-1])\n",
    },
    Task {
        java: "boolean isPrime(int n) {\n    if (n < 2) return false;\n    for (int d = 2; d * d <= n; d++) if (n % d == 0) return false;\n    return true;\n}",
        python: "def is_prime(n):\n    if n < 2:\n        return False\n    d = 2\n    while d * d <= n:\n        if n % d == 0:\n            return False\n        d += 1\n    return True\n",
    },
    Task {
        java: "int gcd(int a, int b) {\n    while (b != 0) { int t = a % b; a = b; b = t; } /* Euclid */\n    return a;\n}",
        python: "def gcd(a, b):\n    while b:\n        a, b = b, a % b\n    return a  # Euclid\n",
    },
    Task {
        java: "int fib(int n) {\n    int a = 0, b = 1;\n    for (int i = 0; i < n; i++) { int t = a + b; a = b; b = t; }\n    return a;\n}",
        python: "def fib(n):\n    a, b = 0, 1\n    for _ in range(n):\n        a, b = b, a + b\n    return a\n",
    },
];

/// `n` Java/Python pairs alternating clone (same task) and non-clone
/// (different tasks). Ids are `demo-0000`, `demo-0001`, ...
pub fn demo_pairs(n: usize, seed: u64) -> Vec<ClonePair> {
    (0..n)
        .map(|i| {
            let h = hash_u64(seed, &[&i.to_string(), "task"]);
            let t = (h % TASKS.len() as u64) as usize;
            let clone = i % 2 == 0;
            let other = if clone {
                t
            } else {
                (t + 1 + (h >> 8) as usize % (TASKS.len() - 1)) % TASKS.len()
            };
            ClonePair {
                id: format!("demo-{i:04}"),
                a: CodeSnippet::new(TASKS[t].java, Language::Java).expect("non-empty"),
                b: CodeSnippet::new(TASKS[other].python, Language::Python).expect("non-empty"),
                label: if clone { Label::Clone } else { Label::NotClone },
                origin: Origin::Synthetic,
            }
        })
        .collect()
}

fn hash_u64(seed: u64, parts: &[&str]) -> u64 {
    let mut text = seed.to_string();
    for p in parts {
        text.push('\u{1f}');
        text.push_str(p);
    }
    let hex = sha256_hex(text);
    u64::from_str_radix(&hex[..16], 16).expect("hex digest")
}

fn unit(seed: u64, parts: &[&str]) -> f64 {
    (hash_u64(seed, parts) >> 11) as f64 / (1u64 << 53) as f64
}

const RATIONALES: [&str; 9] = [
    "I treated the snippets as different because they are not identical and I expected an exact copy for a clone.",
    "The operators differ and the order of operations in the arithmetic expression is not the same.",
    "The variable names differ and each variable is declared and initialized in another order.",
    "One snippet stores values in a list while the other uses a set, so I judged the data structure as different.",
    "The function name and the library API calls are different, so the names suggested different behaviour.",
    "The snippets deal with a different domain and context, so the theme distracted me from the semantics.",
    "I misinterpreted what the second snippet does and wrongly assumed it returns a different output.",
    "They follow a different approach with another algorithm, and I relied on textual similarity.",
    "The code looked unrelated to me.",
];

const CONFIDENCES: [u8; 8] = [0, 30, 60, 80, 85, 90, 95, 100];

/// Error and repair rates of the scripted model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoModel {
    pub seed: u64,
    /// Chance the default prompt gets a pair wrong.
    pub base_error: f64,
    /// Chance a single lesson fixes a default mistake / breaks a correct answer.
    pub lesson_fix: f64,
    pub lesson_break: f64,
    /// Same, for all lessons together.
    pub all_fix: f64,
    pub all_break: f64,
    /// Chance a detection answer carries no yes/no at all.
    pub garble: f64,
}

impl DemoModel {
    pub fn new(seed: u64) -> Self {
        DemoModel {
            seed,
            base_error: 0.3,
            lesson_fix: 0.25,
            lesson_break: 0.04,
            all_fix: 0.6,
            all_break: 0.02,
            garble: 0.02,
        }
    }

    fn condition_key(lesson_ids: &[u8]) -> String {
        let ids: Vec<String> = lesson_ids.iter().map(u8::to_string).collect();
        format!("lessons:{}", ids.join(","))
    }

    /// Predicted label under a lesson selection, or `None` for an
    /// unparseable answer.
    pub fn predict(&self, pair: &ClonePair, lesson_ids: &[u8], all_ids: &[u8]) -> Option<Label> {
        let key = Self::condition_key(lesson_ids);
        if unit(self.seed, &[&pair.id, &key, "garble"]) < self.garble {
            return None;
        }
        let base_wrong = unit(self.seed, &[&pair.id, "base"]) < self.base_error;
        let (fix, brk) = if lesson_ids.is_empty() {
            (0.0, 0.0)
        } else if lesson_ids == all_ids {
            (self.all_fix, self.all_break)
        } else {
            (self.lesson_fix, self.lesson_break)
        };
        let u = unit(self.seed, &[&pair.id, &key, "shift"]);
        let wrong = if base_wrong { u >= fix } else { u < brk };
        Some(if wrong { flip(pair.label) } else { pair.label })
    }

    fn detection_text(&self, pair: &ClonePair, lesson_ids: &[u8], label: Option<Label>) -> String {
        let key = Self::condition_key(lesson_ids);
        let style = hash_u64(self.seed, &[&pair.id, &key, "style"]) % 4;
        match (label, style) {
            (None, _) => "Both snippets solve a problem, but I cannot decide.".into(),
            (Some(l), 0) => l.answer().into(),
            (Some(l), 1) => format!("{}.", l.answer()),
            (Some(l), 2) => format!("**{}**", l.answer()),
            (Some(l), _) => format!("{}, based on the logic of both snippets.", l.answer()),
        }
    }

    pub fn confidence(&self, pair: &ClonePair) -> u8 {
        CONFIDENCES[(hash_u64(self.seed, &[&pair.id, "confidence"]) % CONFIDENCES.len() as u64) as usize]
    }

    pub fn rationale(&self, pair: &ClonePair) -> String {
        let h = hash_u64(self.seed, &[&pair.id, "rationale"]);
        let first = RATIONALES[(h % RATIONALES.len() as u64) as usize];
        if (h >> 16).is_multiple_of(4) {
            let second = RATIONALES[((h >> 24) % 8) as usize];
            if second != first {
                return format!("{first} {second}");
            }
        }
        first.to_string()
    }
}

fn flip(l: Label) -> Label {
    match l {
        Label::Clone => Label::NotClone,
        Label::NotClone => Label::Clone,
    }
}

/// Records the scripted model's answer to every prompt a run over `pairs`
/// can issue: the default prompt, each lesson alone, all lessons, and the
/// confidence and rationale follow-ups for the mistaken answer.
pub fn script_fixture(
    builder: &mut FixtureBuilder,
    model: &DemoModel,
    pairs: &[ClonePair],
    lessons: &LessonSet,
) -> Result<(), PromptError> {
    let all = lessons.ids();
    let mut selections: Vec<Vec<u8>> = vec![vec![]];
    selections.extend(all.iter().map(|&id| vec![id]));
    selections.push(all.clone());
    for pair in pairs {
        for sel in &selections {
            let prompt = render_with_lessons(pair, &lessons.select(sel)?)?;
            let predicted = model.predict(pair, sel, &all);
            builder.add(&prompt.text, model.detection_text(pair, sel, predicted));
        }
        let wrong = flip(pair.label);
        builder.add(
            &render_confidence(pair, wrong).text,
            format!("My confidence is {}.", model.confidence(pair)),
        );
        builder.add(&render_rationale(pair, wrong, pair.label)?.text, model.rationale(pair));
    }
    Ok(())
}

/// Paths written by [`write_demo`].
#[derive(Debug, Clone)]
pub struct DemoFiles {
    pub dataset: PathBuf,
    pub fixture: PathBuf,
    pub config: PathBuf,
}

pub const DEMO_MODEL: &str = "demo-model";

/// Writes a demo dataset, its replay fixture (covering both comment
/// variants) and an experiment config into `dir`.
pub fn write_demo(dir: &Path, n: usize, seed: u64) -> Result<DemoFiles, DemoError> {
    std::fs::create_dir_all(dir)?;
    let pairs = demo_pairs(n, seed);
    let lessons = LessonSet::standard();
    let model = DemoModel::new(seed);
    let mut builder = FixtureBuilder::new(DEMO_MODEL, 0.0);
    script_fixture(&mut builder, &model, &pairs, &lessons)?;
    let stripped = pairs.iter().map(ClonePair::without_comments).collect::<Result<Vec<_>, _>>()?;
    script_fixture(&mut builder, &model, &stripped, &lessons)?;

    let files = DemoFiles {
        dataset: dir.join("pairs.jsonl"),
        fixture: dir.join("fixture.jsonl"),
        config: dir.join("experiment.toml"),
    };
    let mut data = Vec::new();
    crate::corpus::io::write_pairs(&mut data, &pairs)?;
    std::fs::write(&files.dataset, data)?;
    builder.write(&files.fixture)?;
    std::fs::write(&files.config, demo_config(n, seed).to_toml())?;
    Ok(files)
}

/// Config matching [`write_demo`]'s file layout, with relative paths.
pub fn demo_config(n: usize, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        output_dir: "out".into(),
        comments: CommentVariant::With,
        ablation: false,
        significance_test: SignificanceTest::PairedT,
        dataset: DatasetConfig {
            path: "pairs.jsonl".into(),
            format: DatasetFormat::Pairs,
            negatives_per_positive: 1,
            fields: None,
            lenient: false,
        },
        sampling: Some(SamplingConfig {
            size: Some(n - n % 2),
            confidence_level: None,
            margin_of_error: None,
            balanced: true,
        }),
        prompt: PromptConfig::default(),
        backend: BackendConfig::replay(DEMO_MODEL, "fixture.jsonl"),
        mining: MiningConfig::default(),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bias::{assign_categories, Taxonomy, DEFAULT_TAU};

    #[test]
    fn pairs_are_balanced_and_stable() {
        let p = demo_pairs(10, 1);
        assert_eq!(p.iter().filter(|x| x.label == Label::Clone).count(), 5);
        assert_eq!(p, demo_pairs(10, 1));
        for pair in p.iter().filter(|x| x.label == Label::NotClone) {
            let stripped = pair.without_comments().unwrap();
            assert_ne!(stripped.a.text(), stripped.b.text());
        }
    }

    #[test]
    fn every_canned_rationale_but_the_last_is_categorised() {
        let t = Taxonomy::standard();
        for (i, r) in RATIONALES.iter().enumerate() {
            let got = assign_categories(r, &t, DEFAULT_TAU);
            assert_eq!(got.is_empty(), i == RATIONALES.len() - 1, "{r}: {got:?}");
        }
    }

    #[test]
    fn builder_is_order_independent() {
        let mut a = FixtureBuilder::new("m", 0.0);
        a.add("x", "1").add("y", "2");
        let mut b = FixtureBuilder::new("m", 0.0);
        b.add("y", "2").add("x", "1");
        assert_eq!(a.exchanges(), b.exchanges());
        assert_eq!(a.len(), 2);
    }
}
