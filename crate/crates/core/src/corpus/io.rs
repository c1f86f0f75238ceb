//! Line-delimited dataset readers and writers.
//!
//! Readers stream one JSON object per line. A malformed line is fatal unless
//! the caller opts into lenient mode, in which case it is skipped and
//! reported with its 1-based line number.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{check_unique_ids, ClonePair, CodeSnippet, CorpusError, Label, Language, Origin, TranslationRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedLine {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct Loaded<T> {
    pub records: Vec<T>,
    pub skipped: Vec<SkippedLine>,
}

fn read_lines<T>(
    reader: impl BufRead,
    lenient: bool,
    mut parse: impl FnMut(usize, Value) -> Result<T, String>,
) -> Result<Loaded<T>, CorpusError> {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<Value>(&line)
            .map_err(|e| e.to_string())
            .and_then(|v| parse(line_no, v));
        match parsed {
            Ok(rec) => records.push(rec),
            Err(message) if lenient => {
                log::warn!("skipping line {line_no}: {message}");
                skipped.push(SkippedLine { line: line_no, message });
            }
            Err(message) => return Err(CorpusError::MalformedRecord { line: line_no, message }),
        }
    }
    Ok(Loaded { records, skipped })
}

fn string_field(obj: &Value, key: &str) -> Result<String, String> {
    match obj.get(key) {
        Some(Value::String(s)) if !s.is_empty() => Ok(s.clone()),
        Some(Value::String(_)) => Err(format!("field `{key}` is empty")),
        Some(_) => Err(format!("field `{key}` is not a string")),
        None => Err(format!("missing field `{key}`")),
    }
}

/// Theme ids appear as strings or integers in the wild.
fn id_field(obj: &Value, key: &str) -> Result<String, String> {
    match obj.get(key) {
        Some(Value::Number(n)) => Ok(n.to_string()),
        _ => string_field(obj, key),
    }
}

fn label_field(obj: &Value, key: &str) -> Result<Label, String> {
    let bit = match obj.get(key) {
        Some(Value::Bool(b)) => Some(u8::from(*b)),
        Some(Value::Number(n)) => n.as_u64().and_then(|v| u8::try_from(v).ok()),
        Some(Value::String(s)) => match s.trim().to_ascii_lowercase().as_str() {
            "1" | "true" => Some(1),
            "0" | "false" => Some(0),
            _ => None,
        },
        None => return Err(format!("missing field `{key}`")),
        _ => None,
    };
    bit.and_then(Label::from_bit)
        .ok_or_else(|| format!("field `{key}` is not a binary label"))
}

/// Avatar translation records: `{"java": ..., "python": ..., "idx": ...}`.
pub fn read_avatar(reader: impl BufRead, lenient: bool) -> Result<Loaded<TranslationRecord>, CorpusError> {
    read_lines(reader, lenient, |_, v| {
        Ok(TranslationRecord {
            java: string_field(&v, "java")?,
            python: string_field(&v, "python")?,
            idx: id_field(&v, "idx")?,
        })
    })
}

/// On-disk pair record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub id: String,
    pub lang_a: String,
    pub lang_b: String,
    pub code_a: String,
    pub code_b: String,
    pub label: u8,
    pub origin: Origin,
}

impl From<&ClonePair> for PairRecord {
    fn from(p: &ClonePair) -> Self {
        PairRecord {
            id: p.id.clone(),
            lang_a: p.a.language().name().to_ascii_lowercase(),
            lang_b: p.b.language().name().to_ascii_lowercase(),
            code_a: p.a.text().to_string(),
            code_b: p.b.text().to_string(),
            label: p.label.as_bit(),
            origin: p.origin,
        }
    }
}

impl TryFrom<PairRecord> for ClonePair {
    type Error = CorpusError;

    fn try_from(r: PairRecord) -> Result<Self, Self::Error> {
        let label = Label::from_bit(r.label).ok_or_else(|| CorpusError::MalformedRecord {
            line: 0,
            message: format!("label {} is not 0 or 1", r.label),
        })?;
        Ok(ClonePair {
            a: CodeSnippet::new(r.code_a, r.lang_a.parse()?)?,
            b: CodeSnippet::new(r.code_b, r.lang_b.parse()?)?,
            id: r.id,
            label,
            origin: r.origin,
        })
    }
}

pub fn read_pairs(reader: impl BufRead, lenient: bool) -> Result<Loaded<ClonePair>, CorpusError> {
    let loaded = read_lines(reader, lenient, |_, v| {
        let rec: PairRecord = serde_json::from_value(v).map_err(|e| e.to_string())?;
        ClonePair::try_from(rec).map_err(|e| e.to_string())
    })?;
    check_unique_ids(&loaded.records)?;
    Ok(loaded)
}

pub fn write_pairs(mut writer: impl Write, pairs: &[ClonePair]) -> Result<(), CorpusError> {
    for pair in pairs {
        let line = serde_json::to_string(&PairRecord::from(pair)).map_err(std::io::Error::other)?;
        writeln!(writer, "{line}")?;
    }
    writer.flush()?;
    Ok(())
}

/// Field mapping for within-language datasets with two code columns and a
/// binary label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolcFields {
    pub code_a: String,
    pub code_b: String,
    pub label: String,
    /// Optional id column; pairs are numbered by line when absent.
    pub id: Option<String>,
    pub language: Language,
}

impl Default for PoolcFields {
    fn default() -> Self {
        PoolcFields {
            code_a: "code1".into(),
            code_b: "code2".into(),
            label: "similar".into(),
            id: None,
            language: Language::Python,
        }
    }
}

pub fn read_poolc(reader: impl BufRead, fields: &PoolcFields, lenient: bool) -> Result<Loaded<ClonePair>, CorpusError> {
    let loaded = read_lines(reader, lenient, |line, v| {
        let id = match &fields.id {
            Some(key) => id_field(&v, key)?,
            None => format!("poolc-{line}"),
        };
        let a = CodeSnippet::new(string_field(&v, &fields.code_a)?, fields.language).map_err(|e| e.to_string())?;
        let b = CodeSnippet::new(string_field(&v, &fields.code_b)?, fields.language).map_err(|e| e.to_string())?;
        Ok(ClonePair {
            id,
            a,
            b,
            label: label_field(&v, &fields.label)?,
            origin: Origin::PoolC,
        })
    })?;
    check_unique_ids(&loaded.records)?;
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn avatar_lines() {
        let input = r#"{"java": "class A {}", "python": "a = 1", "idx": "t1"}
{"java": "class B {}", "python": "b = 1", "idx": 7}

"#;
        let loaded = read_avatar(Cursor::new(input), false).unwrap();
        assert_eq!(loaded.records.len(), 2);
        assert_eq!(loaded.records[1].idx, "7");
    }

    #[test]
    fn malformed_line_is_fatal_unless_lenient() {
        let input = "{\"java\": \"x\", \"python\": \"y\", \"idx\": \"1\"}\nnot json\n{\"java\": \"x\"}\n";
        let err = read_avatar(Cursor::new(input), false).unwrap_err();
        assert!(matches!(err, CorpusError::MalformedRecord { line: 2, .. }));
        let loaded = read_avatar(Cursor::new(input), true).unwrap();
        assert_eq!(loaded.records.len(), 1);
        assert_eq!(loaded.skipped.iter().map(|s| s.line).collect::<Vec<_>>(), vec![2, 3]);
    }

    #[test]
    fn pair_roundtrip() {
        let pair = ClonePair {
            id: "p0".into(),
            a: CodeSnippet::new("class A {}\n", Language::Java).unwrap(),
            b: CodeSnippet::new("a = \"ü\"\n", Language::Python).unwrap(),
            label: Label::Clone,
            origin: Origin::Avatar,
        };
        let mut buf = Vec::new();
        write_pairs(&mut buf, std::slice::from_ref(&pair)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"label\":1"));
        assert!(text.contains("\"lang_a\":\"java\""));
        let back = read_pairs(Cursor::new(buf), false).unwrap();
        assert_eq!(back.records, vec![pair]);
    }

    #[test]
    fn duplicate_pair_ids_rejected() {
        let line = r#"{"id":"x","lang_a":"python","lang_b":"python","code_a":"a","code_b":"b","label":0,"origin":"synthetic"}"#;
        let input = format!("{line}\n{line}\n");
        assert!(matches!(
            read_pairs(Cursor::new(input), false),
            Err(CorpusError::DuplicatePairId(_))
        ));
    }

    #[test]
    fn poolc_with_default_and_custom_fields() {
        let input = "{\"code1\": \"a = 1\", \"code2\": \"b = 1\", \"similar\": true}\n{\"code1\": \"c\", \"code2\": \"d\", \"similar\": 0}\n";
        let loaded = read_poolc(Cursor::new(input), &PoolcFields::default(), false).unwrap();
        assert_eq!(loaded.records[0].id, "poolc-1");
        assert_eq!(loaded.records[0].label, Label::Clone);
        assert_eq!(loaded.records[1].label, Label::NotClone);

        let fields = PoolcFields {
            code_a: "left".into(),
            code_b: "right".into(),
            label: "y".into(),
            id: Some("key".into()),
            language: Language::Java,
        };
        let input = "{\"left\": \"int a;\", \"right\": \"int b;\", \"y\": \"1\", \"key\": 9}\n";
        let loaded = read_poolc(Cursor::new(input), &fields, false).unwrap();
        assert_eq!(loaded.records[0].id, "9");
        assert_eq!(loaded.records[0].a.language(), Language::Java);

        let bad = "{\"code1\": \"a\", \"code2\": \"b\", \"similar\": 3}\n";
        assert!(read_poolc(Cursor::new(bad), &PoolcFields::default(), false).is_err());
    }
}
