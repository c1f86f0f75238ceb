//! Lexical comment removal for Java and Python.
//!
//! Only comments are touched. String, text-block and char literals are copied
//! byte for byte, so comment markers inside them survive. Python docstrings
//! are string literals and are kept.

use super::{CodeSnippet, CorpusError, Language};

pub fn strip_comments(snippet: &CodeSnippet) -> Result<CodeSnippet, CorpusError> {
    let text = strip_source(snippet.text(), snippet.language())?;
    Ok(CodeSnippet {
        text,
        language: snippet.language(),
        comments_stripped: true,
    })
}

pub fn strip_source(source: &str, language: Language) -> Result<String, CorpusError> {
    let bytes = source.as_bytes();
    let out = match language {
        Language::Python => strip_python(bytes)?,
        Language::Java => strip_java(bytes)?,
    };
    // Cuts only happen at ASCII delimiters, so the result is still UTF-8.
    Ok(String::from_utf8(out).expect("comment removal preserves UTF-8 boundaries"))
}

fn line_end(bytes: &[u8], from: usize) -> usize {
    bytes[from..]
        .iter()
        .position(|&b| b == b'\n')
        .map_or(bytes.len(), |p| from + p)
}

/// End (exclusive) of a quoted literal opened at `start`.
///
/// `delim` is the full opening delimiter (`"`, `'`, `"""`, `'''`). Single
/// delimiters may not cross a raw newline; a backslash escapes the next byte
/// in every form, including line continuations.
fn literal_end(bytes: &[u8], start: usize, delim: &[u8]) -> Result<usize, CorpusError> {
    let multiline = delim.len() == 3;
    let mut j = start + delim.len();
    loop {
        if j >= bytes.len() {
            return Err(CorpusError::UnterminatedStringLiteral { offset: start });
        }
        match bytes[j] {
            b'\\' => j += 2,
            b'\n' if !multiline => {
                return Err(CorpusError::UnterminatedStringLiteral { offset: start })
            }
            _ if bytes[j..].starts_with(delim) => return Ok(j + delim.len()),
            _ => j += 1,
        }
    }
}

fn strip_python(bytes: &[u8]) -> Result<Vec<u8>, CorpusError> {
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'#' => i = line_end(bytes, i),
            q @ (b'"' | b'\'') => {
                let triple = [q; 3];
                let delim: &[u8] = if bytes[i..].starts_with(&triple) {
                    &triple
                } else {
                    &triple[..1]
                };
                let end = literal_end(bytes, i, delim)?;
                out.extend_from_slice(&bytes[i..end]);
                i = end;
            }
            b => {
                out.push(b);
                i += 1;
            }
        }
    }
    Ok(out)
}

fn strip_java(bytes: &[u8]) -> Result<Vec<u8>, CorpusError> {
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        let rest = &bytes[i..];
        if rest.starts_with(b"//") {
            i = line_end(bytes, i);
        } else if rest.starts_with(b"/*") {
            let close = bytes[i + 2..]
                .windows(2)
                .position(|w| w == b"*/")
                .ok_or(CorpusError::UnterminatedBlockComment { offset: i })?;
            i += 2 + close + 2;
            // A block comment separates tokens; keep them apart.
            let before = out.last().is_some_and(|b: &u8| !b.is_ascii_whitespace());
            let after = bytes.get(i).is_some_and(|b| !b.is_ascii_whitespace());
            if before && after {
                out.push(b' ');
            }
        } else if rest.starts_with(b"\"\"\"") {
            let end = literal_end(bytes, i, b"\"\"\"")?;
            out.extend_from_slice(&bytes[i..end]);
            i = end;
        } else if rest[0] == b'"' || rest[0] == b'\'' {
            let end = literal_end(bytes, i, &rest[..1])?;
            out.extend_from_slice(&bytes[i..end]);
            i = end;
        } else {
            out.push(rest[0]);
            i += 1;
        }
    }
    Ok(out)
}
