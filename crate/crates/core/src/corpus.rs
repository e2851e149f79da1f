//! Corpus loading, sentence segmentation and context extraction.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Unit in which text length is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthUnit {
    /// Whitespace-delimited tokens.
    #[default]
    Words,
    /// Non-whitespace unicode scalar values (for scripts without spaces).
    Chars,
}

impl std::str::FromStr for LengthUnit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "words" => Ok(LengthUnit::Words),
            "chars" => Ok(LengthUnit::Chars),
            other => Err(format!("unknown length unit `{other}` (expected words|chars)")),
        }
    }
}

pub fn measure_length(text: &str, unit: LengthUnit) -> usize {
    match unit {
        LengthUnit::Words => text.split_whitespace().count(),
        LengthUnit::Chars => text.chars().filter(|c| !c.is_whitespace()).count(),
    }
}

/// Collapse every whitespace run to one space and trim the ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate document id `{0}`")]
    DuplicateId(String),
    #[error("document `{0}` has no text")]
    EmptyDocument(String),
    #[error("document id must be non-empty")]
    EmptyId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }
}

/// Byte range of one sentence inside its document.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SentenceSpan {
    pub start: usize,
    pub end: usize,
    /// Length of the sentence in the configured unit.
    pub length: usize,
}

impl SentenceSpan {
    pub fn text<'a>(&self, doc: &'a str) -> &'a str {
        &doc[self.start..self.end]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub unit: LengthUnit,
}

/// A sentence-aligned chunk of a document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    #[serde(rename = "context_id")]
    pub id: String,
    pub doc_id: String,
    pub text: String,
    pub sentence_count: usize,
    pub length: usize,
}

impl Context {
    /// Build a context from free text, counting sentences with the default rules.
    pub fn from_text(
        id: impl Into<String>,
        doc_id: impl Into<String>,
        text: &str,
        unit: LengthUnit,
    ) -> Self {
        let text = normalize_whitespace(text);
        let sentence_count = sentence_ranges(&text).len().max(1);
        let length = measure_length(&text, unit);
        Self {
            id: id.into(),
            doc_id: doc_id.into(),
            text,
            sentence_count,
            length,
        }
    }
}

// Marks that end a sentence only when followed by whitespace or end of text.
fn is_ascii_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

// Full-width marks end a sentence unconditionally: CJK text has no spaces
// between sentences.
fn is_fullwidth_terminal(c: char) -> bool {
    matches!(c, '。' | '！' | '？' | '．')
}

fn is_closer(c: char) -> bool {
    matches!(
        c,
        '"' | '\'' | ')' | ']' | '}' | '”' | '’' | '»' | '）' | '」' | '』' | '】' | '》'
    )
}

/// Byte ranges of sentences in `text`, trimmed of surrounding whitespace.
pub(crate) fn sentence_ranges(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        if start.is_none() {
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            start = Some(pos);
        }
        let ascii = is_ascii_terminal(c);
        if ascii || is_fullwidth_terminal(c) {
            // Absorb runs like "?!" or "..." and trailing closing quotes.
            let mut j = i + 1;
            while j < chars.len()
                && (is_ascii_terminal(chars[j].1)
                    || is_fullwidth_terminal(chars[j].1)
                    || is_closer(chars[j].1))
            {
                j += 1;
            }
            let at_boundary = j == chars.len() || chars[j].1.is_whitespace();
            if at_boundary || !ascii {
                let end = if j == chars.len() {
                    text.len()
                } else {
                    chars[j].0
                };
                out.push((start.take().unwrap(), end));
                i = j;
                continue;
            }
            i = j;
            continue;
        }
        i += 1;
    }
    if let Some(s) = start {
        let end = s + text[s..].trim_end().len();
        if end > s {
            out.push((s, end));
        }
    }
    out
}

/// Split a document into sentences on terminal punctuation.
///
/// `.`, `!` and `?` end a sentence when followed by whitespace or the end of
/// the text; the full-width marks `。！？` always do. Closing quotes and
/// brackets directly after the mark stay with the sentence. Text without any
/// terminal mark becomes a single span.
pub fn segment_sentences(doc: &Document, rules: &SegmentationConfig) -> Vec<SentenceSpan> {
    sentence_ranges(&doc.text)
        .into_iter()
        .map(|(start, end)| SentenceSpan {
            start,
            end,
            length: measure_length(&doc.text[start..end], rules.unit),
        })
        .collect()
}

/// Greedily pack whole sentences into contexts of at most `max_len` units.
///
/// A sentence joins the open context iff the sum still fits; otherwise it
/// starts a new one. A single sentence longer than `max_len` becomes its own
/// context rather than being cut.
pub fn extract_contexts(
    doc: &Document,
    spans: &[SentenceSpan],
    max_len: usize,
    unit: LengthUnit,
) -> Vec<Context> {
    let mut groups: Vec<(usize, usize)> = Vec::new(); // [first, last] span index
    let mut current: Option<(usize, usize, usize)> = None; // (first, last, length)
    for (idx, span) in spans.iter().enumerate() {
        current = match current {
            Some((first, _, len)) if len + span.length <= max_len => {
                Some((first, idx, len + span.length))
            }
            Some((first, last, _)) => {
                groups.push((first, last));
                Some((idx, idx, span.length))
            }
            None => Some((idx, idx, span.length)),
        };
    }
    if let Some((first, last, _)) = current {
        groups.push((first, last));
    }

    groups
        .into_iter()
        .enumerate()
        .map(|(n, (first, last))| {
            let raw = &doc.text[spans[first].start..spans[last].end];
            let text = normalize_whitespace(raw);
            Context {
                id: format!("{}#{}", doc.id, n),
                doc_id: doc.id.clone(),
                length: measure_length(&text, unit),
                text,
                sentence_count: last - first + 1,
            }
        })
        .collect()
}

/// Segment and chunk one document.
pub fn contexts_for_document(doc: &Document, max_len: usize, unit: LengthUnit) -> Vec<Context> {
    let spans = segment_sentences(doc, &SegmentationConfig { unit });
    extract_contexts(doc, &spans, max_len, unit)
}

fn validate(docs: &[Document]) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for doc in docs {
        if doc.id.is_empty() {
            return Err(CorpusError::EmptyId);
        }
        if doc.text.trim().is_empty() {
            return Err(CorpusError::EmptyDocument(doc.id.clone()));
        }
        if !seen.insert(doc.id.as_str()) {
            return Err(CorpusError::DuplicateId(doc.id.clone()));
        }
    }
    Ok(())
}

/// Load a corpus from a directory of `.txt` files (id = file stem, sorted by
/// name) or from a JSON Lines file of `{"id", "text"}` records.
pub fn load_corpus(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let io = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let docs = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "txt"))
            .collect();
        files.sort();
        files
            .into_iter()
            .map(|file| {
                let text = fs::read_to_string(&file).map_err(|source| CorpusError::Io {
                    path: file.clone(),
                    source,
                })?;
                let id = file
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Ok(Document { id, text })
            })
            .collect::<Result<Vec<_>, CorpusError>>()?
    } else {
        let raw = fs::read_to_string(path).map_err(io)?;
        let mut docs = Vec::new();
        for (n, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let doc: Document = serde_json::from_str(line).map_err(|e| CorpusError::Record {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })?;
            docs.push(doc);
        }
        docs
    };
    validate(&docs)?;
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(text: &str) -> Document {
        Document::new("d", text)
    }

    fn spans(text: &str) -> Vec<SentenceSpan> {
        segment_sentences(&doc(text), &SegmentationConfig::default())
    }

    #[test]
    fn three_terminal_periods_give_three_spans() {
        let s = spans("A. B. C.");
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].text("A. B. C."), "A.");
        assert_eq!(s[2].text("A. B. C."), "C.");
    }

    #[test]
    fn no_punctuation_is_one_span() {
        let text = "no punctuation here";
        let s = spans(text);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].text(text), text);
        assert_eq!(s[0].length, 3);
    }

    #[test]
    fn inner_periods_do_not_split() {
        let s = spans("Version 3.5 shipped. It costs $4.99 now!");
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn closing_quote_stays_with_sentence() {
        let text = "He said “stop.” Then left.";
        let s = spans(text);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].text(text), "He said “stop.”");
    }

    #[test]
    fn fullwidth_marks_split_without_spaces() {
        let text = "今天下雨。明天晴天！真的吗？";
        let s = segment_sentences(&doc(text), &SegmentationConfig { unit: LengthUnit::Chars });
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].text(text), "今天下雨。");
        assert_eq!(s[0].length, 5);
    }

    #[test]
    fn trailing_whitespace_is_not_a_sentence() {
        let s = spans("  One. Two  \n\n");
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].text("  One. Two  \n\n"), "Two");
    }

    #[test]
    fn measure_length_examples() {
        assert_eq!(measure_length("", LengthUnit::Words), 0);
        assert_eq!(measure_length("one two three", LengthUnit::Words), 3);
        assert_eq!(measure_length(" a\tb\n", LengthUnit::Chars), 2);
    }

    fn sentences_of(lengths: &[usize]) -> Document {
        let text = lengths
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let mut words = vec![format!("s{i}"); n];
                words[n - 1].push('.');
                words.join(" ")
            })
            .collect::<Vec<_>>()
            .join(" ");
        Document::new("doc", text)
    }

    #[test]
    fn packing_three_long_sentences() {
        let d = sentences_of(&[300, 300, 300]);
        let ctxs = contexts_for_document(&d, 500, LengthUnit::Words);
        assert_eq!(ctxs.len(), 3);
        assert!(ctxs.iter().all(|c| c.sentence_count == 1 && c.length == 300));
    }

    #[test]
    fn packing_mixed_sentences() {
        let d = sentences_of(&[200, 250, 200, 40]);
        let ctxs = contexts_for_document(&d, 500, LengthUnit::Words);
        assert_eq!(ctxs.len(), 2);
        assert_eq!(ctxs[0].length, 450);
        assert_eq!(ctxs[0].sentence_count, 2);
        assert_eq!(ctxs[1].length, 240);
        assert_eq!(ctxs[1].id, "doc#1");
    }

    #[test]
    fn small_document_is_one_context() {
        let d = sentences_of(&[30, 40, 50]);
        let ctxs = contexts_for_document(&d, 500, LengthUnit::Words);
        assert_eq!(ctxs.len(), 1);
        assert_eq!(ctxs[0].length, 120);
    }

    #[test]
    fn overlong_sentence_is_kept_whole() {
        let d = sentences_of(&[10, 600, 10]);
        let ctxs = contexts_for_document(&d, 500, LengthUnit::Words);
        assert_eq!(ctxs.iter().map(|c| c.length).collect::<Vec<_>>(), vec![10, 600, 10]);
    }

    #[test]
    fn empty_spans_give_no_contexts() {
        assert!(extract_contexts(&doc("x"), &[], 500, LengthUnit::Words).is_empty());
    }

    #[test]
    fn context_text_is_whitespace_normalized() {
        let d = doc("First   line.\n\nSecond\tline.");
        let ctxs = contexts_for_document(&d, 500, LengthUnit::Words);
        assert_eq!(ctxs[0].text, "First line. Second line.");
    }

    #[test]
    fn validation_rejects_duplicates_and_blanks() {
        let dup = vec![Document::new("a", "x."), Document::new("a", "y.")];
        assert!(matches!(validate(&dup), Err(CorpusError::DuplicateId(_))));
        let blank = vec![Document::new("a", "  \n")];
        assert!(matches!(validate(&blank), Err(CorpusError::EmptyDocument(_))));
    }

    #[test]
    fn jsonl_loader_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        fs::write(&path, "{\"id\":\"a\",\"text\":\"One.\"}\nnot json\n").unwrap();
        match load_corpus(&path) {
            Err(CorpusError::Record { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}
