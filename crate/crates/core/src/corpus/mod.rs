//! Sentences, frame annotations and the JSON Lines corpus format.

mod ontology;
pub mod tags;
mod vocab;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::syntax::ConstTree;

pub use ontology::Ontology;
pub use tags::{decode_iob2, decode_iobc, encode_iob2, encode_iobc, SpanTag, TargetTag};
pub use vocab::{Interner, Vocab, UNK_TOKEN};

/// A labeled argument span, inclusive on both ends.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Element {
    pub span: [usize; 2],
    pub label: String,
}

impl Element {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        Element {
            span: [start, end],
            label: label.into(),
        }
    }

    pub fn start(&self) -> usize {
        self.span[0]
    }

    pub fn end(&self) -> usize {
        self.span[1]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    /// Token indices of the target, strictly increasing; may have gaps.
    #[serde(rename = "target")]
    pub target_indices: Vec<usize>,
    #[serde(rename = "lu")]
    pub lexical_unit: String,
    pub frame: String,
    #[serde(default)]
    pub elements: Vec<Element>,
}

impl FrameAnnotation {
    pub fn spans(&self) -> Vec<(usize, usize)> {
        self.elements.iter().map(|e| (e.start(), e.end())).collect()
    }

    fn validate(&self, n: usize) -> std::result::Result<(), String> {
        if self.target_indices.is_empty() {
            return Err("empty target".into());
        }
        if self.target_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(format!(
                "target indices {:?} are not strictly increasing",
                self.target_indices
            ));
        }
        if let Some(&last) = self.target_indices.last() {
            if last >= n {
                return Err(format!("target index {last} out of range for {n} tokens"));
            }
        }
        let mut sorted: Vec<&Element> = self.elements.iter().collect();
        sorted.sort_by_key(|e| e.span);
        for e in &sorted {
            if e.start() > e.end() || e.end() >= n {
                return Err(format!(
                    "element `{}` span [{},{}] out of bounds for {n} tokens",
                    e.label,
                    e.start(),
                    e.end()
                ));
            }
        }
        for w in sorted.windows(2) {
            if w[1].start() <= w[0].end() {
                return Err(format!(
                    "element spans [{},{}] and [{},{}] overlap",
                    w[0].start(),
                    w[0].end(),
                    w[1].start(),
                    w[1].end()
                ));
            }
        }
        Ok(())
    }
}

/// On-disk record: one JSON object per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SentenceRecord {
    pub tokens: Vec<String>,
    pub pos: Vec<String>,
    pub tree: String,
    #[serde(default)]
    pub annotations: Vec<FrameAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub pos_tags: Vec<String>,
    pub tree_literal: String,
    pub tree: ConstTree,
    pub annotations: Vec<FrameAnnotation>,
}

impl Sentence {
    pub fn new(
        tokens: Vec<String>,
        pos_tags: Vec<String>,
        tree_literal: impl Into<String>,
        annotations: Vec<FrameAnnotation>,
    ) -> Result<Self> {
        let record = SentenceRecord {
            tokens,
            pos: pos_tags,
            tree: tree_literal.into(),
            annotations,
        };
        Self::from_record(record).map_err(|message| Error::Invariant { record: 0, message })
    }

    pub fn from_record(record: SentenceRecord) -> std::result::Result<Self, String> {
        let n = record.tokens.len();
        if n == 0 {
            return Err("sentence has no tokens".into());
        }
        if record.pos.len() != n {
            return Err(format!("{} tokens but {} POS tags", n, record.pos.len()));
        }
        let tree = ConstTree::parse(&record.tree).map_err(|e| e.to_string())?;
        if tree.token_count() != n {
            return Err(format!(
                "tree has {} preterminals but sentence has {n} tokens",
                tree.token_count()
            ));
        }
        for (a, ann) in record.annotations.iter().enumerate() {
            ann.validate(n).map_err(|m| format!("annotation {a}: {m}"))?;
        }
        Ok(Sentence {
            tokens: record.tokens,
            pos_tags: record.pos,
            tree_literal: record.tree,
            tree,
            annotations: record.annotations,
        })
    }

    pub fn to_record(&self) -> SentenceRecord {
        SentenceRecord {
            tokens: self.tokens.clone(),
            pos: self.pos_tags.clone(),
            tree: self.tree_literal.clone(),
            annotations: self.annotations.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn gold_targets(&self) -> Vec<Vec<usize>> {
        self.annotations
            .iter()
            .map(|a| a.target_indices.clone())
            .collect()
    }
}

/// Parses a JSON Lines corpus. Blank lines are skipped.
pub fn parse_corpus(text: &str) -> Result<Vec<Sentence>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: SentenceRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let sentence = Sentence::from_record(record).map_err(|message| Error::Invariant {
            record: line_no,
            message,
        })?;
        out.push(sentence);
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Sentence>> {
    let file = fs::File::open(path)?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    parse_corpus(&text)
}

pub fn write_corpus<W: Write>(sentences: &[Sentence], out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    for s in sentences {
        serde_json::to_writer(&mut out, &s.to_record())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_corpus(sentences: &[Sentence], path: impl AsRef<Path>) -> Result<()> {
    write_corpus(sentences, fs::File::create(path)?)
}
