//! Corpus records, tokenization, and char-offset to token-span remapping.

mod jsonl;
mod remap;
mod tokenizer;

pub use jsonl::{load_jsonl, load_jsonl_with, parse_jsonl, CapSelection, LoadOptions};
pub use remap::{remap_entities, BoundaryMode, DropReason, DroppedEntity, TokenizedExample};
pub use tokenizer::{
    char_ngram_offsets, hash_piece, whitespace_offsets, CharNgramTokenizer,
    ExternalOffsetsTokenizer, SubwordTokenizer, Token, TokenizerConfig, TokenizerKind,
    WhitespaceTokenizer,
};

use std::collections::HashSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: {source}")]
    Invalid {
        path: PathBuf,
        line: usize,
        source: Box<DataError>,
    },
    #[error("entity ({start}, {end}) outside text of length {len}")]
    EntityOutOfRange { start: usize, end: usize, len: usize },
    #[error("word boundary ({start}, {end}) outside text of length {len}")]
    BoundaryOutOfRange { start: usize, end: usize, len: usize },
    #[error("duplicate entity ({start}, {end}, {label:?})")]
    DuplicateEntity {
        start: usize,
        end: usize,
        label: String,
    },
    #[error("empty entity label at ({start}, {end})")]
    EmptyLabel { start: usize, end: usize },
    #[error("tokenizer needs word boundaries but the record has none")]
    MissingWordBoundaries,
    #[error("word boundaries {0:?} and {1:?} overlap")]
    OverlappingWords((usize, usize), (usize, usize)),
    #[error("unknown tokenizer `{0}` (expected whitespace, char_ngram:N or external)")]
    UnknownTokenizer(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntityAnnotation {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

/// One corpus record. Offsets are char indices, end-exclusive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub text: String,
    pub entities: Vec<EntityAnnotation>,
    pub language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_boundaries: Option<Vec<(usize, usize)>>,
}

impl RawExample {
    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let len = self.char_len();
        let mut seen = HashSet::new();
        for e in &self.entities {
            if e.start >= e.end || e.end > len {
                return Err(DataError::EntityOutOfRange {
                    start: e.start,
                    end: e.end,
                    len,
                });
            }
            if e.label.is_empty() {
                return Err(DataError::EmptyLabel {
                    start: e.start,
                    end: e.end,
                });
            }
            if !seen.insert(e) {
                return Err(DataError::DuplicateEntity {
                    start: e.start,
                    end: e.end,
                    label: e.label.clone(),
                });
            }
        }
        for &(start, end) in self.word_boundaries.iter().flatten() {
            if start >= end || end > len {
                return Err(DataError::BoundaryOutOfRange { start, end, len });
            }
        }
        Ok(())
    }
}

/// Ordered, duplicate-free label descriptions. Order defines column order
/// of every score grid built against it.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelSet {
    labels: Vec<String>,
}

impl LabelSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keeps first occurrences, in order.
    pub fn from_labels<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = Self::new();
        for l in labels {
            set.push(l.into());
        }
        set
    }

    /// Union of entity labels across records, in order of first occurrence.
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a RawExample>) -> Self {
        Self::from_labels(
            examples
                .into_iter()
                .flat_map(|e| e.entities.iter().map(|a| a.label.clone())),
        )
    }

    /// Adds a label if absent and returns its index.
    pub fn push(&mut self, label: String) -> usize {
        match self.index_of(&label) {
            Some(i) => i,
            None => {
                self.labels.push(label);
                self.labels.len() - 1
            }
        }
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn get(&self, i: usize) -> Option<&str> {
        self.labels.get(i).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(String::as_str)
    }

    pub fn as_slice(&self) -> &[String] {
        &self.labels
    }
}
