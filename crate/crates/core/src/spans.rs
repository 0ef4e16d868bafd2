//! Candidate span enumeration, gold assignment, word-boundary masking and
//! corpus-level span statistics.
//!
//! Spans are inclusive token ranges. The canonical order (by start, then
//! end) is part of the public contract: score grids from different runs line
//! up row for row.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    remap_entities, BoundaryMode, DataError, LabelSet, RawExample, Token, TokenizedExample,
    TokenizerKind,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    /// Inclusive.
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    /// Number of tokens covered.
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    /// `end - start`; indexes the width embedding table.
    pub fn width(&self) -> usize {
        self.end - self.start
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GoldSpan {
    pub span: Span,
    pub label: usize,
}

#[derive(Debug, Error)]
pub enum SpanError {
    #[error("vocabulary size must be positive")]
    ZeroVocabulary,
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Closed-form candidate count: sum over starts of `min(max_len, n - i)`.
pub fn span_count(n_tokens: usize, max_span_len: usize) -> usize {
    (0..n_tokens).map(|i| max_span_len.min(n_tokens - i)).sum()
}

/// Every span of length `1..=max_span_len`, ordered by start then end.
pub fn enumerate_spans(n_tokens: usize, max_span_len: usize) -> Vec<Span> {
    assert!(max_span_len >= 1, "max_span_len must be at least 1");
    let mut out = Vec::with_capacity(span_count(n_tokens, max_span_len));
    for start in 0..n_tokens {
        let last = (start + max_span_len).min(n_tokens);
        out.extend((start..last).map(|end| Span::new(start, end)));
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GoldAssignment {
    /// Per candidate: sorted label indices, empty for negatives.
    pub labels: Vec<Vec<usize>>,
    /// Gold annotations that no candidate can represent.
    pub uncovered: Vec<GoldSpan>,
}

/// Matches gold annotations to candidates by exact `(start, end)`. A span
/// annotated with several labels carries all of them.
pub fn assign_gold(spans: &[Span], gold: &[GoldSpan]) -> GoldAssignment {
    let index: HashMap<Span, usize> = spans.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let mut labels = vec![Vec::new(); spans.len()];
    let mut uncovered = Vec::new();
    for g in gold {
        match index.get(&g.span) {
            Some(&i) => {
                if !labels[i].contains(&g.label) {
                    labels[i].push(g.label);
                }
            }
            None => uncovered.push(*g),
        }
    }
    for l in &mut labels {
        l.sort_unstable();
    }
    GoldAssignment { labels, uncovered }
}

/// `true` iff the span's first token starts a word and its last token ends
/// one. Without boundaries every span participates.
pub fn boundary_mask(
    spans: &[Span],
    word_boundaries: Option<&[(usize, usize)]>,
    tokens: &[Token],
) -> Vec<bool> {
    let Some(words) = word_boundaries else {
        return vec![true; spans.len()];
    };
    let starts: BTreeSet<usize> = words.iter().map(|w| w.0).collect();
    let ends: BTreeSet<usize> = words.iter().map(|w| w.1).collect();
    let begins: Vec<bool> = tokens.iter().map(|t| starts.contains(&t.start)).collect();
    let finishes: Vec<bool> = tokens.iter().map(|t| ends.contains(&t.end)).collect();
    spans
        .iter()
        .map(|s| begins[s.start] && finishes[s.end])
        .collect()
}

/// Candidates of one example with their gold labels and loss/decoding mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSpanSet {
    pub n_tokens: usize,
    pub max_span_len: usize,
    pub spans: Vec<Span>,
    pub gold: Vec<Vec<usize>>,
    pub mask: Vec<bool>,
    pub uncovered: Vec<GoldSpan>,
}

impl CandidateSpanSet {
    /// All-negative, all-active candidates.
    pub fn new(n_tokens: usize, max_span_len: usize) -> Self {
        let spans = enumerate_spans(n_tokens, max_span_len);
        let n = spans.len();
        Self {
            n_tokens,
            max_span_len,
            spans,
            gold: vec![Vec::new(); n],
            mask: vec![true; n],
            uncovered: Vec::new(),
        }
    }

    pub fn with_gold(mut self, gold: &[GoldSpan]) -> Self {
        let a = assign_gold(&self.spans, gold);
        self.gold = a.labels;
        self.uncovered = a.uncovered;
        self
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), self.spans.len());
        self.mask = mask;
        self
    }

    pub fn for_example(ex: &TokenizedExample, max_span_len: usize, mask_words: bool) -> Self {
        let set = Self::new(ex.tokens.len(), max_span_len).with_gold(&ex.gold_spans);
        if mask_words {
            let mask = boundary_mask(&set.spans, ex.word_boundaries.as_deref(), &ex.tokens);
            set.with_mask(mask)
        } else {
            set
        }
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Position of `span` in canonical order, if it is a candidate.
    pub fn index_of(&self, span: Span) -> Option<usize> {
        if span.end >= self.n_tokens || span.start > span.end || span.len() > self.max_span_len {
            return None;
        }
        let before: usize = (0..span.start)
            .map(|i| self.max_span_len.min(self.n_tokens - i))
            .sum();
        Some(before + span.width())
    }

    pub fn is_positive(&self, i: usize) -> bool {
        !self.gold[i].is_empty()
    }

    /// (positive, negative) span counts over mask-true candidates.
    pub fn polarity_counts(&self) -> (usize, usize) {
        let mut pos = 0;
        let mut neg = 0;
        for i in 0..self.spans.len() {
            if !self.mask[i] {
                continue;
            }
            if self.is_positive(i) {
                pos += 1;
            } else {
                neg += 1;
            }
        }
        (pos, neg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub language: String,
    pub tokenizer: String,
    pub masked: bool,
    pub positives: usize,
    pub negatives: usize,
    /// `positives / negatives`; `None` when there are no negatives.
    pub ratio: Option<f64>,
    pub ratio_infinite: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub rows: Vec<RatioRow>,
}

impl RatioReport {
    pub fn find(&self, language: &str, tokenizer: &str, masked: bool) -> Option<&RatioRow> {
        self.rows
            .iter()
            .find(|r| r.language == language && r.tokenizer == tokenizer && r.masked == masked)
    }
}

/// Positive/negative span counts per (language, tokenizer, masking). A span
/// counts once however many labels it carries.
pub fn ratio_report(
    corpus: &[RawExample],
    tokenizers: &[TokenizerKind],
    vocab_size: usize,
    max_span_len: usize,
    masking: &[bool],
) -> Result<RatioReport, SpanError> {
    let labels = LabelSet::from_examples(corpus);
    let mut counts: BTreeMap<(String, String, bool), (usize, usize)> = BTreeMap::new();
    for &kind in tokenizers {
        let tok = kind.build(vocab_size);
        for ex in corpus {
            let t = remap_entities(ex, tok.as_ref(), BoundaryMode::Expand, &labels)?;
            for &masked in masking {
                let c = CandidateSpanSet::for_example(&t, max_span_len, masked);
                let (p, n) = c.polarity_counts();
                let e = counts
                    .entry((ex.language.clone(), kind.to_string(), masked))
                    .or_default();
                e.0 += p;
                e.1 += n;
            }
        }
    }
    let rows = counts
        .into_iter()
        .map(|((language, tokenizer, masked), (positives, negatives))| RatioRow {
            language,
            tokenizer,
            masked,
            positives,
            negatives,
            ratio: (negatives > 0).then(|| positives as f64 / negatives as f64),
            ratio_infinite: negatives == 0,
        })
        .collect();
    Ok(RatioReport { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub tokenizer: String,
    pub distinct_ids: usize,
    pub vocab_size: usize,
    pub fraction: f64,
}

/// Share of the vocabulary whose ids occur at least once.
pub fn coverage_fraction(
    ids: impl IntoIterator<Item = usize>,
    vocab_size: usize,
) -> Result<(usize, f64), SpanError> {
    if vocab_size == 0 {
        return Err(SpanError::ZeroVocabulary);
    }
    let distinct: BTreeSet<usize> = ids.into_iter().collect();
    Ok((distinct.len(), distinct.len() as f64 / vocab_size as f64))
}

/// Fraction of token embeddings that a corpus would touch (and therefore
/// update) under one tokenizer.
pub fn gradient_coverage(
    corpus: &[RawExample],
    tokenizer: TokenizerKind,
    vocab_size: usize,
) -> Result<CoverageRow, SpanError> {
    if vocab_size == 0 {
        return Err(SpanError::ZeroVocabulary);
    }
    let tok = tokenizer.build(vocab_size);
    let mut ids = Vec::new();
    for ex in corpus {
        let tokens = tok.tokenize_with_words(&ex.text, ex.word_boundaries.as_deref())?;
        ids.extend(tokens.iter().map(|t| t.id));
    }
    let (distinct_ids, fraction) = coverage_fraction(ids, vocab_size)?;
    Ok(CoverageRow {
        tokenizer: tokenizer.to_string(),
        distinct_ids,
        vocab_size,
        fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EntityAnnotation;

    fn tok(start: usize, end: usize) -> Token {
        Token { id: 0, start, end }
    }

    #[test]
    fn enumeration_examples() {
        assert_eq!(enumerate_spans(5, 30).len(), 15);
        assert_eq!(enumerate_spans(5, 3).len(), 12);
        assert!(enumerate_spans(0, 4).is_empty());
        assert_eq!(
            enumerate_spans(3, 2),
            vec![
                Span::new(0, 0),
                Span::new(0, 1),
                Span::new(1, 1),
                Span::new(1, 2),
                Span::new(2, 2)
            ]
        );
    }

    #[test]
    fn index_of_agrees_with_position() {
        let c = CandidateSpanSet::new(9, 4);
        for (i, s) in c.spans.iter().enumerate() {
            assert_eq!(c.index_of(*s), Some(i));
        }
        assert_eq!(c.index_of(Span::new(0, 4)), None);
        assert_eq!(c.index_of(Span::new(8, 9)), None);
    }

    #[test]
    fn no_gold_all_negative() {
        let c = CandidateSpanSet::new(4, 3).with_gold(&[]);
        assert!(c.gold.iter().all(Vec::is_empty));
    }

    #[test]
    fn one_gold_one_positive() {
        let g = GoldSpan {
            span: Span::new(1, 2),
            label: 3,
        };
        let c = CandidateSpanSet::new(5, 30).with_gold(&[g]);
        assert_eq!(c.gold.iter().filter(|l| !l.is_empty()).count(), 1);
        assert_eq!(c.gold[c.index_of(g.span).unwrap()], vec![3]);
    }

    #[test]
    fn overlong_gold_is_uncovered() {
        let g = GoldSpan {
            span: Span::new(0, 3),
            label: 0,
        };
        let c = CandidateSpanSet::new(6, 3).with_gold(&[g]);
        assert!(c.gold.iter().all(Vec::is_empty));
        assert_eq!(c.uncovered, vec![g]);
    }

    #[test]
    fn same_span_two_labels_is_multilabel() {
        let s = Span::new(0, 1);
        let c = CandidateSpanSet::new(3, 3).with_gold(&[
            GoldSpan { span: s, label: 2 },
            GoldSpan { span: s, label: 0 },
        ]);
        assert_eq!(c.gold[c.index_of(s).unwrap()], vec![0, 2]);
    }

    #[test]
    fn mask_examples() {
        let tokens = [tok(0, 3), tok(3, 6), tok(7, 9)];
        let spans = enumerate_spans(3, 3);
        assert!(boundary_mask(&spans, None, &tokens).iter().all(|&m| m));
        let mask = boundary_mask(&spans, Some(&[(0, 6), (7, 9)]), &tokens);
        let at = |s: Span| mask[spans.iter().position(|x| *x == s).unwrap()];
        assert!(at(Span::new(0, 1)));
        assert!(!at(Span::new(1, 1)));
        assert!(!at(Span::new(0, 0)));
        assert!(at(Span::new(0, 2)));

        let words: Vec<(usize, usize)> = tokens.iter().map(|t| (t.start, t.end)).collect();
        assert!(boundary_mask(&spans, Some(&words), &tokens).iter().all(|&m| m));
    }

    #[test]
    fn ratio_single_example() {
        let ex = RawExample {
            text: "a b c d e".into(),
            entities: vec![EntityAnnotation {
                start: 2,
                end: 3,
                label: "x".into(),
            }],
            language: "en".into(),
            word_boundaries: None,
        };
        let r = ratio_report(&[ex], &[TokenizerKind::Whitespace], 100, 30, &[false]).unwrap();
        let row = &r.rows[0];
        assert_eq!((row.positives, row.negatives), (1, 14));
        assert_eq!(row.ratio, Some(1.0 / 14.0));
    }

    #[test]
    fn ratio_empty_corpus() {
        let r = ratio_report(&[], &[TokenizerKind::Whitespace], 100, 30, &[false, true]).unwrap();
        assert!(r.rows.is_empty());
    }

    #[test]
    fn zero_negatives_flagged() {
        let ex = RawExample {
            text: "a".into(),
            entities: vec![EntityAnnotation {
                start: 0,
                end: 1,
                label: "x".into(),
            }],
            language: "en".into(),
            word_boundaries: None,
        };
        let r = ratio_report(&[ex], &[TokenizerKind::Whitespace], 10, 30, &[false]).unwrap();
        assert!(r.rows[0].ratio_infinite);
        assert_eq!(r.rows[0].ratio, None);
    }

    #[test]
    fn coverage_examples() {
        assert_eq!(coverage_fraction([1, 3, 3, 5, 7], 10).unwrap(), (4, 0.4));
        assert_eq!(coverage_fraction([], 10).unwrap(), (0, 0.0));
        assert_eq!(coverage_fraction(0..10, 10).unwrap().1, 1.0);
        assert!(matches!(
            coverage_fraction([0], 0),
            Err(SpanError::ZeroVocabulary)
        ));
    }
}
