use serde::{Deserialize, Serialize};

use super::{
    whitespace_offsets, DataError, EntityAnnotation, LabelSet, RawExample, SubwordTokenizer, Token,
};
use crate::spans::{GoldSpan, Span};

/// What to do with an entity whose char extent falls inside tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    /// Drop entities that do not start and end on token boundaries.
    Exact,
    /// Keep the smallest covering token range.
    #[default]
    Expand,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// No token overlaps the entity (e.g. it covers only whitespace).
    NoTokens,
    BoundaryMismatch,
    UnknownLabel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedEntity {
    pub entity: EntityAnnotation,
    pub reason: DropReason,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizedExample {
    pub tokens: Vec<Token>,
    /// Label indices refer to `label_set`.
    pub gold_spans: Vec<GoldSpan>,
    pub label_set: LabelSet,
    pub language: String,
    pub dropped_entities: Vec<DroppedEntity>,
    /// Word extents used for boundary masking: the example's own, or its
    /// whitespace-separated runs when it has none.
    pub word_boundaries: Option<Vec<(usize, usize)>>,
}

impl TokenizedExample {
    pub fn token_ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Maps char-offset entities onto token spans. Every entity ends up either
/// in `gold_spans` or in `dropped_entities`, in input order.
pub fn remap_entities(
    ex: &RawExample,
    tokenizer: &dyn SubwordTokenizer,
    mode: BoundaryMode,
    label_set: &LabelSet,
) -> Result<TokenizedExample, DataError> {
    let tokens = tokenizer.tokenize_with_words(&ex.text, ex.word_boundaries.as_deref())?;
    let mut gold_spans = Vec::new();
    let mut dropped = Vec::new();
    for entity in &ex.entities {
        let drop = |reason| DroppedEntity {
            entity: entity.clone(),
            reason,
        };
        let Some(label) = label_set.index_of(&entity.label) else {
            dropped.push(drop(DropReason::UnknownLabel));
            continue;
        };
        match covering_range(&tokens, entity.start, entity.end) {
            None => dropped.push(drop(DropReason::NoTokens)),
            Some((first, last)) => {
                let aligned =
                    tokens[first].start == entity.start && tokens[last].end == entity.end;
                if mode == BoundaryMode::Exact && !aligned {
                    dropped.push(drop(DropReason::BoundaryMismatch));
                } else {
                    gold_spans.push(GoldSpan {
                        span: Span::new(first, last),
                        label,
                    });
                }
            }
        }
    }
    Ok(TokenizedExample {
        tokens,
        gold_spans,
        label_set: label_set.clone(),
        language: ex.language.clone(),
        dropped_entities: dropped,
        word_boundaries: Some(
            ex.word_boundaries
                .clone()
                .unwrap_or_else(|| whitespace_offsets(&ex.text)),
        ),
    })
}

/// First and last token whose char range intersects `[start, end)`.
/// Tokens are sorted, so both are found by binary search.
fn covering_range(tokens: &[Token], start: usize, end: usize) -> Option<(usize, usize)> {
    let first = tokens.partition_point(|t| t.end <= start);
    let past = tokens.partition_point(|t| t.start < end);
    (first < past).then(|| (first, past - 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<(usize, usize)>);

    impl SubwordTokenizer for Fixed {
        fn name(&self) -> String {
            "fixed".into()
        }
        fn vocab_size(&self) -> usize {
            10
        }
        fn tokenize(&self, _text: &str) -> Vec<Token> {
            self.0
                .iter()
                .enumerate()
                .map(|(i, &(start, end))| Token { id: i, start, end })
                .collect()
        }
    }

    fn example(entities: &[(usize, usize)]) -> RawExample {
        RawExample {
            text: "abcdefghij".into(),
            entities: entities
                .iter()
                .map(|&(start, end)| EntityAnnotation {
                    start,
                    end,
                    label: "L".into(),
                })
                .collect(),
            language: "en".into(),
            word_boundaries: None,
        }
    }

    fn labels() -> LabelSet {
        LabelSet::from_labels(["L"])
    }

    #[test]
    fn entity_over_two_tokens() {
        let tok = Fixed(vec![(0, 3), (3, 6), (7, 9)]);
        let t = remap_entities(&example(&[(0, 6)]), &tok, BoundaryMode::Exact, &labels()).unwrap();
        assert_eq!(t.gold_spans[0].span, Span::new(0, 1));
    }

    #[test]
    fn single_token_entity() {
        let tok = Fixed(vec![(0, 3), (3, 6), (7, 9)]);
        let t = remap_entities(&example(&[(7, 9)]), &tok, BoundaryMode::Exact, &labels()).unwrap();
        assert_eq!(t.gold_spans[0].span, Span::new(2, 2));
    }

    #[test]
    fn inner_entity_exact_vs_expand() {
        let tok = Fixed(vec![(0, 6)]);
        let ex = example(&[(1, 5)]);
        let exact = remap_entities(&ex, &tok, BoundaryMode::Exact, &labels()).unwrap();
        assert!(exact.gold_spans.is_empty());
        assert_eq!(exact.dropped_entities[0].reason, DropReason::BoundaryMismatch);
        let expand = remap_entities(&ex, &tok, BoundaryMode::Expand, &labels()).unwrap();
        assert_eq!(expand.gold_spans[0].span, Span::new(0, 0));
    }

    #[test]
    fn whitespace_only_entity_is_dropped() {
        let tok = Fixed(vec![(0, 3), (4, 6)]);
        let t = remap_entities(&example(&[(3, 4)]), &tok, BoundaryMode::Expand, &labels()).unwrap();
        assert_eq!(t.dropped_entities[0].reason, DropReason::NoTokens);
    }

    #[test]
    fn unknown_label_is_dropped_not_lost() {
        let tok = Fixed(vec![(0, 3)]);
        let t = remap_entities(&example(&[(0, 3)]), &tok, BoundaryMode::Expand, &LabelSet::new())
            .unwrap();
        assert_eq!(t.dropped_entities.len(), 1);
        assert_eq!(t.dropped_entities[0].reason, DropReason::UnknownLabel);
    }
}
