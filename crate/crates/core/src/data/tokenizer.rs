//! Offset-preserving tokenizers.
//!
//! Offsets are in Unicode scalar values (chars), end-exclusive, matching the
//! entity offsets in corpus files. Token ids are hashed into a fixed
//! vocabulary so that unseen text never needs a vocabulary update.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub id: usize,
    pub start: usize,
    pub end: usize,
}

pub trait SubwordTokenizer: Send + Sync {
    fn name(&self) -> String;

    fn vocab_size(&self) -> usize;

    /// Tokens in text order with non-overlapping char offsets.
    fn tokenize(&self, text: &str) -> Vec<Token>;

    /// Tokenizers that need pre-segmented words override this; everything
    /// else ignores the boundaries.
    fn tokenize_with_words(
        &self,
        text: &str,
        _words: Option<&[(usize, usize)]>,
    ) -> Result<Vec<Token>, DataError> {
        Ok(self.tokenize(text))
    }
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn hash_piece(piece: &str, vocab_size: usize) -> usize {
    (fnv1a(piece.as_bytes()) % vocab_size as u64) as usize
}

fn pieces_to_tokens(chars: &[char], spans: Vec<(usize, usize)>, vocab: usize) -> Vec<Token> {
    spans
        .into_iter()
        .map(|(start, end)| {
            let piece: String = chars[start..end].iter().collect();
            Token {
                id: hash_piece(&piece, vocab),
                start,
                end,
            }
        })
        .collect()
}

/// Maximal runs of non-whitespace characters.
pub fn whitespace_offsets(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    let mut n = 0;
    for (i, c) in text.chars().enumerate() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
        n = i + 1;
    }
    if let Some(s) = start {
        out.push((s, n));
    }
    out
}

/// Non-overlapping `n`-character chunks of every whitespace-delimited run.
/// On text without spaces this chunks the whole string, emulating subword
/// splitting in scripts that do not mark word boundaries.
pub fn char_ngram_offsets(text: &str, n: usize) -> Vec<(usize, usize)> {
    let n = n.max(1);
    whitespace_offsets(text)
        .into_iter()
        .flat_map(|(s, e)| (s..e).step_by(n).map(move |i| (i, (i + n).min(e))))
        .collect()
}

#[derive(Clone, Debug)]
pub struct WhitespaceTokenizer {
    pub vocab_size: usize,
}

impl SubwordTokenizer for WhitespaceTokenizer {
    fn name(&self) -> String {
        "whitespace".into()
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn tokenize(&self, text: &str) -> Vec<Token> {
        let chars: Vec<char> = text.chars().collect();
        pieces_to_tokens(&chars, whitespace_offsets(text), self.vocab_size)
    }
}

#[derive(Clone, Debug)]
pub struct CharNgramTokenizer {
    pub n: usize,
    pub vocab_size: usize,
}

impl SubwordTokenizer for CharNgramTokenizer {
    fn name(&self) -> String {
        format!("char_ngram:{}", self.n)
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn tokenize(&self, text: &str) -> Vec<Token> {
        let chars: Vec<char> = text.chars().collect();
        pieces_to_tokens(&chars, char_ngram_offsets(text, self.n), self.vocab_size)
    }
}

/// Uses the word extents shipped with each record as tokens.
#[derive(Clone, Debug)]
pub struct ExternalOffsetsTokenizer {
    pub vocab_size: usize,
}

impl SubwordTokenizer for ExternalOffsetsTokenizer {
    fn name(&self) -> String {
        "external".into()
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Without word extents there is nothing to go on but whitespace.
    fn tokenize(&self, text: &str) -> Vec<Token> {
        WhitespaceTokenizer {
            vocab_size: self.vocab_size,
        }
        .tokenize(text)
    }

    fn tokenize_with_words(
        &self,
        text: &str,
        words: Option<&[(usize, usize)]>,
    ) -> Result<Vec<Token>, DataError> {
        let words = words.ok_or(DataError::MissingWordBoundaries)?;
        let chars: Vec<char> = text.chars().collect();
        let mut spans = words.to_vec();
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(DataError::OverlappingWords(w[0], w[1]));
            }
        }
        Ok(pieces_to_tokens(&chars, spans, self.vocab_size))
    }
}

/// Serializable tokenizer selection: `whitespace`, `char_ngram:N` or
/// `external`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TokenizerKind {
    Whitespace,
    CharNgram(usize),
    External,
}

impl TokenizerKind {
    pub fn build(self, vocab_size: usize) -> Box<dyn SubwordTokenizer> {
        match self {
            Self::Whitespace => Box::new(WhitespaceTokenizer { vocab_size }),
            Self::CharNgram(n) => Box::new(CharNgramTokenizer { n, vocab_size }),
            Self::External => Box::new(ExternalOffsetsTokenizer { vocab_size }),
        }
    }
}

impl fmt::Display for TokenizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Whitespace => f.write_str("whitespace"),
            Self::CharNgram(n) => write!(f, "char_ngram:{n}"),
            Self::External => f.write_str("external"),
        }
    }
}

impl FromStr for TokenizerKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "whitespace" {
            return Ok(Self::Whitespace);
        }
        if s == "external" {
            return Ok(Self::External);
        }
        let rest = s
            .strip_prefix("char_ngram")
            .ok_or_else(|| DataError::UnknownTokenizer(s.to_string()))?;
        let digits = rest
            .trim_start_matches([':', '('])
            .trim_end_matches(')');
        match digits.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Self::CharNgram(n)),
            _ => Err(DataError::UnknownTokenizer(s.to_string())),
        }
    }
}

impl Serialize for TokenizerKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TokenizerKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Picks a tokenizer per language, falling back to a default. All
/// tokenizers share one hashed vocabulary. Label descriptions are tokenized
/// with the default.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub default: TokenizerKind,
    pub vocab_size: usize,
    #[serde(default)]
    pub by_language: BTreeMap<String, TokenizerKind>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            default: TokenizerKind::Whitespace,
            vocab_size: 4096,
            by_language: BTreeMap::new(),
        }
    }
}

impl TokenizerConfig {
    pub fn kind_for(&self, language: &str) -> TokenizerKind {
        self.by_language
            .get(language)
            .copied()
            .unwrap_or(self.default)
    }

    pub fn for_language(&self, language: &str) -> Box<dyn SubwordTokenizer> {
        self.kind_for(language).build(self.vocab_size)
    }

    pub fn label_tokenizer(&self) -> Box<dyn SubwordTokenizer> {
        let kind = match self.default {
            TokenizerKind::External => TokenizerKind::Whitespace,
            k => k,
        };
        kind.build(self.vocab_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn offsets(tokens: &[Token]) -> Vec<(usize, usize)> {
        tokens.iter().map(|t| (t.start, t.end)).collect()
    }

    #[test]
    fn whitespace_examples() {
        let tok = WhitespaceTokenizer { vocab_size: 100 };
        assert_eq!(offsets(&tok.tokenize("Berlin is")), vec![(0, 6), (7, 9)]);
        assert!(tok.tokenize("").is_empty());
        assert_eq!(offsets(&tok.tokenize("  a  bc ")), vec![(2, 3), (5, 7)]);
    }

    #[test]
    fn ngram_examples() {
        let tok = CharNgramTokenizer {
            n: 2,
            vocab_size: 100,
        };
        assert_eq!(offsets(&tok.tokenize("abcd")), vec![(0, 2), (2, 4)]);
        assert_eq!(offsets(&tok.tokenize("abc de")), vec![(0, 2), (2, 3), (4, 6)]);
        assert!(tok.tokenize("").is_empty());
    }

    #[test]
    fn offsets_count_chars_not_bytes() {
        let tok = WhitespaceTokenizer { vocab_size: 100 };
        assert_eq!(offsets(&tok.tokenize("東京 は")), vec![(0, 2), (3, 4)]);
    }

    #[test]
    fn ids_are_deterministic_and_bounded() {
        let tok = WhitespaceTokenizer { vocab_size: 17 };
        let a = tok.tokenize("Paris Paris London");
        assert_eq!(a[0].id, a[1].id);
        assert!(a.iter().all(|t| t.id < 17));
        assert_eq!(a, tok.tokenize("Paris Paris London"));
    }

    #[test]
    fn external_uses_word_extents() {
        let tok = ExternalOffsetsTokenizer { vocab_size: 50 };
        let t = tok
            .tokenize_with_words("北京大学", Some(&[(2, 4), (0, 2)]))
            .unwrap();
        assert_eq!(offsets(&t), vec![(0, 2), (2, 4)]);
        assert!(tok.tokenize_with_words("abc", None).is_err());
    }

    #[test]
    fn kind_parsing_round_trips() {
        for s in ["whitespace", "char_ngram:3", "external"] {
            assert_eq!(s.parse::<TokenizerKind>().unwrap().to_string(), s);
        }
        assert_eq!(
            "char_ngram(2)".parse::<TokenizerKind>().unwrap(),
            TokenizerKind::CharNgram(2)
        );
        assert!("bpe".parse::<TokenizerKind>().is_err());
        assert!("char_ngram:0".parse::<TokenizerKind>().is_err());
    }
}
