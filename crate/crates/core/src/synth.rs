//! Seeded toy corpora for smoke tests and trainability checks.
//!
//! Two languages are produced. `en` separates words with spaces. `zz` writes
//! words back to back and ships explicit word boundaries. Every word is
//! built from two-character syllables, so a character 2-gram tokenizer
//! splits words without ever crossing a word boundary.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{EntityAnnotation, RawExample};

pub const LABELS: [&str; 5] = ["person", "city", "company", "weekday", "drink"];
pub const LANGUAGES: [&str; 2] = ["en", "zz"];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Word pools shared by every corpus, so separately seeded corpora draw
/// entities from the same inventory.
#[derive(Clone, Debug)]
pub struct Lexicon {
    pub filler: Vec<String>,
    /// One pool per entry of [`LABELS`].
    pub entities: Vec<Vec<String>>,
}

impl Lexicon {
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut seen = std::collections::HashSet::new();
        let mut word = |rng: &mut ChaCha8Rng, syllables: usize| loop {
            let w: String = (0..syllables)
                .flat_map(|_| {
                    [
                        CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char,
                        VOWELS[rng.gen_range(0..VOWELS.len())] as char,
                    ]
                })
                .collect();
            if seen.insert(w.clone()) {
                return w;
            }
        };
        let filler = (0..24)
            .map(|i| word(&mut rng, 1 + i % 3))
            .collect();
        let entities = LABELS
            .iter()
            .map(|_| (0..4).map(|i| word(&mut rng, 2 + i % 2)).collect())
            .collect();
        Self { filler, entities }
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::new()
    }
}

/// `n` examples alternating between the two languages. Each holds 1 to 3
/// entities and 5 to 9 words.
pub fn synth_corpus(n: usize, seed: u64) -> Vec<RawExample> {
    let lex = Lexicon::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| synth_example(&lex, LANGUAGES[i % 2], &mut rng))
        .collect()
}

fn synth_example(lex: &Lexicon, language: &str, rng: &mut ChaCha8Rng) -> RawExample {
    let spaced = language == "en";
    let n_entities = rng.gen_range(1..=3);
    let n_filler = rng.gen_range(4..=6);

    // Slots: entities never sit next to each other.
    let mut slots: Vec<Option<usize>> = vec![None; n_filler];
    let mut gaps: Vec<usize> = (0..=n_filler).collect();
    gaps.shuffle(rng);
    let mut chosen: Vec<usize> = gaps[..n_entities].to_vec();
    chosen.sort_unstable_by(|a, b| b.cmp(a));
    for g in chosen {
        slots.insert(g, Some(rng.gen_range(0..LABELS.len())));
    }

    let mut text = String::new();
    let mut entities = Vec::new();
    let mut words = Vec::new();
    for slot in slots {
        let pieces: Vec<&str> = match slot {
            None => vec![lex.filler.choose(rng).unwrap()],
            Some(label) => {
                let pool = &lex.entities[label];
                let len = if spaced { rng.gen_range(1..=2) } else { 1 };
                (0..len).map(|_| pool.choose(rng).unwrap().as_str()).collect()
            }
        };
        let ent_start = text.len() + usize::from(spaced && !text.is_empty());
        for p in pieces {
            if spaced && !text.is_empty() {
                text.push(' ');
            }
            words.push((text.len(), text.len() + p.len()));
            text.push_str(p);
        }
        if let Some(label) = slot {
            entities.push(EntityAnnotation {
                start: ent_start,
                end: text.len(),
                label: LABELS[label].to_string(),
            });
        }
    }
    RawExample {
        text,
        entities,
        language: language.to_string(),
        word_boundaries: (!spaced).then_some(words),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let a = synth_corpus(20, 3);
        assert_eq!(a, synth_corpus(20, 3));
        assert_ne!(a, synth_corpus(20, 4));
        for ex in &a {
            ex.validate().unwrap();
            assert!(!ex.entities.is_empty());
        }
    }

    #[test]
    fn languages_alternate() {
        let c = synth_corpus(4, 1);
        assert_eq!(c[0].language, "en");
        assert!(c[0].text.contains(' '));
        assert!(c[0].word_boundaries.is_none());
        assert_eq!(c[1].language, "zz");
        assert!(!c[1].text.contains(' '));
        let words = c[1].word_boundaries.as_ref().unwrap();
        assert_eq!(words.first().unwrap().0, 0);
        assert_eq!(words.last().unwrap().1, c[1].text.len());
        assert!(words.iter().all(|(s, e)| (e - s) % 2 == 0));
    }

    #[test]
    fn entities_point_at_pool_words() {
        let lex = Lexicon::new();
        for ex in synth_corpus(10, 9) {
            for e in &ex.entities {
                let label = LABELS.iter().position(|l| *l == e.label).unwrap();
                for w in ex.text[e.start..e.end].split(' ') {
                    assert!(lex.entities[label].iter().any(|p| p == w));
                }
            }
        }
    }
}
