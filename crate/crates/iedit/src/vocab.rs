//! Whitespace word-level tokenizer over a fixed toy vocabulary.
//!
//! The vocabulary holds 64 ordinary words plus a reserved range of concept
//! slots; concept markers are literal tokens like `<s*>` that tokenize into
//! the reserved range.

use crate::error::{Error, Result};

/// Ordinary words, in token-id order. Grammar words first, then the verbs,
/// object nouns and background nouns used by the procedural scenes, then
/// color words and filler so the table is a stable 64 entries.
pub const WORDS: [&str; 64] = [
    "a", "photo", "of", "and", "at", "the", "on", "with", "person", // grammar + subject noun
    "hold", "ride", "kick", "throw", "lift", // interaction verbs
    "ball", "board", "block", "ring", // object nouns
    "field", "room", "court", "beach", // background nouns
    "red", "green", "blue", "yellow", "purple", "orange", "cyan", "magenta", "white", "gray",
    // filler words keep the table at its fixed size and give the tokenizer
    // a believable spread of non-scene vocabulary
    "small", "big", "dark", "light", "shiny", "plain", "dog", "cat", "horse", "cake", "pizza",
    "book", "chair", "table", "wall", "floor", "sky", "grass", "sand", "wood", "stone", "metal",
    "glass", "paper", "round", "flat", "tall", "wide", "near", "far", "old", "new",
];

/// Reserved concept-slot markers, appended after [`WORDS`].
pub const CONCEPT_MARKERS: [&str; 8] = [
    "<s*>", "<o*>", "<bg*>", "<c*>", "<r1*>", "<r2*>", "<r3*>", "<r4*>",
];

pub const VOCAB_WORDS: usize = WORDS.len();
pub const RESERVED_SLOTS: usize = CONCEPT_MARKERS.len();
pub const VOCAB_SIZE: usize = VOCAB_WORDS + RESERVED_SLOTS;

/// Interaction verbs understood by the toy scenes and the benchmark.
pub const VERBS: [&str; 5] = ["hold", "ride", "kick", "throw", "lift"];
pub const OBJECT_NOUNS: [&str; 4] = ["ball", "board", "block", "ring"];
pub const BACKGROUND_NOUNS: [&str; 4] = ["field", "room", "court", "beach"];

pub fn token_id(word: &str) -> Option<usize> {
    if let Some(i) = WORDS.iter().position(|w| *w == word) {
        return Some(i);
    }
    CONCEPT_MARKERS
        .iter()
        .position(|w| *w == word)
        .map(|i| VOCAB_WORDS + i)
}

pub fn word_of(id: usize) -> Option<&'static str> {
    if id < VOCAB_WORDS {
        Some(WORDS[id])
    } else if id < VOCAB_SIZE {
        Some(CONCEPT_MARKERS[id - VOCAB_WORDS])
    } else {
        None
    }
}

pub fn is_concept_id(id: usize) -> bool {
    (VOCAB_WORDS..VOCAB_SIZE).contains(&id)
}

pub fn is_verb(word: &str) -> bool {
    VERBS.contains(&word)
}

/// Tokenize a whitespace-separated prompt. A trailing period on a word is
/// dropped; unknown words report the full vocabulary so callers can see what
/// the toy model understands.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    for raw in text.split_whitespace() {
        let word = raw.trim_end_matches('.');
        if word.is_empty() {
            continue;
        }
        match token_id(word) {
            Some(id) => ids.push(id),
            None => {
                return Err(Error::UnknownToken {
                    word: word.to_string(),
                    vocabulary: WORDS.join(" "),
                })
            }
        }
    }
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_is_exactly_64_plus_8() {
        assert_eq!(VOCAB_WORDS, 64);
        assert_eq!(RESERVED_SLOTS, 8);
        assert_eq!(VOCAB_SIZE, 72);
        // no duplicates
        for (i, w) in WORDS.iter().enumerate() {
            assert_eq!(WORDS.iter().position(|x| x == w), Some(i), "dup {w}");
        }
    }

    #[test]
    fn tokenize_roundtrips_and_strips_period() {
        let ids = tokenize("a photo of <s*> ride <o*> at <bg*>.").unwrap();
        let words: Vec<_> = ids.iter().map(|&i| word_of(i).unwrap()).collect();
        assert_eq!(
            words,
            ["a", "photo", "of", "<s*>", "ride", "<o*>", "at", "<bg*>"]
        );
        assert!(is_concept_id(ids[3]));
        assert!(!is_concept_id(ids[0]));
    }

    #[test]
    fn unknown_word_lists_vocabulary() {
        let err = tokenize("a photo of zebra").unwrap_err();
        match err {
            Error::UnknownToken { word, vocabulary } => {
                assert_eq!(word, "zebra");
                assert!(vocabulary.contains("ride"));
                assert!(vocabulary.contains("person"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
