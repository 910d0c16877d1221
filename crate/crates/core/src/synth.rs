//! Templated two-attribute corpora: `<det> <noun> is <polarity>`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{AttributeLabel, NounLexicon, TextCorpus, TextSentence};

pub const DETERMINERS: &[&str] = &["the", "this", "that", "our", "my"];

pub const NOUNS: &[&str] = &[
    "food", "service", "staff", "pizza", "burger", "waiter", "menu", "room", "place", "coffee",
    "pasta", "salad", "bar", "price", "owner", "music", "table", "dessert", "steak", "manager",
    "sushi", "bread", "wine", "decor", "patio", "soup", "lobby", "chef", "breakfast", "location",
];

pub const NEGATIVE: &[&str] = &[
    "awful", "bad", "terrible", "horrible", "rude", "bland", "dirty", "slow", "boring", "mediocre",
];

pub const POSITIVE: &[&str] = &[
    "great", "good", "amazing", "excellent", "friendly", "tasty", "clean", "fast", "fun", "fresh",
];

fn polarity(label: AttributeLabel) -> &'static [&'static str] {
    if label == AttributeLabel::ZERO {
        NEGATIVE
    } else {
        POSITIVE
    }
}

/// `per_label` sentences of each attribute, interleaved 0,1,0,1,… .
pub fn corpus(per_label: usize, seed: u64) -> TextCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sentences = Vec::with_capacity(2 * per_label);
    for _ in 0..per_label {
        for label in [AttributeLabel::ZERO, AttributeLabel::ONE] {
            let words = [
                *DETERMINERS.choose(&mut rng).expect("nonempty"),
                *NOUNS.choose(&mut rng).expect("nonempty"),
                "is",
                *polarity(label).choose(&mut rng).expect("nonempty"),
            ];
            sentences.push(TextSentence {
                words: words.iter().map(|w| w.to_string()).collect(),
                label,
            });
        }
    }
    TextCorpus { sentences }
}

pub fn lexicon() -> NounLexicon {
    NounLexicon::new(NOUNS.iter().copied())
}

/// Every surface word the generator can emit.
pub fn words() -> Vec<&'static str> {
    let mut w: Vec<&str> = DETERMINERS.iter().chain(NOUNS).copied().collect();
    w.push("is");
    w.extend(NEGATIVE);
    w.extend(POSITIVE);
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_lexicons() {
        let c = corpus(50, 3);
        assert_eq!((c.m(), c.n()), (50, 50));
        assert_eq!(words().len(), 56);
        for s in &c.sentences {
            assert_eq!(s.words.len(), 4);
            assert!(NOUNS.contains(&s.words[1].as_str()));
            assert!(polarity(s.label).contains(&s.words[3].as_str()));
        }
        assert!(NEGATIVE.iter().all(|w| !POSITIVE.contains(w)));
        assert_eq!(corpus(50, 3), c);
    }
}
