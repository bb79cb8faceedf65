//! Shared fixtures for the criterion benchmarks.

use std::sync::Arc;

use sciedkit::corpus::{Corpus, DomainTag};
use sciedkit::Vocabulary;

const WORDS: [&str; 24] = [
    "the", "cat", "dog", "sees", "likes", "paints", "river", "garden", "stone", "apple", "water", "light",
    "energy", "moves", "heat", "cold", "plant", "grows", "slowly", "quickly", "near", "under", "bright", "dark",
];

/// Deterministic values in (-1, 1).
pub fn values(n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|i| (i as f64 * 0.618 + phase).sin()).collect()
}

/// `n` sentences of 8 to 15 words.
pub fn sentences(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            let len = 8 + i % 8;
            (0..len)
                .map(|j| WORDS[(i * 7 + j * 5 + j * j) % WORDS.len()])
                .collect::<Vec<_>>()
                .join(" ")
                + "."
        })
        .collect()
}

pub fn corpus(n: usize) -> Corpus {
    Corpus::new("bench", sentences(n), DomainTag::General).expect("non-empty corpus")
}

pub fn vocab(docs: &[String]) -> Arc<Vocabulary> {
    Arc::new(Vocabulary::build(docs.iter().map(String::as_str), 400, 1).expect("vocabulary"))
}
