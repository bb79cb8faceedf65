#![allow(dead_code)]

use std::sync::Arc;

use sciedkit::checkpoint::Checkpoint;
use sciedkit::corpus::{Corpus, DomainTag};
use sciedkit::model::ModelConfig;
use sciedkit::tensor::Scalar;
use sciedkit::tokenizer::Vocabulary;

const SUBJECTS: [&str; 8] = ["the cat", "a dog", "my friend", "the teacher", "our robot", "that bird", "the farmer", "a student"];
const VERBS: [&str; 8] = ["sees", "likes", "paints", "finds", "carries", "watches", "counts", "draws"];
const OBJECTS: [&str; 8] = ["red apples", "old boats", "tiny stars", "green leaves", "heavy stones", "blue kites", "warm bread", "wet sand"];
const PLACES: [&str; 4] = ["near the river", "in the garden", "after school", "on the hill"];

/// 32 short sentences with a small, fully covered vocabulary.
pub fn overfit_sentences() -> Vec<String> {
    (0..32)
        .map(|i| {
            format!(
                "{} {} {} {}.",
                SUBJECTS[i % 8],
                VERBS[(i * 3 + i / 8) % 8],
                OBJECTS[(i * 5 + 1) % 8],
                PLACES[i / 8]
            )
        })
        .collect()
}

pub fn corpus(id: &str, docs: Vec<String>, tag: DomainTag) -> Corpus {
    Corpus::new(id, docs, tag).unwrap()
}

pub fn vocab_for(docs: &[String]) -> Arc<Vocabulary> {
    Arc::new(Vocabulary::build(docs.iter().map(String::as_str), 400, 1).unwrap())
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        max_len: 24,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        n_layers: 1,
        n_classes: 2,
        ..Default::default()
    }
}

pub fn fresh<T: Scalar>(config: ModelConfig, vocab: Arc<Vocabulary>, seed: u64) -> Checkpoint<T> {
    Checkpoint::fresh(config, vocab, seed).unwrap()
}
