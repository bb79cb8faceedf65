//! Synthetic domain-shift benchmark.
//!
//! Three dialects share a base of function words: A (general, topical
//! prose), B (student-like, carrying the concept categories) and C
//! (off-domain, topical prose with its own words). Each concept category
//! has a set of interchangeable synonyms and a set of context words. In
//! corpus B synonyms are used uniformly next to their category's context
//! words; task responses use the synonyms alone, Zipf-skewed, so rare
//! synonyms are seldom seen during fine-tuning. A response's label is the
//! number of distinct categories it mentions, capped at `n_classes - 1`.

use std::collections::{HashMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use super::{Corpus, DomainTag, LabeledExample, ScoringTask};
use crate::error::{Error, Result};
use crate::tokenizer::normalize;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptCategory {
    pub synonyms: Vec<String>,
    pub context: Vec<String>,
}

/// Word inventories of the benchmark.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    pub base: Vec<String>,
    pub a: Vec<String>,
    pub b: Vec<String>,
    pub c: Vec<String>,
    pub categories: Vec<ConceptCategory>,
}

impl Lexicon {
    /// Every word that may only occur in dialect B.
    pub fn b_exclusive(&self) -> HashSet<&str> {
        self.b
            .iter()
            .chain(self.categories.iter().flat_map(|c| c.synonyms.iter().chain(&c.context)))
            .map(String::as_str)
            .collect()
    }

    fn sets(&self) -> Vec<(String, &[String])> {
        let mut v: Vec<(String, &[String])> = vec![
            ("base".into(), &self.base),
            ("A".into(), &self.a),
            ("B".into(), &self.b),
            ("C".into(), &self.c),
        ];
        for (i, c) in self.categories.iter().enumerate() {
            v.push((format!("category {i} synonyms"), &c.synonyms));
            v.push((format!("category {i} context"), &c.context));
        }
        v
    }

    /// Checks that all word sets are non-empty, pairwise disjoint and made
    /// of single lowercase words.
    pub fn validate(&self) -> Result<()> {
        let mut owner: HashMap<&str, String> = HashMap::new();
        if self.categories.is_empty() {
            return Err(Error::Spec("lexicon has no concept categories".into()));
        }
        for (name, words) in self.sets() {
            if words.is_empty() {
                return Err(Error::Spec(format!("lexicon set {name} is empty")));
            }
            for w in words {
                if w.is_empty() || normalize(w) != *w || w.contains(' ') || w.ends_with('.') {
                    return Err(Error::Spec(format!("lexicon word {w:?} in {name} is not a normalized single word")));
                }
                if let Some(prev) = owner.insert(w, name.clone()) {
                    if prev == name {
                        return Err(Error::Spec(format!("word {w:?} repeated in {name}")));
                    }
                    return Err(Error::Spec(format!("word {w:?} appears in both {prev} and {name}")));
                }
            }
        }
        Ok(())
    }

    /// Category index of every synonym.
    pub fn synonym_index(&self) -> HashMap<&str, usize> {
        self.categories
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.synonyms.iter().map(move |s| (s.as_str(), i)))
            .collect()
    }
}

/// Number of distinct categories whose synonyms occur in `text`.
pub fn count_categories(text: &str, lexicon: &Lexicon) -> usize {
    let index = lexicon.synonym_index();
    let mut seen = vec![false; lexicon.categories.len()];
    for word in normalize(text).split(' ') {
        let w = word.trim_matches(|c: char| c.is_ascii_punctuation());
        if let Some(&c) = index.get(w) {
            seen[c] = true;
        }
    }
    seen.iter().filter(|&&s| s).count()
}

/// Label of a response under the capped category-count rule.
pub fn oracle_label(text: &str, lexicon: &Lexicon, n_classes: usize) -> usize {
    count_categories(text, lexicon).min(n_classes.saturating_sub(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmarkSpec {
    pub seed: u64,
    pub base_words: usize,
    pub a_words: usize,
    pub b_words: usize,
    pub c_words: usize,
    /// Topic clusters in dialects A and C.
    pub topics: usize,
    pub n_categories: usize,
    pub synonyms_per_category: usize,
    pub context_words_per_category: usize,
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
    pub corpus_a_sentences: usize,
    pub corpus_b_sentences: usize,
    pub corpus_c_sentences: usize,
    pub n_tasks: usize,
    pub examples_per_task: usize,
    pub n_classes: usize,
    /// `category_count_weights[k]`: relative frequency of responses that
    /// mention `k` distinct categories.
    pub category_count_weights: Vec<f64>,
    /// Zipf exponent of synonym choice in task responses.
    pub synonym_zipf: f64,
    /// Use these words instead of generated pseudo-words.
    pub lexicon: Option<Lexicon>,
}

impl Default for SyntheticBenchmarkSpec {
    fn default() -> Self {
        SyntheticBenchmarkSpec {
            seed: 2024,
            base_words: 60,
            a_words: 200,
            b_words: 100,
            c_words: 200,
            topics: 8,
            n_categories: 4,
            synonyms_per_category: 24,
            context_words_per_category: 6,
            min_sentence_len: 8,
            max_sentence_len: 16,
            corpus_a_sentences: 20_000,
            corpus_b_sentences: 5_000,
            corpus_c_sentences: 5_000,
            n_tasks: 4,
            examples_per_task: 750,
            n_classes: 3,
            category_count_weights: vec![0.3, 0.35, 0.25, 0.1],
            synonym_zipf: 1.1,
            lexicon: None,
        }
    }
}

impl SyntheticBenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_words", self.base_words),
            ("a_words", self.a_words),
            ("b_words", self.b_words),
            ("c_words", self.c_words),
            ("topics", self.topics),
            ("n_categories", self.n_categories),
            ("synonyms_per_category", self.synonyms_per_category),
            ("context_words_per_category", self.context_words_per_category),
            ("min_sentence_len", self.min_sentence_len),
            ("corpus_a_sentences", self.corpus_a_sentences),
            ("corpus_b_sentences", self.corpus_b_sentences),
            ("corpus_c_sentences", self.corpus_c_sentences),
            ("n_tasks", self.n_tasks),
            ("examples_per_task", self.examples_per_task),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Spec(format!("{name} must be positive")));
            }
        }
        if self.max_sentence_len < self.min_sentence_len {
            return Err(Error::Spec("max_sentence_len below min_sentence_len".into()));
        }
        let w = &self.category_count_weights;
        if w.is_empty() || w.len() > self.n_categories + 1 {
            return Err(Error::Spec(format!(
                "category_count_weights needs 1..={} entries, got {}",
                self.n_categories + 1,
                w.len()
            )));
        }
        if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Spec("category_count_weights must be non-negative with a positive sum".into()));
        }
        if !(self.synonym_zipf >= 0.0) {
            return Err(Error::Spec("synonym_zipf must be non-negative".into()));
        }
        if let Some(lex) = &self.lexicon {
            lex.validate()?;
            if lex.categories.len() != self.n_categories {
                return Err(Error::Spec(format!(
                    "lexicon has {} categories, spec says {}",
                    lex.categories.len(),
                    self.n_categories
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub lexicon: Lexicon,
    pub corpus_a: Corpus,
    pub corpus_b: Corpus,
    pub corpus_c: Corpus,
    pub tasks: Vec<ScoringTask>,
}

struct WordFactory {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl WordFactory {
    fn word(&mut self, min_syll: usize, max_syll: usize) -> String {
        loop {
            let n = self.rng.random_range(min_syll..=max_syll);
            let mut w = String::with_capacity(2 * n);
            for _ in 0..n {
                w.push(*CONSONANTS.choose(&mut self.rng).expect("non-empty") as char);
                w.push(*VOWELS.choose(&mut self.rng).expect("non-empty") as char);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn words(&mut self, n: usize, min_syll: usize, max_syll: usize) -> Vec<String> {
        (0..n).map(|_| self.word(min_syll, max_syll)).collect()
    }
}

fn generate_lexicon(spec: &SyntheticBenchmarkSpec, rng: &mut ChaCha8Rng) -> Lexicon {
    let mut f = WordFactory {
        rng: ChaCha8Rng::seed_from_u64(rng.random()),
        used: HashSet::new(),
    };
    let base = f.words(spec.base_words, 1, 2);
    let a = f.words(spec.a_words, 2, 3);
    let b = f.words(spec.b_words, 2, 3);
    let c = f.words(spec.c_words, 2, 3);
    let categories = (0..spec.n_categories)
        .map(|_| ConceptCategory {
            synonyms: f.words(spec.synonyms_per_category, 2, 3),
            context: f.words(spec.context_words_per_category, 2, 3),
        })
        .collect();
    Lexicon {
        base,
        a,
        b,
        c,
        categories,
    }
}

/// Zipf-weighted choice over a word list.
struct ZipfPick {
    dist: Zipf<f64>,
}

impl ZipfPick {
    fn new(n: usize, s: f64) -> Self {
        ZipfPick {
            dist: Zipf::new(n as f64, s).expect("n >= 1 and s >= 0"),
        }
    }

    fn index(&self, rng: &mut ChaCha8Rng) -> usize {
        self.dist.sample(rng) as usize - 1
    }
}

fn finish_sentence(words: Vec<&str>) -> String {
    let mut s = words.join(" ");
    s.push('.');
    s
}

fn sentence_len(spec: &SyntheticBenchmarkSpec, rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(spec.min_sentence_len..=spec.max_sentence_len)
}

/// Topical prose: each sentence draws content words from one topic.
fn topical_corpus(
    id: &str,
    tag: DomainTag,
    n: usize,
    content: &[String],
    base: &[String],
    spec: &SyntheticBenchmarkSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Corpus> {
    let topics: Vec<&[String]> = content
        .chunks(content.len().div_ceil(spec.topics))
        .collect();
    let base_pick = ZipfPick::new(base.len(), 1.0);
    let docs = (0..n)
        .map(|_| {
            let topic = topics[rng.random_range(0..topics.len())];
            let topic_pick = ZipfPick::new(topic.len(), 0.8);
            let len = sentence_len(spec, rng);
            let words = (0..len)
                .map(|_| {
                    if rng.random_bool(0.45) {
                        topic[topic_pick.index(rng)].as_str()
                    } else {
                        base[base_pick.index(rng)].as_str()
                    }
                })
                .collect();
            finish_sentence(words)
        })
        .collect();
    Corpus::new(id, docs, tag)
}

/// Filler words of a B-dialect sentence: base and B words.
fn b_filler<'a>(lex: &'a Lexicon, len: usize, base_pick: &ZipfPick, b_pick: &ZipfPick, rng: &mut ChaCha8Rng) -> Vec<&'a str> {
    (0..len)
        .map(|_| {
            if rng.random_bool(0.5) {
                lex.b[b_pick.index(rng)].as_str()
            } else {
                lex.base[base_pick.index(rng)].as_str()
            }
        })
        .collect()
}

fn insert_at_random<'a>(words: &mut Vec<&'a str>, extra: Vec<&'a str>, rng: &mut ChaCha8Rng) {
    for w in extra {
        let pos = rng.random_range(0..=words.len());
        words.insert(pos, w);
    }
}

fn corpus_b(spec: &SyntheticBenchmarkSpec, lex: &Lexicon, rng: &mut ChaCha8Rng) -> Result<Corpus> {
    let base_pick = ZipfPick::new(lex.base.len(), 1.0);
    let b_pick = ZipfPick::new(lex.b.len(), 1.0);
    let n_cat = lex.categories.len();
    let docs = (0..spec.corpus_b_sentences)
        .map(|_| {
            let len = sentence_len(spec, rng);
            let n_mentioned = if n_cat > 1 && rng.random_bool(0.2) { 2 } else { 1 };
            let mut cats: Vec<usize> = (0..n_cat).collect();
            cats.shuffle(rng);
            let mut extra = Vec::new();
            for &c in &cats[..n_mentioned] {
                let cat = &lex.categories[c];
                for _ in 0..rng.random_range(3..=5) {
                    extra.push(cat.synonyms.choose(rng).expect("non-empty").as_str());
                }
                for _ in 0..rng.random_range(1..=2) {
                    extra.push(cat.context.choose(rng).expect("non-empty").as_str());
                }
            }
            let filler = (len / 2).saturating_sub(extra.len()).max(2);
            let mut words = b_filler(lex, filler, &base_pick, &b_pick, rng);
            insert_at_random(&mut words, extra, rng);
            finish_sentence(words)
        })
        .collect();
    Corpus::new("corpus_B", docs, DomainTag::InDomain)
}

fn task(index: usize, spec: &SyntheticBenchmarkSpec, lex: &Lexicon, rng: &mut ChaCha8Rng) -> Result<ScoringTask> {
    let base_pick = ZipfPick::new(lex.base.len(), 1.0);
    let b_pick = ZipfPick::new(lex.b.len(), 1.0);
    let n_syn: Vec<usize> = lex.categories.iter().map(|c| c.synonyms.len()).collect();
    // per-task synonym popularity order
    let orders: Vec<Vec<usize>> = n_syn
        .iter()
        .map(|&n| {
            let mut o: Vec<usize> = (0..n).collect();
            o.shuffle(rng);
            o
        })
        .collect();
    let picks: Vec<ZipfPick> = n_syn.iter().map(|&n| ZipfPick::new(n, spec.synonym_zipf)).collect();
    let weights = &spec.category_count_weights;
    let total: f64 = weights.iter().sum();
    let n_cat = lex.categories.len();
    let mut examples = Vec::with_capacity(spec.examples_per_task);
    for _ in 0..spec.examples_per_task {
        let mut u = rng.random::<f64>() * total;
        let mut k = weights.len() - 1;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                k = i;
                break;
            }
            u -= w;
        }
        let mut cats: Vec<usize> = (0..n_cat).collect();
        cats.shuffle(rng);
        let mut extra = Vec::new();
        for &c in &cats[..k] {
            // a lone category is often restated with several synonyms, so
            // counting mentions is not a shortcut to the label
            let mentions = if k == 1 {
                rng.random_range(1..=3)
            } else {
                rng.random_range(1..=2)
            };
            for _ in 0..mentions {
                let s = orders[c][picks[c].index(rng)];
                extra.push(lex.categories[c].synonyms[s].as_str());
            }
        }
        let len = sentence_len(spec, rng);
        let filler = len.saturating_sub(extra.len()).max(2);
        let mut words = b_filler(lex, filler, &base_pick, &b_pick, rng);
        insert_at_random(&mut words, extra, rng);
        let label = k.min(spec.n_classes - 1);
        examples.push(LabeledExample {
            text: finish_sentence(words),
            label,
        });
    }
    let mut t = ScoringTask::new(format!("task_{}", index + 1), examples, spec.n_classes)?;
    t.provenance = format!("synthetic benchmark seed {} task {}", spec.seed, index + 1);
    Ok(t)
}

/// Generates corpora A, B, C and the scoring tasks. Identical specs give
/// identical output.
pub fn generate_benchmark(spec: &SyntheticBenchmarkSpec) -> Result<Benchmark> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let lexicon = match &spec.lexicon {
        Some(l) => {
            let _ = master.random::<u64>();
            l.clone()
        }
        None => generate_lexicon(spec, &mut master),
    };
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(spec.seed);
        r.set_stream(k + 1);
        r
    };
    let corpus_a = topical_corpus(
        "corpus_A",
        DomainTag::General,
        spec.corpus_a_sentences,
        &lexicon.a,
        &lexicon.base,
        spec,
        &mut stream(0),
    )?;
    let corpus_b = corpus_b(spec, &lexicon, &mut stream(1))?;
    let corpus_c = topical_corpus(
        "corpus_C",
        DomainTag::OffDomain,
        spec.corpus_c_sentences,
        &lexicon.c,
        &lexicon.base,
        spec,
        &mut stream(2),
    )?;
    let tasks = (0..spec.n_tasks)
        .map(|i| task(i, spec, &lexicon, &mut stream(3 + i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Benchmark {
        lexicon,
        corpus_a,
        corpus_b,
        corpus_c,
        tasks,
    })
}
