//! Flat `key = value` run configuration with a per-command key schema.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corpus::{DomainTag, SyntheticBenchmarkSpec};
use crate::error::{Error, Result};
use crate::eval::{finetune_pairs, masking_pairs, train_pairs, FinetuneSettings};
use crate::model::ModelConfig;
use crate::tensor::Activation;
use crate::training::{MaskingPolicy, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Command {
    BuildVocab,
    GenerateBenchmark,
    Pretrain,
    ContinuePretrain,
    Finetune,
    Evaluate,
    RunMatrix,
    InspectAttention,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::BuildVocab,
        Command::GenerateBenchmark,
        Command::Pretrain,
        Command::ContinuePretrain,
        Command::Finetune,
        Command::Evaluate,
        Command::RunMatrix,
        Command::InspectAttention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::BuildVocab => "build-vocab",
            Command::GenerateBenchmark => "generate-benchmark",
            Command::Pretrain => "pretrain",
            Command::ContinuePretrain => "continue-pretrain",
            Command::Finetune => "finetune",
            Command::Evaluate => "evaluate",
            Command::RunMatrix => "run-matrix",
            Command::InspectAttention => "inspect-attention",
        }
    }

    pub fn summary(self) -> &'static str {
        match self {
            Command::BuildVocab => "learn a subword vocabulary from corpus files",
            Command::GenerateBenchmark => "write the synthetic domain-shift benchmark to a directory",
            Command::Pretrain => "MLM pre-training of a fresh encoder",
            Command::ContinuePretrain => "continue MLM training of a checkpoint on one corpus",
            Command::Finetune => "fine-tune a checkpoint on a scoring task",
            Command::Evaluate => "accuracy of a fine-tuned checkpoint on a scoring task",
            Command::RunMatrix => "variant x task experiment matrix with table reports",
            Command::InspectAttention => "print one head's attention over a sentence",
        }
    }

    pub fn parse(s: &str) -> Option<Command> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Str,
    Path,
    Int,
    Float,
    Bool,
    /// Comma-separated list.
    List,
    FloatList,
    OneOf(&'static [&'static str]),
}

impl Kind {
    fn check(self, raw: &str) -> std::result::Result<(), String> {
        let ok = match self {
            Kind::Str | Kind::List => true,
            Kind::Path => !raw.is_empty(),
            Kind::Int => raw.parse::<u64>().is_ok(),
            Kind::Float => raw.parse::<f64>().is_ok(),
            Kind::Bool => raw.parse::<bool>().is_ok(),
            Kind::FloatList => split_list(raw).iter().all(|x| x.parse::<f64>().is_ok()),
            Kind::OneOf(opts) => opts.contains(&raw),
        };
        if ok {
            Ok(())
        } else {
            Err(format!("expected {}", self.describe()))
        }
    }

    fn describe(self) -> String {
        match self {
            Kind::Str => "text".into(),
            Kind::Path => "a path".into(),
            Kind::Int => "a non-negative integer".into(),
            Kind::Float => "a number".into(),
            Kind::Bool => "true or false".into(),
            Kind::List => "a comma-separated list".into(),
            Kind::FloatList => "a comma-separated list of numbers".into(),
            Kind::OneOf(o) => format!("one of {}", o.join(", ")),
        }
    }
}

/// One configuration key and the commands that accept it.
#[derive(Debug, Clone)]
pub struct KeySpec {
    pub key: String,
    pub kind: Kind,
    pub default: Option<String>,
    pub commands: Vec<Command>,
    pub required: Vec<Command>,
    pub help: &'static str,
}

use Command::*;

const TRAINING: [Command; 3] = [Pretrain, ContinuePretrain, RunMatrix];
const CHECKPOINT_USERS: [Command; 4] = [ContinuePretrain, Finetune, Evaluate, InspectAttention];
const PRECISIONS: &[&str] = &["auto", "f32", "f64"];

fn spec(key: &str, kind: Kind, default: Option<String>, commands: &[Command], help: &'static str) -> KeySpec {
    KeySpec {
        key: key.into(),
        kind,
        default,
        commands: commands.to_vec(),
        required: Vec::new(),
        help,
    }
}

fn required(key: &str, kind: Kind, commands: &[Command], help: &'static str) -> KeySpec {
    KeySpec {
        required: commands.to_vec(),
        ..spec(key, kind, None, commands, help)
    }
}

fn kind_of(value: &str) -> Kind {
    if value.parse::<bool>().is_ok() {
        Kind::Bool
    } else if value.parse::<u64>().is_ok() {
        Kind::Int
    } else if value.parse::<f64>().is_ok() {
        Kind::Float
    } else {
        Kind::Str
    }
}

/// Every key the CLI understands. Training, model, masking, fine-tune and
/// benchmark defaults come from the library's own defaults.
pub fn schema() -> Vec<KeySpec> {
    let all = Command::ALL;
    let mut keys = vec![
        spec("command", Kind::Str, None, &all, "must match the subcommand when present"),
        spec("seed", Kind::Int, Some("0".into()), &all, "master seed for every random stream"),
        spec(
            "precision",
            Kind::OneOf(PRECISIONS),
            Some("auto".into()),
            &[Pretrain, ContinuePretrain, Finetune, Evaluate, RunMatrix, InspectAttention],
            "float width; auto keeps a checkpoint's own and otherwise uses f32",
        ),
        required("output", Kind::Path, &[BuildVocab, Pretrain, ContinuePretrain, Finetune, RunMatrix], "output file (report prefix for run-matrix)"),
        required("output_dir", Kind::Path, &[GenerateBenchmark], "directory for corpora and tasks"),
        required("corpus", Kind::List, &[BuildVocab, Pretrain, ContinuePretrain], "corpus file(s), documents separated by blank lines"),
        spec("corpus.tag", Kind::OneOf(&["general", "in_domain", "off_domain", "mixed"]), Some("general".into()), &[Pretrain], "domain tag of the pre-training corpus"),
        required("vocab", Kind::Path, &[Pretrain], "vocabulary file"),
        required("checkpoint", Kind::Path, &CHECKPOINT_USERS, "input checkpoint"),
        required("task", Kind::Path, &[Finetune, Evaluate], "tab-separated scoring file (task_id, response, label)"),
        spec("task.id", Kind::Str, None, &[Finetune, Evaluate], "task to use when the file holds several"),
        spec("split.ratios", Kind::FloatList, Some("0.7,0.1,0.2".into()), &[Finetune, Evaluate, RunMatrix], "train,dev,test fractions"),
        spec("evaluate.split", Kind::OneOf(&["all", "train", "dev", "test"]), Some("all".into()), &[Evaluate], "which split of the task to score"),
        spec("text", Kind::Str, Some(String::new()), &[InspectAttention], "sentence to inspect"),
        spec("layer", Kind::Int, Some("0".into()), &[InspectAttention], "encoder layer index"),
        spec("head", Kind::Int, Some("0".into()), &[InspectAttention], "attention head index"),
        spec("vocab.size", Kind::Int, Some("2048".into()), &[BuildVocab, RunMatrix], "target vocabulary size"),
        spec("vocab.min_freq", Kind::Int, Some("2".into()), &[BuildVocab, RunMatrix], "minimum character and merge frequency"),
        spec("source", Kind::OneOf(&["synthetic", "files"]), Some("synthetic".into()), &[RunMatrix], "generate the synthetic benchmark or read corpora/tasks files"),
        required("variants", Kind::Str, &[RunMatrix], "e.g. `base: corpus_A | adapted: corpus_A > corpus_B`"),
        spec("matrix.seeds", Kind::Int, Some("1".into()), &[RunMatrix], "number of seeds, counting up from seed"),
        spec("corpora", Kind::List, None, &[RunMatrix], "corpus files as path:tag; the id is the file stem"),
        spec("tasks", Kind::List, None, &[RunMatrix], "scoring files"),
        spec("checkpoints", Kind::List, None, &[RunMatrix], "checkpoint files usable as @id, id = file stem"),
        spec("matrix.vocab", Kind::Path, None, &[RunMatrix], "vocabulary file; built from the corpora when absent"),
    ];
    keys.push(KeySpec {
        required: vec![ContinuePretrain],
        ..spec(
            "corpus.tag",
            Kind::OneOf(&["general", "in_domain", "off_domain", "mixed"]),
            None,
            &[ContinuePretrain],
            "domain tag of the continual corpus",
        )
    });

    let model = ModelConfig::default();
    for (k, v) in model.to_pairs() {
        if k == "vocab_size" || k == "norm_placement" {
            continue;
        }
        let kind = if k == "activation" { Kind::OneOf(&["gelu_tanh", "gelu", "gelu_erf", "relu"]) } else { kind_of(&v) };
        let kind = if k == "dropout" || k == "layer_norm_eps" { Kind::Float } else { kind };
        keys.push(spec(&format!("model.{k}"), kind, Some(v), &[Pretrain, RunMatrix], "model shape"));
    }
    let train = TrainConfig::default();
    for (prefix, cmds) in [
        ("train", &[Pretrain, ContinuePretrain][..]),
        ("pretrain", &[RunMatrix][..]),
        ("continual", &[RunMatrix][..]),
    ] {
        for (k, v) in train_pairs(&train) {
            let kind = if matches!(k.as_str(), "steps" | "batch_size" | "warmup_steps" | "eval_every") { Kind::Int } else { Kind::Float };
            keys.push(spec(&format!("{prefix}.{k}"), kind, Some(v), cmds, "MLM optimisation"));
        }
    }
    for (k, v) in masking_pairs(&MaskingPolicy::default()) {
        keys.push(spec(&format!("masking.{k}"), Kind::Float, Some(v), &TRAINING, "MLM masking"));
    }
    for (k, v) in finetune_pairs(&FinetuneSettings::default()) {
        let kind = if matches!(k.as_str(), "epochs" | "batch_size") { Kind::Int } else { Kind::Float };
        keys.push(spec(&format!("finetune.{k}"), kind, Some(v), &[Finetune, RunMatrix], "fine-tuning"));
    }
    for (k, v) in benchmark_pairs(&SyntheticBenchmarkSpec::default()) {
        let kind = match k.as_str() {
            "category_count_weights" => Kind::FloatList,
            "synonym_zipf" => Kind::Float,
            _ => Kind::Int,
        };
        let cmds: &[Command] = if k == "seed" { &[RunMatrix] } else { &[GenerateBenchmark, RunMatrix] };
        keys.push(spec(&format!("benchmark.{k}"), kind, Some(v), cmds, "synthetic benchmark"));
    }
    keys
}

fn benchmark_pairs(s: &SyntheticBenchmarkSpec) -> Vec<(String, String)> {
    let weights: Vec<String> = s.category_count_weights.iter().map(f64::to_string).collect();
    vec![
        ("seed".into(), s.seed.to_string()),
        ("base_words".into(), s.base_words.to_string()),
        ("a_words".into(), s.a_words.to_string()),
        ("b_words".into(), s.b_words.to_string()),
        ("c_words".into(), s.c_words.to_string()),
        ("topics".into(), s.topics.to_string()),
        ("n_categories".into(), s.n_categories.to_string()),
        ("synonyms_per_category".into(), s.synonyms_per_category.to_string()),
        ("context_words_per_category".into(), s.context_words_per_category.to_string()),
        ("min_sentence_len".into(), s.min_sentence_len.to_string()),
        ("max_sentence_len".into(), s.max_sentence_len.to_string()),
        ("corpus_a_sentences".into(), s.corpus_a_sentences.to_string()),
        ("corpus_b_sentences".into(), s.corpus_b_sentences.to_string()),
        ("corpus_c_sentences".into(), s.corpus_c_sentences.to_string()),
        ("n_tasks".into(), s.n_tasks.to_string()),
        ("examples_per_task".into(), s.examples_per_task.to_string()),
        ("n_classes".into(), s.n_classes.to_string()),
        ("category_count_weights".into(), weights.join(",")),
        ("synonym_zipf".into(), s.synonym_zipf.to_string()),
    ]
}

/// Where a value came from, for error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    File { path: PathBuf, line: usize },
    Flag,
    Default,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::File { path, line } => write!(f, "{}:{line}", path.display()),
            Origin::Flag => f.write_str("command line"),
            Origin::Default => f.write_str("default"),
        }
    }
}

fn split_list(raw: &str) -> Vec<&str> {
    raw.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_config_text(text: &str, path: &Path) -> Result<Vec<(String, String, Origin)>> {
    let mut out: Vec<(String, String, Origin)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let origin = Origin::File {
            path: path.to_path_buf(),
            line: line_no,
        };
        let Some((k, v)) = t.split_once('=') else {
            return Err(Error::Config(format!("{origin}: expected `key = value`, found {t:?}")));
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("{origin}: missing key before '='")));
        }
        if let Some((_, _, first)) = out.iter().find(|(k2, _, _)| k2 == key) {
            return Err(Error::Config(format!("{origin}: key {key:?} already set at {first}")));
        }
        out.push((key.to_string(), v.trim().to_string(), origin));
    }
    Ok(out)
}

/// Validated key/value settings for one command.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    values: BTreeMap<String, (String, Origin)>,
}

impl RunConfig {
    /// Merges file entries, then command-line overrides, over the schema
    /// defaults. Unknown, mistyped or missing required keys are errors.
    pub fn resolve(
        command: Command,
        file: Vec<(String, String, Origin)>,
        overrides: Vec<(String, String)>,
    ) -> Result<Self> {
        let schema = schema();
        let find = |key: &str| schema.iter().find(|s| s.key == key && s.commands.contains(&command));
        let mut values: BTreeMap<String, (String, Origin)> = BTreeMap::new();
        for s in schema.iter().filter(|s| s.commands.contains(&command)) {
            if let Some(d) = &s.default {
                values.insert(s.key.clone(), (d.clone(), Origin::Default));
            }
        }
        let entries = file
            .into_iter()
            .chain(overrides.into_iter().map(|(k, v)| (k, v, Origin::Flag)));
        for (key, value, origin) in entries {
            let Some(s) = find(&key) else {
                let elsewhere: Vec<&str> = schema
                    .iter()
                    .filter(|s| s.key == key)
                    .flat_map(|s| s.commands.iter().map(|c| c.name()))
                    .collect();
                let hint = if elsewhere.is_empty() {
                    String::new()
                } else {
                    format!(" (used by {})", elsewhere.join(", "))
                };
                return Err(Error::Config(format!(
                    "{origin}: unknown key {key:?} for command {command}{hint}"
                )));
            };
            s.kind
                .check(&value)
                .map_err(|m| Error::Config(format!("{origin}: key {key}: {m}, got {value:?}")))?;
            if key == "command" && value != command.name() {
                return Err(Error::Config(format!(
                    "{origin}: config is for command {value:?}, not {command}"
                )));
            }
            values.insert(key, (value, origin));
        }
        for s in schema.iter().filter(|s| s.required.contains(&command)) {
            if !values.contains_key(&s.key) {
                return Err(Error::Config(format!(
                    "missing required key {:?} for command {command} ({})",
                    s.key, s.help
                )));
            }
        }
        Ok(RunConfig { command, values })
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.values.get(key).is_some_and(|(_, o)| *o != Origin::Default)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(v, _)| v.as_str())
    }

    pub fn origin(&self, key: &str) -> Option<&Origin> {
        self.values.get(key).map(|(_, o)| o)
    }

    fn value<V: FromStr>(&self, key: &str) -> Result<V> {
        let (raw, origin) = self
            .values
            .get(key)
            .ok_or_else(|| Error::Config(format!("key {key:?} has no value for command {}", self.command)))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("{origin}: bad value {raw:?} for key {key}")))
    }

    pub fn str(&self, key: &str) -> Result<String> {
        self.value(key)
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.value(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.value(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.value(key)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.value(key)
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.value(key)
    }

    pub fn list(&self, key: &str) -> Vec<String> {
        self.raw(key).map(|r| split_list(r).into_iter().map(String::from).collect()).unwrap_or_default()
    }

    pub fn floats(&self, key: &str) -> Result<Vec<f64>> {
        self.list(key)
            .iter()
            .map(|x| {
                x.parse()
                    .map_err(|_| Error::Config(format!("key {key}: {x:?} is not a number")))
            })
            .collect()
    }

    pub fn tag(&self, key: &str) -> Result<DomainTag> {
        self.str(key)?.parse()
    }

    pub fn seed(&self) -> Result<u64> {
        self.u64("seed")
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let act = self.str("model.activation")?;
        Ok(ModelConfig {
            max_len: self.usize("model.max_len")?,
            d_model: self.usize("model.d_model")?,
            n_heads: self.usize("model.n_heads")?,
            d_ff: self.usize("model.d_ff")?,
            n_layers: self.usize("model.n_layers")?,
            n_classes: self.usize("model.n_classes")?,
            dropout: self.f64("model.dropout")?,
            activation: Activation::parse(&act)
                .ok_or_else(|| Error::Config(format!("unknown activation {act:?}")))?,
            tie_mlm_decoder: self.bool("model.tie_mlm_decoder")?,
            position_embeddings: self.bool("model.position_embeddings")?,
            layer_norm_eps: self.f64("model.layer_norm_eps")?,
            ..ModelConfig::default()
        })
    }

    /// Optimiser settings under `prefix` (`train`, `pretrain`, `continual`).
    pub fn train(&self, prefix: &str) -> Result<TrainConfig> {
        let k = |name: &str| format!("{prefix}.{name}");
        let cfg = TrainConfig {
            steps: self.usize(&k("steps"))?,
            batch_size: self.usize(&k("batch_size"))?,
            peak_lr: self.f64(&k("peak_lr"))?,
            warmup_steps: self.usize(&k("warmup_steps"))?,
            weight_decay: self.f64(&k("weight_decay"))?,
            seed: self.seed()?,
            eval_every: self.usize(&k("eval_every"))?,
            grad_clip_norm: self.f64(&k("grad_clip_norm"))?,
            beta1: self.f64(&k("beta1"))?,
            beta2: self.f64(&k("beta2"))?,
            adam_eps: self.f64(&k("adam_eps"))?,
        };
        cfg.validate()
            .map_err(|e| Error::Config(format!("{prefix}.*: {}", strip_prefix(e))))?;
        Ok(cfg)
    }

    pub fn masking(&self) -> Result<MaskingPolicy> {
        let m = MaskingPolicy {
            select_prob: self.f64("masking.select_prob")?,
            mask_frac: self.f64("masking.mask_frac")?,
            random_frac: self.f64("masking.random_frac")?,
            keep_frac: self.f64("masking.keep_frac")?,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn finetune(&self) -> Result<FinetuneSettings> {
        let f = FinetuneSettings {
            epochs: self.usize("finetune.epochs")?,
            batch_size: self.usize("finetune.batch_size")?,
            peak_lr: self.f64("finetune.peak_lr")?,
            warmup_frac: self.f64("finetune.warmup_frac")?,
            weight_decay: self.f64("finetune.weight_decay")?,
            grad_clip_norm: self.f64("finetune.grad_clip_norm")?,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn split_ratios(&self) -> Result<[f64; 3]> {
        let r = self.floats("split.ratios")?;
        r.as_slice()
            .try_into()
            .map_err(|_| Error::Config(format!("split.ratios needs 3 values, got {}", r.len())))
    }

    /// Benchmark spec; `seed` overrides `benchmark.seed` where the latter
    /// is not accepted (generate-benchmark).
    pub fn benchmark(&self) -> Result<SyntheticBenchmarkSpec> {
        let seed = if self.values.contains_key("benchmark.seed") {
            self.u64("benchmark.seed")?
        } else if self.is_set("seed") {
            self.seed()?
        } else {
            SyntheticBenchmarkSpec::default().seed
        };
        let spec = SyntheticBenchmarkSpec {
            seed,
            base_words: self.usize("benchmark.base_words")?,
            a_words: self.usize("benchmark.a_words")?,
            b_words: self.usize("benchmark.b_words")?,
            c_words: self.usize("benchmark.c_words")?,
            topics: self.usize("benchmark.topics")?,
            n_categories: self.usize("benchmark.n_categories")?,
            synonyms_per_category: self.usize("benchmark.synonyms_per_category")?,
            context_words_per_category: self.usize("benchmark.context_words_per_category")?,
            min_sentence_len: self.usize("benchmark.min_sentence_len")?,
            max_sentence_len: self.usize("benchmark.max_sentence_len")?,
            corpus_a_sentences: self.usize("benchmark.corpus_a_sentences")?,
            corpus_b_sentences: self.usize("benchmark.corpus_b_sentences")?,
            corpus_c_sentences: self.usize("benchmark.corpus_c_sentences")?,
            n_tasks: self.usize("benchmark.n_tasks")?,
            examples_per_task: self.usize("benchmark.examples_per_task")?,
            n_classes: self.usize("benchmark.n_classes")?,
            category_count_weights: self.floats("benchmark.category_count_weights")?,
            synonym_zipf: self.f64("benchmark.synonym_zipf")?,
            lexicon: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Every resolved key and value, for report metadata.
    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, (v, _))| (k.as_str(), v.as_str()))
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
