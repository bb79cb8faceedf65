//! Accuracy, the variant × task experiment matrix, and table rendering.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::corpus::{split, Corpus, DomainTag, ScoringTask, Split};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Scalar;
use crate::tokenizer::{sha256, Vocabulary};
use crate::training::{continual_pretrain, evaluate, finetune, pretrain, MaskingPolicy, TrainConfig};

/// Fraction of positions where `pred` equals `gold`.
pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            pred.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Input("accuracy of an empty set is undefined".into()));
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Where a variant's encoder starts.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Init {
    Fresh,
    Checkpoint(String),
}

impl std::fmt::Display for Init {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Init::Fresh => f.write_str("fresh"),
            Init::Checkpoint(id) => write!(f, "@{id}"),
        }
    }
}

/// Fine-tuning hyperparameters independent of task size.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        FinetuneSettings {
            epochs: 10,
            batch_size: 16,
            peak_lr: 5e-4,
            warmup_frac: 0.1,
            weight_decay: 0.01,
            grad_clip_norm: 1.0,
        }
    }
}

impl FinetuneSettings {
    /// Step-level config for `n_train` examples; dev accuracy once per epoch.
    pub fn train_config(&self, n_train: usize, seed: u64) -> TrainConfig {
        let per_epoch = n_train.div_ceil(self.batch_size.max(1)).max(1);
        let steps = per_epoch * self.epochs;
        TrainConfig {
            steps,
            batch_size: self.batch_size,
            peak_lr: self.peak_lr,
            warmup_steps: (steps as f64 * self.warmup_frac).round() as usize,
            weight_decay: self.weight_decay,
            seed,
            eval_every: per_epoch,
            grad_clip_norm: self.grad_clip_norm,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("fine-tune epochs and batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "warmup_frac {} outside [0, 1]",
                self.warmup_frac
            )));
        }
        self.train_config(1, 0).validate()
    }
}

/// One model variant: an initialization followed by ordered training
/// stages, each naming a corpus. For a fresh start the first stage is
/// pre-training and the rest are continual stages.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantSpec {
    pub name: String,
    pub init: Init,
    pub stages: Vec<String>,
    /// Overrides the matrix-wide fine-tuning settings.
    pub finetune: Option<FinetuneSettings>,
}

impl VariantSpec {
    pub fn new(name: impl Into<String>, init: Init, stages: &[&str]) -> Self {
        VariantSpec {
            name: name.into(),
            init,
            stages: stages.iter().map(|s| s.to_string()).collect(),
            finetune: None,
        }
    }

    /// `name: A > B`, or `name: @ckpt > B` to start from a checkpoint.
    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        if let Init::Checkpoint(id) = &self.init {
            parts.push(format!("@{id}"));
        }
        parts.extend(self.stages.iter().cloned());
        format!("{}: {}", self.name, parts.join(" > "))
    }
}

/// Parses `bert: A | sr2-bert: A > B | ft: @base > B`. An empty stage list
/// (`scratch:`) fine-tunes a freshly initialized encoder.
pub fn parse_variants(text: &str) -> Result<Vec<VariantSpec>> {
    let mut out = Vec::new();
    for item in text.split('|') {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        let (name, chain) = item
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("variant {item:?} lacks `name:`")))?;
        let name = name.trim();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Config(format!("bad variant name {name:?}")));
        }
        let mut init = Init::Fresh;
        let mut stages = Vec::new();
        for (i, step) in chain.split('>').map(str::trim).enumerate() {
            if step.is_empty() {
                if chain.trim().is_empty() {
                    break;
                }
                return Err(Error::Config(format!("variant {name}: empty stage in {chain:?}")));
            }
            if let Some(id) = step.strip_prefix('@') {
                if i != 0 {
                    return Err(Error::Config(format!(
                        "variant {name}: checkpoint {step} must come first"
                    )));
                }
                init = Init::Checkpoint(id.trim().to_string());
            } else {
                stages.push(step.to_string());
            }
        }
        out.push(VariantSpec {
            name: name.to_string(),
            init,
            stages,
            finetune: None,
        });
    }
    if out.is_empty() {
        return Err(Error::Config("no variants given".into()));
    }
    Ok(out)
}

/// Everything a matrix run needs besides variants and tasks.
#[derive(Debug, Clone)]
pub struct MatrixConfig {
    /// Architecture for fresh variants; `vocab_size` follows the vocabulary.
    pub model: ModelConfig,
    /// First stage of a fresh variant.
    pub pretrain: TrainConfig,
    /// Every later stage, and every stage of a checkpoint-initialized variant.
    pub continual: TrainConfig,
    pub finetune: FinetuneSettings,
    pub masking: MaskingPolicy,
    pub split_ratios: [f64; 3],
    pub seeds: Vec<u64>,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        MatrixConfig {
            model: ModelConfig::default(),
            pretrain: TrainConfig::default(),
            continual: TrainConfig::default(),
            finetune: FinetuneSettings::default(),
            masking: MaskingPolicy::default(),
            split_ratios: [0.7, 0.1, 0.2],
            seeds: vec![0],
        }
    }
}

/// Corpora, checkpoints and the vocabulary that variants refer to by id.
#[derive(Debug, Clone)]
pub struct MatrixResources<T: Scalar> {
    pub vocab: Arc<Vocabulary>,
    pub corpora: BTreeMap<String, Corpus>,
    pub checkpoints: BTreeMap<String, Checkpoint<T>>,
}

impl<T: Scalar> MatrixResources<T> {
    pub fn new(vocab: Arc<Vocabulary>, corpora: impl IntoIterator<Item = Corpus>) -> Self {
        MatrixResources {
            vocab,
            corpora: corpora.into_iter().map(|c| (c.id().to_string(), c)).collect(),
            checkpoints: BTreeMap::new(),
        }
    }
}

/// Accuracy of one (variant, task) pair for every seed.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub per_seed: Vec<std::result::Result<f64, String>>,
}

impl CellResult {
    /// Mean over seeds; `None` if any seed failed.
    pub fn mean(&self) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.per_seed.iter().map(|r| r.as_ref().ok().copied()).collect();
        let vals = vals?;
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn first_error(&self) -> Option<&str> {
        self.per_seed.iter().find_map(|r| r.as_ref().err().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub variants: Vec<String>,
    pub tasks: Vec<String>,
    pub seeds: Vec<u64>,
    /// `cells[variant][task]`.
    pub cells: Vec<Vec<CellResult>>,
    pub metadata: BTreeMap<String, String>,
}

impl EvalReport {
    /// A single-seed report from known accuracies, `grid[task][variant]`.
    pub fn from_values(variants: &[&str], tasks: &[&str], grid: &[Vec<f64>]) -> Result<Self> {
        if grid.len() != tasks.len() || grid.iter().any(|r| r.len() != variants.len()) {
            return Err(Error::dim(
                "EvalReport::from_values",
                &[tasks.len(), variants.len()],
                &[grid.len(), grid.first().map_or(0, Vec::len)],
            ));
        }
        let cells = (0..variants.len())
            .map(|v| {
                (0..tasks.len())
                    .map(|t| CellResult {
                        per_seed: vec![Ok(grid[t][v])],
                    })
                    .collect()
            })
            .collect();
        Ok(EvalReport {
            variants: variants.iter().map(|s| s.to_string()).collect(),
            tasks: tasks.iter().map(|s| s.to_string()).collect(),
            seeds: vec![0],
            cells,
            metadata: BTreeMap::new(),
        })
    }

    fn variant_index(&self, name: &str) -> Option<usize> {
        self.variants.iter().position(|v| v == name)
    }

    pub fn cell(&self, variant: &str, task: &str) -> Option<&CellResult> {
        let v = self.variant_index(variant)?;
        let t = self.tasks.iter().position(|x| x == task)?;
        Some(&self.cells[v][t])
    }

    /// Full-precision mean of a variant's cell means.
    pub fn variant_average(&self, variant: &str) -> Option<f64> {
        let v = self.variant_index(variant)?;
        let means: Option<Vec<f64>> = self.cells[v].iter().map(CellResult::mean).collect();
        let means = means?;
        Some(means.iter().sum::<f64>() / means.len() as f64)
    }

    /// Mean over tasks of a variant's accuracy for each seed.
    pub fn seed_averages(&self, variant: &str) -> Option<Vec<Option<f64>>> {
        let v = self.variant_index(variant)?;
        Some(
            (0..self.seeds.len())
                .map(|s| {
                    let vals: Option<Vec<f64>> = self.cells[v]
                        .iter()
                        .map(|c| c.per_seed.get(s).and_then(|r| r.as_ref().ok().copied()))
                        .collect();
                    vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
                })
                .collect(),
        )
    }

    /// Long-form CSV with one line per (variant, task, seed).
    pub fn per_seed_csv(&self) -> String {
        let mut s = String::from("variant,task,seed,accuracy,error\n");
        for (v, name) in self.variants.iter().enumerate() {
            for (t, task) in self.tasks.iter().enumerate() {
                for (i, seed) in self.seeds.iter().enumerate() {
                    match &self.cells[v][t].per_seed[i] {
                        Ok(a) => writeln!(s, "{name},{task},{seed},{a:.6},").unwrap(),
                        Err(e) => writeln!(s, "{name},{task},{seed},,{}", csv_field(e)).unwrap(),
                    }
                }
            }
        }
        s
    }

    /// `key = value` lines describing how every cell was produced.
    pub fn metadata_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.metadata {
            writeln!(s, "{k} = {}", v.replace('\n', " ")).unwrap();
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\"").replace('\n', " "))
    } else {
        s.to_string()
    }
}

/// A value in integer thousandths, rounded half away from zero.
pub fn thousandths(x: f64) -> i64 {
    (x * 1000.0).round() as i64
}

/// Average of values as displayed to three decimals: the mean of their
/// thousandths, itself rounded to thousandths (half up).
pub fn displayed_average(values: &[f64]) -> Option<i64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as i64;
    let sum: i64 = values.iter().map(|&v| thousandths(v)).sum();
    Some((2 * sum + n).div_euclid(2 * n))
}

fn fmt_thousandths(t: i64) -> String {
    let sign = if t < 0 { "-" } else { "" };
    format!("{sign}{}.{:03}", t.abs() / 1000, t.abs() % 1000)
}

/// A table rendered two ways.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Summary {
    pub csv: String,
    pub text: String,
}

/// Rows are tasks, columns variants, the last row the per-variant average
/// of the displayed values. Failed cells show as `ERR`.
pub fn summarize(report: &EvalReport) -> Summary {
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["task".to_string()];
    header.extend(report.variants.iter().cloned());
    rows.push(header);
    for (t, task) in report.tasks.iter().enumerate() {
        let mut row = vec![task.clone()];
        for v in 0..report.variants.len() {
            row.push(match report.cells[v][t].mean() {
                Some(m) => fmt_thousandths(thousandths(m)),
                None => "ERR".into(),
            });
        }
        rows.push(row);
    }
    let mut avg = vec!["average".to_string()];
    for v in 0..report.variants.len() {
        let means: Option<Vec<f64>> = report.cells[v].iter().map(CellResult::mean).collect();
        avg.push(
            means
                .and_then(|m| displayed_average(&m))
                .map(fmt_thousandths)
                .unwrap_or_else(|| "ERR".into()),
        );
    }
    rows.push(avg);

    let csv = rows
        .iter()
        .map(|r| r.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n";
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let line = |r: &Vec<String>| {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        cells.join("  ").trim_end().to_string()
    };
    let rule = "-".repeat(widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1));
    let mut text = String::new();
    writeln!(text, "{}", line(&rows[0])).unwrap();
    writeln!(text, "{rule}").unwrap();
    for r in &rows[1..rows.len() - 1] {
        writeln!(text, "{}", line(r)).unwrap();
    }
    writeln!(text, "{rule}").unwrap();
    writeln!(text, "{}", line(&rows[rows.len() - 1])).unwrap();
    Summary { csv, text }
}

/// Paths written by [`write_report`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub text: PathBuf,
    pub per_seed: PathBuf,
    pub meta: PathBuf,
}

/// Writes `<prefix>.csv`, `<prefix>.txt`, `<prefix>.seeds.csv` and
/// `<prefix>.meta`.
pub fn write_report(report: &EvalReport, prefix: &Path) -> Result<ReportFiles> {
    let with = |ext: &str| {
        let mut name = prefix.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(ext);
        prefix.with_file_name(name)
    };
    let files = ReportFiles {
        csv: with(".csv"),
        text: with(".txt"),
        per_seed: with(".seeds.csv"),
        meta: with(".meta"),
    };
    let summary = summarize(report);
    for (path, body) in [
        (&files.csv, summary.csv),
        (&files.text, summary.text),
        (&files.per_seed, report.per_seed_csv()),
        (&files.meta, report.metadata_text()),
    ] {
        std::fs::write(path, body).map_err(|e| Error::io(path, e))?;
    }
    Ok(files)
}

/// A 64-bit seed derived from `seed` and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(label.as_bytes());
    let h = sha256(&bytes);
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct PrefixKey {
    seed_idx: usize,
    init: Init,
    stages: Vec<String>,
}

impl PrefixKey {
    fn label(&self) -> String {
        let mut s = self.init.to_string();
        for st in &self.stages {
            s.push('>');
            s.push_str(st);
        }
        s
    }
}

type Shared<T> = std::result::Result<Arc<Checkpoint<T>>, String>;

fn validate_plan<T: Scalar>(
    variants: &[VariantSpec],
    tasks: &[ScoringTask],
    res: &MatrixResources<T>,
    cfg: &MatrixConfig,
) -> Result<()> {
    if variants.is_empty() || tasks.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config("a matrix needs variants, tasks and seeds".into()));
    }
    let mut names = HashSet::new();
    for v in variants {
        if !names.insert(v.name.as_str()) {
            return Err(Error::Config(format!("duplicate variant name {:?}", v.name)));
        }
    }
    let mut task_ids = HashSet::new();
    for t in tasks {
        if !task_ids.insert(t.task_id.as_str()) {
            return Err(Error::Config(format!("duplicate task id {:?}", t.task_id)));
        }
    }
    let mut seeds = HashSet::new();
    for s in &cfg.seeds {
        if !seeds.insert(s) {
            return Err(Error::Config(format!("duplicate seed {s}")));
        }
    }
    cfg.pretrain.validate()?;
    cfg.continual.validate()?;
    cfg.finetune.validate()?;
    cfg.masking.validate()?;
    let mut model = cfg.model.clone();
    model.vocab_size = res.vocab.len();
    model.validate()?;
    for v in variants {
        if let Some(f) = &v.finetune {
            f.validate()?;
        }
        if let Init::Checkpoint(id) = &v.init {
            if !res.checkpoints.contains_key(id) {
                return Err(Error::Config(format!(
                    "variant {}: unknown checkpoint {id:?}",
                    v.name
                )));
            }
        }
        for (i, s) in v.stages.iter().enumerate() {
            let corpus = res.corpora.get(s).ok_or_else(|| {
                Error::Config(format!("variant {}: unknown corpus {s:?}", v.name))
            })?;
            let continual = i > 0 || v.init != Init::Fresh;
            if continual && corpus.tag() == DomainTag::Mixed {
                return Err(Error::Policy(format!(
                    "no-dilution rule: variant {} continues on corpus {s}, which is tagged mixed",
                    v.name
                )));
            }
        }
    }
    Ok(())
}

fn train_prefix<T: Scalar>(
    key: &PrefixKey,
    parent: Option<&Shared<T>>,
    res: &MatrixResources<T>,
    cfg: &MatrixConfig,
) -> Shared<T> {
    let seed = cfg.seeds[key.seed_idx];
    let start: Checkpoint<T> = match parent {
        Some(Ok(p)) => (**p).clone(),
        Some(Err(e)) => return Err(e.clone()),
        None => match &key.init {
            Init::Fresh => {
                let mut c = Checkpoint::fresh(cfg.model.clone(), res.vocab.clone(), derive_seed(seed, "init"))
                    .map_err(|e| e.to_string())?;
                c.metadata.insert("matrix.seed".into(), seed.to_string());
                c
            }
            Init::Checkpoint(id) => res.checkpoints[id].clone(),
        },
    };
    let Some(corpus_id) = key.stages.last() else {
        return Ok(Arc::new(start));
    };
    let corpus = &res.corpora[corpus_id];
    let first = key.stages.len() == 1 && key.init == Init::Fresh;
    let mut tc = if first { cfg.pretrain.clone() } else { cfg.continual.clone() };
    tc.seed = derive_seed(seed, &format!("stage {}", key.label()));
    let out = if first {
        pretrain(start, corpus, &tc, &cfg.masking)
    } else {
        continual_pretrain(start, corpus, &tc, &cfg.masking)
    };
    match out {
        Ok((c, curve)) => {
            log::info!(
                "seed {seed} stage {}: final MLM loss {:.4}",
                key.label(),
                curve.last_loss().unwrap_or(f64::NAN)
            );
            Ok(Arc::new(c))
        }
        Err(e) => Err(format!("stage {} failed: {e}", key.label())),
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("SCIEDKIT_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("SCIEDKIT_THREADS={v:?} is not a count")))?;
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Builds every variant for every seed (sharing identical stage prefixes),
/// fine-tunes it on each task's train split and scores the test split.
/// Each cell's failure is recorded in the report without stopping others;
/// unresolvable references fail the whole call before any training.
pub fn run_matrix<T: Scalar>(
    variants: &[VariantSpec],
    tasks: &[ScoringTask],
    res: &MatrixResources<T>,
    cfg: &MatrixConfig,
) -> Result<EvalReport> {
    validate_plan(variants, tasks, res, cfg)?;
    let splits: Vec<Vec<Split>> = cfg
        .seeds
        .iter()
        .map(|&s| {
            tasks
                .iter()
                .map(|t| split(t, cfg.split_ratios, derive_seed(s, &format!("split {}", t.task_id))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let pool = thread_pool()?;

    let depth = variants.iter().map(|v| v.stages.len()).max().unwrap_or(0);
    let mut built: HashMap<PrefixKey, Shared<T>> = HashMap::new();
    for level in 0..=depth {
        let mut keys: Vec<PrefixKey> = Vec::new();
        for seed_idx in 0..cfg.seeds.len() {
            for v in variants.iter().filter(|v| v.stages.len() >= level) {
                let k = PrefixKey {
                    seed_idx,
                    init: v.init.clone(),
                    stages: v.stages[..level].to_vec(),
                };
                if !built.contains_key(&k) && !keys.contains(&k) {
                    keys.push(k);
                }
            }
        }
        let done: Vec<(PrefixKey, Shared<T>)> = pool.install(|| {
            keys.into_par_iter()
                .map(|k| {
                    let parent = (level > 0).then(|| {
                        let mut p = k.clone();
                        p.stages.pop();
                        &built[&p]
                    });
                    let out = train_prefix(&k, parent, res, cfg);
                    (k, out)
                })
                .collect()
        });
        built.extend(done);
    }

    let jobs: Vec<(usize, usize, usize)> = (0..variants.len())
        .flat_map(|v| (0..tasks.len()).flat_map(move |t| (0..cfg.seeds.len()).map(move |s| (v, t, s))))
        .collect();
    let results: Vec<std::result::Result<f64, String>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(v, t, s)| {
                let var = &variants[v];
                let key = PrefixKey {
                    seed_idx: s,
                    init: var.init.clone(),
                    stages: var.stages.clone(),
                };
                let base = built[&key].as_ref().map_err(Clone::clone)?;
                let sp = &splits[s][t];
                let settings = var.finetune.as_ref().unwrap_or(&cfg.finetune);
                let tc = settings.train_config(
                    sp.train.len(),
                    derive_seed(cfg.seeds[s], &format!("finetune {}", tasks[t].task_id)),
                );
                let out = finetune(base, &sp.train, &sp.dev, tasks[t].n_classes, &tc)
                    .map_err(|e| format!("fine-tuning failed: {e}"))?;
                let acc = evaluate(&out.checkpoint, &sp.test).map_err(|e| format!("evaluation failed: {e}"))?;
                log::info!(
                    "seed {} {} {}: test accuracy {acc:.4} (best dev at step {})",
                    cfg.seeds[s],
                    var.name,
                    tasks[t].task_id,
                    out.best_step
                );
                Ok(acc)
            })
            .collect()
    });

    let mut cells: Vec<Vec<CellResult>> = vec![vec![CellResult { per_seed: Vec::new() }; tasks.len()]; variants.len()];
    for (&(v, t, _), r) in jobs.iter().zip(results) {
        cells[v][t].per_seed.push(r);
    }

    let mut meta = BTreeMap::new();
    meta.insert("dtype".into(), T::DTYPE.name().to_string());
    meta.insert(
        "seeds".into(),
        cfg.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
    );
    meta.insert("split_ratios".into(), format!("{:?}", cfg.split_ratios));
    meta.insert("vocab.hash".into(), hex(&res.vocab.content_hash()));
    meta.insert("vocab.size".into(), res.vocab.len().to_string());
    for (k, v) in cfg.model.to_pairs() {
        if k != "vocab_size" {
            meta.insert(format!("model.{k}"), v);
        }
    }
    for (prefix, tc) in [("pretrain", &cfg.pretrain), ("continual", &cfg.continual)] {
        for (k, v) in train_pairs(tc) {
            meta.insert(format!("{prefix}.{k}"), v);
        }
    }
    for (k, v) in finetune_pairs(&cfg.finetune) {
        meta.insert(format!("finetune.{k}"), v);
    }
    for (k, v) in masking_pairs(&cfg.masking) {
        meta.insert(format!("masking.{k}"), v);
    }
    for (id, c) in &res.corpora {
        meta.insert(format!("corpus.{id}.tag"), c.tag().to_string());
        meta.insert(format!("corpus.{id}.documents"), c.len().to_string());
    }
    for t in tasks {
        meta.insert(format!("task.{}.examples", t.task_id), t.examples.len().to_string());
        meta.insert(format!("task.{}.n_classes", t.task_id), t.n_classes.to_string());
        meta.insert(format!("task.{}.provenance", t.task_id), t.provenance.clone());
    }
    for (vi, v) in variants.iter().enumerate() {
        meta.insert(format!("variant.{}.spec", v.name), v.describe());
        let key = PrefixKey {
            seed_idx: 0,
            init: v.init.clone(),
            stages: v.stages.clone(),
        };
        let lineage = match &built[&key] {
            Ok(c) => c.lineage.describe(),
            Err(e) => format!("unavailable: {e}"),
        };
        meta.insert(format!("variant.{}.lineage", v.name), lineage);
        if let Some(f) = &v.finetune {
            for (k, val) in finetune_pairs(f) {
                meta.insert(format!("variant.{}.finetune.{k}", v.name), val);
            }
        }
        for (ti, t) in tasks.iter().enumerate() {
            if let Some(e) = cells[vi][ti].first_error() {
                meta.insert(format!("error.{}.{}", v.name, t.task_id), e.to_string());
            }
        }
    }
    Ok(EvalReport {
        variants: variants.iter().map(|v| v.name.clone()).collect(),
        tasks: tasks.iter().map(|t| t.task_id.clone()).collect(),
        seeds: cfg.seeds.clone(),
        cells,
        metadata: meta,
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn train_pairs(c: &TrainConfig) -> Vec<(String, String)> {
    vec![
        ("steps".into(), c.steps.to_string()),
        ("batch_size".into(), c.batch_size.to_string()),
        ("peak_lr".into(), c.peak_lr.to_string()),
        ("warmup_steps".into(), c.warmup_steps.to_string()),
        ("weight_decay".into(), c.weight_decay.to_string()),
        ("eval_every".into(), c.eval_every.to_string()),
        ("grad_clip_norm".into(), c.grad_clip_norm.to_string()),
        ("beta1".into(), c.beta1.to_string()),
        ("beta2".into(), c.beta2.to_string()),
        ("adam_eps".into(), c.adam_eps.to_string()),
    ]
}

pub fn finetune_pairs(f: &FinetuneSettings) -> Vec<(String, String)> {
    vec![
        ("epochs".into(), f.epochs.to_string()),
        ("batch_size".into(), f.batch_size.to_string()),
        ("peak_lr".into(), f.peak_lr.to_string()),
        ("warmup_frac".into(), f.warmup_frac.to_string()),
        ("weight_decay".into(), f.weight_decay.to_string()),
        ("grad_clip_norm".into(), f.grad_clip_norm.to_string()),
    ]
}

pub fn masking_pairs(m: &MaskingPolicy) -> Vec<(String, String)> {
    vec![
        ("select_prob".into(), m.select_prob.to_string()),
        ("mask_frac".into(), m.mask_frac.to_string()),
        ("random_frac".into(), m.random_frac.to_string()),
        ("keep_frac".into(), m.keep_frac.to_string()),
    ]
}
