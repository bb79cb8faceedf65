use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::config::{Command, RunConfig};
use super::{EXIT_OK, EXIT_TRAINING};
use crate::checkpoint::{checkpoint_dtype, load_checkpoint, save_checkpoint, Checkpoint};
use crate::corpus::{
    generate_benchmark, load_corpus, parse_scoring_tasks, split, Corpus, DomainTag, LabeledExample,
    ScoringTask,
};
use crate::error::{Error, Result};
use crate::eval::{derive_seed, parse_variants, run_matrix, summarize, write_report, MatrixConfig, MatrixResources};
use crate::tensor::{DType, Scalar};
use crate::tokenizer::Vocabulary;
use crate::training::{check_no_dilution, continual_pretrain, evaluate, finetune, pretrain, LossCurve};

macro_rules! with_precision {
    ($dtype:expr, $f:ident($($arg:expr),*)) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
        }
    };
}

pub(super) fn execute(rc: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    match rc.command {
        Command::BuildVocab => build_vocab(rc, out),
        Command::GenerateBenchmark => benchmark(rc, out),
        Command::Pretrain => with_precision!(precision(rc, None)?, pretrain_cmd(rc, out)),
        Command::ContinuePretrain => {
            let dt = precision(rc, Some(&rc.path("checkpoint")?))?;
            with_precision!(dt, continue_cmd(rc, out))
        }
        Command::Finetune => {
            let dt = precision(rc, Some(&rc.path("checkpoint")?))?;
            with_precision!(dt, finetune_cmd(rc, out))
        }
        Command::Evaluate => {
            let dt = precision(rc, Some(&rc.path("checkpoint")?))?;
            with_precision!(dt, evaluate_cmd(rc, out))
        }
        Command::RunMatrix => with_precision!(precision(rc, None)?, matrix_cmd(rc, out)),
        Command::InspectAttention => {
            let dt = precision(rc, Some(&rc.path("checkpoint")?))?;
            with_precision!(dt, attention_cmd(rc, out))
        }
    }
}

fn precision(rc: &RunConfig, checkpoint: Option<&Path>) -> Result<DType> {
    match rc.raw("precision").unwrap_or("auto") {
        "auto" => match checkpoint {
            Some(p) => checkpoint_dtype(p),
            None => Ok(DType::F32),
        },
        other => other.parse(),
    }
}

fn say(out: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    out.write_all(text.as_ref().as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        })
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn single_corpus(rc: &RunConfig, tag: DomainTag) -> Result<Corpus> {
    let files = rc.list("corpus");
    match files.as_slice() {
        [one] => load_corpus(Path::new(one), tag),
        _ => Err(Error::Config(format!(
            "key corpus: {} takes exactly one corpus file, got {}",
            rc.command,
            files.len()
        ))),
    }
}

fn curve_summary(curve: &LossCurve) -> String {
    match (curve.points.first(), curve.points.last()) {
        (Some(a), Some(b)) if a.step == b.step => format!("MLM loss {:.4} at step {}", b.loss, b.step),
        (Some(a), Some(b)) => format!("MLM loss {:.4} at step {} -> {:.4} at step {}", a.loss, a.step, b.loss, b.step),
        _ => "no training steps".into(),
    }
}

fn build_vocab(rc: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let corpora = rc
        .list("corpus")
        .iter()
        .map(|p| load_corpus(Path::new(p), DomainTag::General))
        .collect::<Result<Vec<_>>>()?;
    if corpora.is_empty() {
        return Err(Error::Config("key corpus: no corpus files given".into()));
    }
    let docs = corpora.iter().flat_map(|c| c.documents().iter().map(String::as_str));
    let vocab = Vocabulary::build(docs, rc.usize("vocab.size")?, rc.u64("vocab.min_freq")?)?;
    let path = rc.path("output")?;
    vocab.save(&path)?;
    say(out, format!("wrote {} pieces to {}\n", vocab.len(), path.display()))?;
    Ok(EXIT_OK)
}

fn benchmark(rc: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let spec = rc.benchmark()?;
    let bench = generate_benchmark(&spec)?;
    let dir = rc.path("output_dir")?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    for c in [&bench.corpus_a, &bench.corpus_b, &bench.corpus_c] {
        write_file(&dir.join(format!("{}.txt", c.id())), c.to_text())?;
    }
    let mut tsv = String::from("task_id\tresponse\tlabel\n");
    for t in &bench.tasks {
        tsv.extend(t.to_tsv().lines().skip(1).map(|l| format!("{l}\n")));
    }
    write_file(&dir.join("tasks.tsv"), tsv)?;
    let lex = &bench.lexicon;
    let mut words = String::from("word\trole\n");
    for (role, list) in [("base", &lex.base), ("a", &lex.a), ("b", &lex.b), ("c", &lex.c)] {
        for w in list {
            let _ = writeln!(words, "{w}\t{role}");
        }
    }
    for (i, cat) in lex.categories.iter().enumerate() {
        for w in &cat.synonyms {
            let _ = writeln!(words, "{w}\tconcept_{i}");
        }
        for w in &cat.context {
            let _ = writeln!(words, "{w}\tcontext_{i}");
        }
    }
    write_file(&dir.join("lexicon.tsv"), words)?;
    say(
        out,
        format!(
            "wrote corpus_A ({}, general), corpus_B ({}, in_domain), corpus_C ({}, off_domain), \
             {} tasks and the lexicon to {}\n",
            bench.corpus_a.len(),
            bench.corpus_b.len(),
            bench.corpus_c.len(),
            bench.tasks.len(),
            dir.display()
        ),
    )?;
    Ok(EXIT_OK)
}

fn save_with_curve<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>, curve: &LossCurve) -> Result<()> {
    save_checkpoint(path, ckpt)?;
    write_file(&with_suffix(path, ".loss.csv"), curve.to_csv())
}

fn pretrain_cmd<T: Scalar>(rc: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let vocab_path = rc.path("vocab")?;
    let vocab = Arc::new(Vocabulary::load(&vocab_path)?);
    let corpus = single_corpus(rc, rc.tag("corpus.tag")?)?;
    let seed = rc.seed()?;
    let train = rc.train("train")?;
    let masking = rc.masking()?;
    let mut init = Checkpoint::<T>::fresh(rc.model()?, vocab, derive_seed(seed, "init"))?;
    init.vocab_path = Some(std::path::absolute(&vocab_path).unwrap_or(vocab_path));
    init.metadata.insert("seed".into(), seed.to_string());
    let (ckpt, curve) = pretrain(init, &corpus, &train, &masking)?;
    let path = rc.path("output")?;
    save_with_curve(&path, &ckpt, &curve)?;
    say(
        out,
        format!(
            "pretrained {} parameters on {} ({} documents): {}\nwrote {}\n",
            ckpt.model.num_parameters(),
            corpus.id(),
            corpus.len(),
            curve_summary(&curve),
            path.display()
        ),
    )?;
    Ok(EXIT_OK)
}

fn continue_cmd<T: Scalar>(rc: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let corpus = single_corpus(rc, rc.tag("corpus.tag")?)?;
    let train = rc.train("train")?;
    let masking = rc.masking()?;
    check_no_dilution(&corpus)?;
    let ckpt = load_checkpoint::<T>(&rc.path("checkpoint")?)?;
    let (ckpt, curve) = continual_pretrain(ckpt, &corpus, &train, &masking)?;
    let path = rc.path("output")?;
    save_with_curve(&path, &ckpt, &curve)?;
    say(
        out,
        format!(
            "continued on {} ({}): {}\nlineage: {}\nwrote {}\n",
            corpus.id(),
            corpus.tag(),
            curve_summary(&curve),
            ckpt.lineage.describe(),
            path.display()
        ),
    )?;
    Ok(EXIT_OK)
}

fn select_task(rc: &RunConfig) -> Result<ScoringTask> {
    let path = rc.path("task")?;
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let mut tasks = parse_scoring_tasks(&text, Some(&path))?;
    let wanted = rc.raw("task.id").map(str::to_string);
    match wanted {
        Some(id) => {
            let pos = tasks.iter().position(|t| t.task_id == id).ok_or_else(|| {
                Error::Config(format!("key task.id: no task {id:?} in {}", path.display()))
            })?;
            Ok(tasks.swap_remove(pos))
        }
        None if tasks.len() == 1 => Ok(tasks.remove(0)),
        None => {
            let ids: Vec<&str> = tasks.iter().map(|t| t.task_id.as_str()).collect();
            Err(Error::Config(format!(
                "{} holds tasks {ids:?}; choose one with task.id",
                path.display()
            )))
        }
    }
}

fn mapping_text(m: &[i64]) -> String {
    m.iter().map(i64::to_string).collect::<Vec<_>>().join(",")
}

fn finetune_cmd<T: Scalar>(rc: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let base = load_checkpoint::<T>(&rc.path("checkpoint")?)?;
    let task = select_task(rc)?;
    let seed = rc.seed()?;
    let sp = split(&task, rc.split_ratios()?, derive_seed(seed, &format!("split {}", task.task_id)))?;
    let settings = rc.finetune()?;
    let tc = settings.train_config(sp.train.len(), derive_seed(seed, &format!("finetune {}", task.task_id)));
    let outcome = finetune(&base, &sp.train, &sp.dev, task.n_classes, &tc)?;
    let test = evaluate(&outcome.checkpoint, &sp.test)?;
    let mut ckpt = outcome.checkpoint;
    ckpt.metadata.insert("task.id".into(), task.task_id.clone());
    ckpt.metadata.insert("task.label_mapping".into(), mapping_text(&task.label_mapping));
    ckpt.metadata.insert("task.seed".into(), seed.to_string());
    ckpt.metadata.insert("task.test_accuracy".into(), format!("{test:.6}"));
    let path = rc.path("output")?;
    save_with_curve(&path, &ckpt, &outcome.curve)?;
    let dev = outcome
        .best_dev_accuracy
        .map(|a| format!("{a:.3}"))
        .unwrap_or_else(|| "n/a".into());
    say(
        out,
        format!(
            "fine-tuned on {} ({} train / {} dev / {} test, {} classes)\nbest dev accuracy {dev} at step {}\ntest accuracy {test:.3}\nwrote {}\n",
            task.task_id,
            sp.train.len(),
            sp.dev.len(),
            sp.test.len(),
            task.n_classes,
            outcome.best_step,
            path.display()
        ),
    )?;
    Ok(EXIT_OK)
}

/// Maps a task's labels onto the classes a fine-tuned checkpoint was
/// trained with, through the original label values.
fn align_labels<T: Scalar>(ckpt: &Checkpoint<T>, task: &ScoringTask, examples: &[LabeledExample]) -> Result<Vec<LabeledExample>> {
    let n_classes = ckpt.model.config().n_classes;
    let trained: Option<Vec<i64>> = match ckpt.metadata.get("task.label_mapping") {
        Some(m) => Some(
            m.split(',')
                .map(|x| {
                    x.parse()
                        .map_err(|_| Error::MalformedCheckpoint(format!("label mapping {m:?}")))
                })
                .collect::<Result<_>>()?,
        ),
        None => None,
    };
    examples
        .iter()
        .map(|e| {
            let original = task.label_mapping[e.label];
            let class = match &trained {
                Some(m) => m.iter().position(|&l| l == original),
                None => Some(e.label),
            };
            match class {
                Some(c) if c < n_classes => Ok(LabeledExample {
                    text: e.text.clone(),
                    label: c,
                }),
                _ => Err(Error::Data {
                    path: None,
                    line: None,
                    message: format!(
                        "task {}: label {original} was not among the checkpoint's classes",
                        task.task_id
                    ),
                }),
            }
        })
        .collect()
}

fn evaluate_cmd<T: Scalar>(rc: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let ckpt = load_checkpoint::<T>(&rc.path("checkpoint")?)?;
    let task = select_task(rc)?;
    let which = rc.str("evaluate.split")?;
    let examples = if which == "all" {
        task.examples.clone()
    } else {
        let sp = split(&task, rc.split_ratios()?, derive_seed(rc.seed()?, &format!("split {}", task.task_id)))?;
        match which.as_str() {
            "train" => sp.train,
            "dev" => sp.dev,
            _ => sp.test,
        }
    };
    let aligned = align_labels(&ckpt, &task, &examples)?;
    let acc = evaluate(&ckpt, &aligned)?;
    say(
        out,
        format!("{} ({which}, {} examples): accuracy {acc:.3}\n", task.task_id, aligned.len()),
    )?;
    Ok(EXIT_OK)
}

fn file_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn matrix_inputs(rc: &RunConfig) -> Result<(Vec<Corpus>, Vec<ScoringTask>)> {
    if rc.raw("source") == Some("synthetic") {
        for key in ["corpora", "tasks"] {
            if rc.is_set(key) {
                return Err(Error::Config(format!(
                    "key {key} is only used with source = files"
                )));
            }
        }
        let bench = generate_benchmark(&rc.benchmark()?)?;
        return Ok((vec![bench.corpus_a, bench.corpus_b, bench.corpus_c], bench.tasks));
    }
    let mut corpora = Vec::new();
    for item in rc.list("corpora") {
        let (path, tag) = item.rsplit_once(':').ok_or_else(|| {
            Error::Config(format!("key corpora: {item:?} is not path:tag"))
        })?;
        corpora.push(load_corpus(Path::new(path), tag.parse()?)?);
    }
    let mut tasks = Vec::new();
    for file in rc.list("tasks") {
        let path = PathBuf::from(&file);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        tasks.extend(parse_scoring_tasks(&text, Some(&path))?);
    }
    if corpora.is_empty() || tasks.is_empty() {
        return Err(Error::Config("source = files needs both corpora and tasks".into()));
    }
    Ok((corpora, tasks))
}

fn matrix_cmd<T: Scalar>(rc: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let variants = parse_variants(&rc.str("variants")?)?;
    let (corpora, tasks) = matrix_inputs(rc)?;
    let vocab = match rc.raw("matrix.vocab") {
        Some(p) => Vocabulary::load(Path::new(p))?,
        None => Vocabulary::build(
            corpora.iter().flat_map(|c| c.documents().iter().map(String::as_str)),
            rc.usize("vocab.size")?,
            rc.u64("vocab.min_freq")?,
        )?,
    };
    let mut res = MatrixResources::<T>::new(Arc::new(vocab), corpora);
    for file in rc.list("checkpoints") {
        let path = PathBuf::from(&file);
        res.checkpoints.insert(file_id(&path), load_checkpoint::<T>(&path)?);
    }
    let seed = rc.seed()?;
    let n_seeds = rc.u64("matrix.seeds")?;
    if n_seeds == 0 {
        return Err(Error::Config("key matrix.seeds must be at least 1".into()));
    }
    let cfg = MatrixConfig {
        model: rc.model()?,
        pretrain: rc.train("pretrain")?,
        continual: rc.train("continual")?,
        finetune: rc.finetune()?,
        masking: rc.masking()?,
        split_ratios: rc.split_ratios()?,
        seeds: (seed..seed + n_seeds).collect(),
    };
    let mut report = run_matrix(&variants, &tasks, &res, &cfg)?;
    let config: BTreeMap<String, String> = rc
        .pairs()
        .map(|(k, v)| (format!("config.{k}"), v.replace('\n', " ")))
        .collect();
    report.metadata.extend(config);
    let files = write_report(&report, &rc.path("output")?)?;
    say(out, summarize(&report).text)?;
    say(
        out,
        format!(
            "wrote {}, {}, {} and {}\n",
            files.csv.display(),
            files.text.display(),
            files.per_seed.display(),
            files.meta.display()
        ),
    )?;
    let failed: Vec<String> = report
        .metadata
        .iter()
        .filter(|(k, _)| k.starts_with("error."))
        .map(|(k, v)| format!("{}: {v}", &k["error.".len()..]))
        .collect();
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        say(out, format!("{} cell(s) failed:\n  {}\n", failed.len(), failed.join("\n  ")))?;
        Ok(EXIT_TRAINING)
    }
}

/// Token-labeled attention matrix with a row-sum column.
pub fn render_attention(tokens: &[String], weights: &[Vec<f64>], layer: usize, head: usize) -> String {
    let w = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(0).max(5);
    let mut s = format!("layer {layer}, head {head}: row = query token, column = key token\n");
    let _ = write!(s, "{:<w$}", "");
    for t in tokens {
        let _ = write!(s, " {t:>w$}");
    }
    let _ = writeln!(s, "  {:>5}", "sum");
    for (t, row) in tokens.iter().zip(weights) {
        let _ = write!(s, "{t:<w$}");
        for v in row {
            let _ = write!(s, " {v:>w$.3}");
        }
        let _ = writeln!(s, "  {:>5.3}", row.iter().sum::<f64>());
    }
    s
}

fn attention_cmd<T: Scalar>(rc: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let ckpt = load_checkpoint::<T>(&rc.path("checkpoint")?)?;
    let (layer, head) = (rc.usize("layer")?, rc.usize("head")?);
    let text = rc.str("text")?;
    let map = ckpt.model.attention_map(&ckpt.vocab, &text, layer, head)?;
    say(out, render_attention(&map.tokens, &map.weights, layer, head))?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_table_layout() {
        let tokens = vec!["[CLS]".to_string(), "cats".into(), "[SEP]".into()];
        let w = vec![vec![0.5, 0.25, 0.25], vec![0.0, 1.0, 0.0], vec![0.2, 0.3, 0.5]];
        let s = render_attention(&tokens, &w, 0, 1);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[1].contains("[CLS]") && lines[1].ends_with("sum"));
        assert!(lines[2].starts_with("[CLS]") && lines[2].ends_with("1.000"));
        assert!(lines[3].contains("1.000"));
    }
}
