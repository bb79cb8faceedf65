mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sciedkit::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use sciedkit::corpus::{generate_benchmark, oracle_label, DomainTag, SyntheticBenchmarkSpec};
use sciedkit::eval::*;
use sciedkit::model::{Batch, EncoderModel, ModelConfig};
use sciedkit::tensor::{finite_difference_check, Activation, Tape, Tensor, Var};
use sciedkit::tokenizer::{normalize, Vocabulary, CLS, SEP};
use sciedkit::training::*;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn report(n: usize, title: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (status, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n} ({title}): {status} [{:.1} s] {detail}",
        t.elapsed().as_secs_f64()
    );
    outcome.is_ok()
}

// ---- 1: gradients ---------------------------------------------------------

const OP_EPS: f64 = 1e-3;
const MODEL_EPS: f64 = 1e-2;
const GRAD_TOL: f64 = 1e-5;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> sciedkit::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(shape.clone(), random_tensor(&shape, seed).into_data())?;
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type OpCase = (&'static str, Vec<usize>, Box<dyn Fn(&mut Tape<f64>, Var) -> sciedkit::Result<Var>>);

fn op_cases() -> Vec<OpCase> {
    let pad = [false, false, true, false, false, false];
    vec![
        ("add", vec![3, 4], Box::new(|t, x| {
            let c = t.constant([3, 4], random_tensor(&[3, 4], 1).into_data())?;
            let y = t.add(x, c)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 2)
        })),
        ("sub", vec![3, 4], Box::new(|t, x| {
            let c = t.constant([3, 4], random_tensor(&[3, 4], 3).into_data())?;
            let y = t.sub(c, x)?;
            let y = t.mul(y, x)?;
            weighted_sum(t, y, 4)
        })),
        ("mul", vec![3, 4], Box::new(|t, x| {
            let y = t.mul(x, x)?;
            weighted_sum(t, y, 5)
        })),
        ("scale", vec![3, 4], Box::new(|t, x| {
            let y = t.scale(x, -1.7);
            let y = t.mul(y, x)?;
            weighted_sum(t, y, 6)
        })),
        ("square", vec![3, 4], Box::new(|t, x| {
            let y = t.square(x);
            weighted_sum(t, y, 7)
        })),
        ("sum", vec![3, 4], Box::new(|t, x| {
            let y = t.mul(x, x)?;
            Ok(t.sum(y))
        })),
        ("mean", vec![3, 4], Box::new(|t, x| {
            let y = t.mul(x, x)?;
            Ok(t.mean(y))
        })),
        ("reshape", vec![3, 4], Box::new(|t, x| {
            let y = t.reshape(x, [2, 6])?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 8)
        })),
        ("rows", vec![3, 4], Box::new(|t, x| {
            let y = t.rows(x, &[2, 0, 2, 1])?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 9)
        })),
        ("add_row", vec![3, 4], Box::new(|t, x| {
            let b = t.rows(x, &[0])?;
            let b = t.reshape(b, [4])?;
            let y = t.add_row(x, b)?;
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 10)
        })),
        ("matmul_left", vec![3, 4], Box::new(|t, x| {
            let b = t.constant([4, 3], random_tensor(&[4, 3], 11).into_data())?;
            let y = t.matmul(x, b)?;
            weighted_sum(t, y, 12)
        })),
        ("matmul_right", vec![3, 4], Box::new(|t, x| {
            let a = t.constant([2, 3], random_tensor(&[2, 3], 13).into_data())?;
            let y = t.matmul(a, x)?;
            weighted_sum(t, y, 14)
        })),
        ("matmul_t", vec![3, 4], Box::new(|t, x| {
            let y = t.matmul_t(x, x)?;
            weighted_sum(t, y, 15)
        })),
        ("linear", vec![4, 4], Box::new(|t, x| {
            let b = t.rows(x, &[2])?;
            let b = t.reshape(b, [4])?;
            let y = t.linear(x, x, b)?;
            weighted_sum(t, y, 16)
        })),
        ("softmax_axis0", vec![3, 4], Box::new(|t, x| {
            let y = t.softmax(x, 0)?;
            weighted_sum(t, y, 17)
        })),
        ("softmax_axis1", vec![3, 4], Box::new(|t, x| {
            let y = t.softmax(x, 1)?;
            weighted_sum(t, y, 18)
        })),
        ("layer_norm", vec![3, 4], Box::new(|t, x| {
            let g = t.rows(x, &[1])?;
            let g = t.reshape(g, [4])?;
            let b = t.rows(x, &[2])?;
            let b = t.reshape(b, [4])?;
            let y = t.layer_norm(x, g, b, 1e-12)?;
            weighted_sum(t, y, 19)
        })),
        ("gelu_tanh", vec![3, 4], Box::new(|t, x| {
            let y = t.activation(x, Activation::GeluTanh);
            weighted_sum(t, y, 20)
        })),
        ("gelu_erf", vec![3, 4], Box::new(|t, x| {
            let y = t.activation(x, Activation::GeluErf);
            weighted_sum(t, y, 21)
        })),
        ("relu", vec![3, 4], Box::new(|t, x| {
            // shift away from the kink at zero
            let c = t.constant([3, 4], (0..12).map(|i| if i % 2 == 0 { 2.0 } else { -2.0 }).collect())?;
            let y = t.add(x, c)?;
            let y = t.activation(y, Activation::Relu);
            let y = t.mul(y, y)?;
            weighted_sum(t, y, 22)
        })),
        ("tanh", vec![3, 4], Box::new(|t, x| {
            let y = t.tanh(x);
            weighted_sum(t, y, 23)
        })),
        ("attention", vec![18, 4], Box::new(move |t, x| {
            let q = t.rows(x, &[0, 1, 2, 3, 4, 5])?;
            let k = t.rows(x, &[6, 7, 8, 9, 10, 11])?;
            let v = t.rows(x, &[12, 13, 14, 15, 16, 17])?;
            let y = t.attention(q, k, v, 2, 2, Some(&pad))?;
            weighted_sum(t, y, 24)
        })),
        ("cross_entropy", vec![3, 4], Box::new(|t, x| t.cross_entropy(x, &[1, usize::MAX, 3], usize::MAX))),
    ]
}

fn toy_encoder_worst() -> sciedkit::Result<(String, f64)> {
    let cfg = ModelConfig {
        vocab_size: 12,
        max_len: 4,
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        n_layers: 4,
        n_classes: 3,
        dropout: 0.0,
        activation: Activation::GeluErf,
        tie_mlm_decoder: true,
        position_embeddings: true,
        layer_norm_eps: 1e-12,
    };
    let mut m = EncoderModel::<f64>::new(cfg, 17)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for p in m.params_mut() {
        for v in p.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let batch = Batch::from_ids(&[vec![CLS, 6, 7, SEP], vec![CLS, 9, SEP]])?;
    let (mlm_rows, mlm_targets, labels) = ([1usize, 2, 5], [7usize, 11, 9], [2usize, 0]);
    let mut worst = (String::new(), 0.0);
    for idx in 0..m.params().len() {
        let x = m.params()[idx].clone();
        let c = finite_difference_check(
            |tape, var| {
                let bound = m.bind_replacing(tape, idx, var)?;
                let enc = bound.encode(tape, &batch, None)?;
                let mlm = bound.mlm_logits(tape, enc.hidden, &mlm_rows)?;
                let l1 = tape.cross_entropy(mlm, &mlm_targets, usize::MAX)?;
                let cls = bound.cls_logits(tape, enc.hidden, &batch)?;
                let l2 = tape.cross_entropy(cls, &labels, usize::MAX)?;
                tape.add(l1, l2)
            },
            &x,
            MODEL_EPS,
        )?;
        if c.max_rel_error >= worst.1 {
            worst = (m.param_info()[idx].name.clone(), c.max_rel_error);
        }
    }
    Ok(worst)
}

fn criterion_gradients() -> Outcome {
    let t = Instant::now();
    let mut worst_op = ("", 0.0f64);
    let mut failures = Vec::new();
    let cases = op_cases();
    let n_ops = cases.len();
    for (i, (name, shape, f)) in cases.into_iter().enumerate() {
        let x = random_tensor(&shape, 100 + i as u64);
        let err = finite_difference_check(f, &x, OP_EPS).map_err(|e| format!("{name}: {e}"))?.max_rel_error;
        if err >= GRAD_TOL {
            failures.push(format!("{name} {err:.2e}"));
        }
        if err >= worst_op.1 {
            worst_op = (name, err);
        }
    }
    let (tensor, model_err) = toy_encoder_worst().map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    if model_err >= GRAD_TOL {
        failures.push(format!("encoder {tensor} {model_err:.2e}"));
    }
    check(
        failures.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{n_ops} ops, worst {} {:.2e}; toy encoder worst {tensor} {model_err:.2e}; {:.1} s{}",
            worst_op.0,
            worst_op.1,
            elapsed.as_secs_f64(),
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
        ),
    )
}

// ---- 2: masking -----------------------------------------------------------

fn criterion_masking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rows: Vec<Vec<u32>> = (0..250)
        .map(|r| {
            let mut s = vec![CLS];
            s.extend((0..60).map(|i| 300 + ((r * 13 + i * 7) % 90) as u32));
            s.push(SEP);
            s
        })
        .collect();
    let mut total = MaskStats::default();
    for chunk in rows.chunks(32) {
        total += mask_batch(chunk, &MaskingPolicy::default(), 261..400, &mut rng)
            .map_err(|e| e.to_string())?
            .stats;
    }
    let sel = total.selected as f64 / total.candidates as f64;
    let frac = |n: usize| n as f64 / total.selected as f64;
    let (m, r, k) = (frac(total.masked), frac(total.randomized), frac(total.kept));
    check(
        total.candidates >= 10_000
            && (sel - 0.15).abs() <= 0.01
            && (m - 0.8).abs() <= 0.03
            && (r - 0.1).abs() <= 0.03
            && (k - 0.1).abs() <= 0.03,
        format!(
            "{} candidates, selected {sel:.4}, mask/random/keep {m:.3}/{r:.3}/{k:.3}",
            total.candidates
        ),
    )
}

// ---- 3: overfit -----------------------------------------------------------

fn criterion_overfit() -> Outcome {
    let t = Instant::now();
    let docs = common::overfit_sentences();
    let vocab = common::vocab_for(&docs);
    let corpus = common::corpus("tiny", docs, DomainTag::General);
    let ck = Checkpoint::<f32>::fresh(ModelConfig::default(), vocab, 1).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        steps: 2000,
        eval_every: 100,
        ..Default::default()
    };
    let (_, curve) = pretrain(ck, &corpus, &cfg, &MaskingPolicy::default()).map_err(|e| e.to_string())?;
    let last = curve.last_loss().ok_or("no loss recorded")?;
    let elapsed = t.elapsed();
    check(
        last < 0.2 && elapsed < Duration::from_secs(120),
        format!("final MLM loss {last:.4} after 2000 steps in {:.1} s", elapsed.as_secs_f64()),
    )
}

// ---- 4 and 5: domain shift ------------------------------------------------

struct ShiftResult {
    base: Vec<f64>,
    in_domain: Vec<f64>,
    off_domain: Vec<f64>,
    elapsed: Duration,
}

fn domain_shift() -> Result<ShiftResult, String> {
    let t = Instant::now();
    let bench = generate_benchmark(&SyntheticBenchmarkSpec::default()).map_err(|e| e.to_string())?;
    let docs = bench
        .corpus_a
        .documents()
        .iter()
        .chain(bench.corpus_b.documents())
        .chain(bench.corpus_c.documents());
    let vocab = Arc::new(Vocabulary::build(docs.map(String::as_str), 2048, 2).map_err(|e| e.to_string())?);
    let res = MatrixResources::<f32>::new(
        vocab,
        [bench.corpus_a.clone(), bench.corpus_b.clone(), bench.corpus_c.clone()],
    );
    let stage = |steps: usize| TrainConfig {
        steps,
        warmup_steps: steps / 10,
        eval_every: 100,
        peak_lr: 3e-3,
        ..Default::default()
    };
    let cfg = MatrixConfig {
        model: ModelConfig {
            max_len: 32,
            d_model: 32,
            n_heads: 2,
            d_ff: 128,
            n_layers: 2,
            ..Default::default()
        },
        pretrain: stage(1500),
        continual: stage(1000),
        finetune: FinetuneSettings {
            epochs: 20,
            peak_lr: 5e-4,
            ..Default::default()
        },
        seeds: (0..5).collect(),
        ..Default::default()
    };
    let variants = parse_variants("base: corpus_A | b: corpus_A > corpus_B | c: corpus_A > corpus_C")
        .map_err(|e| e.to_string())?;
    let rep = run_matrix(&variants, &bench.tasks, &res, &cfg).map_err(|e| e.to_string())?;
    let averages = |v: &str| -> Result<Vec<f64>, String> {
        rep.seed_averages(v)
            .ok_or(format!("no variant {v}"))?
            .into_iter()
            .map(|a| a.ok_or(format!("variant {v} has a failed cell")))
            .collect()
    };
    Ok(ShiftResult {
        base: averages("base")?,
        in_domain: averages("b")?,
        off_domain: averages("c")?,
        elapsed: t.elapsed(),
    })
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_adaptation(r: &Result<ShiftResult, String>) -> Outcome {
    let r = r.as_ref().map_err(Clone::clone)?;
    let wins = r.in_domain.iter().zip(&r.base).filter(|(b, a)| b > a).count();
    let gain = mean(&r.in_domain) - mean(&r.base);
    check(
        wins >= 4 && gain >= 0.02 && r.elapsed < Duration::from_secs(15 * 60),
        format!(
            "A>B beats A in {wins}/5 seeds, mean gain {:.1} pp (A: {}; A>B: {}); {:.0} s",
            gain * 100.0,
            fmt(&r.base),
            fmt(&r.in_domain),
            r.elapsed.as_secs_f64()
        ),
    )
}

fn criterion_off_domain(r: &Result<ShiftResult, String>) -> Outcome {
    let r = r.as_ref().map_err(Clone::clone)?;
    let hits = r.off_domain.iter().zip(&r.in_domain).filter(|(c, b)| c <= b).count();
    check(
        hits >= 4,
        format!("A>C at or below A>B in {hits}/5 seeds (A>C: {})", fmt(&r.off_domain)),
    )
}

// ---- 6: table arithmetic --------------------------------------------------

fn criterion_tables() -> Outcome {
    let grid = vec![
        vec![0.792, 0.804, 0.815, 0.821, 0.815],
        vec![0.766, 0.727, 0.742, 0.719, 0.766],
        vec![0.895, 0.882, 0.889, 0.915, 0.928],
        vec![0.934, 0.954, 0.921, 0.954, 0.954],
    ];
    let variants = ["BERT", "SciEdJ-BERT", "SciEdJ-SciBERT", "SR2-BERT", "SR2-SciBERT"];
    let report = EvalReport::from_values(&variants, &["G4", "G6", "S2", "S3"], &grid).map_err(|e| e.to_string())?;
    let t1 = summarize(&report).csv.lines().last().unwrap_or_default().to_string();

    let bert = [0.913, 0.831, 0.958, 0.920, 0.959, 0.845, 0.864];
    let sr1 = [0.929, 0.831, 0.970, 0.926, 0.973, 0.845, 0.864];
    let grid2: Vec<Vec<f64>> = (0..7).map(|i| vec![bert[i], sr1[i]]).collect();
    let tasks: Vec<String> = (1..=7).map(|i| format!("item{i}")).collect();
    let tasks: Vec<&str> = tasks.iter().map(String::as_str).collect();
    let report2 = EvalReport::from_values(&["BERT", "SR1-BERT"], &tasks, &grid2).map_err(|e| e.to_string())?;
    let t2 = summarize(&report2).csv.lines().last().unwrap_or_default().to_string();
    check(
        t1 == "average,0.847,0.842,0.842,0.852,0.866"
            && t2 == "average,0.899,0.905"
            && displayed_average(&bert) != Some(904)
            && displayed_average(&sr1) != Some(912),
        format!("table 1 {t1:?}; table 2 {t2:?} (published 0.904/0.912 differ)"),
    )
}

// ---- 7: round trips -------------------------------------------------------

fn criterion_round_trips() -> Outcome {
    let bench = generate_benchmark(&SyntheticBenchmarkSpec::default()).map_err(|e| e.to_string())?;
    let mut oracle_total = 0;
    let mut oracle_bad = 0;
    for task in &bench.tasks {
        for e in &task.examples {
            oracle_total += 1;
            if oracle_label(&e.text, &bench.lexicon, task.n_classes) != e.label {
                oracle_bad += 1;
            }
        }
    }

    let vocab = Arc::new(
        Vocabulary::build(bench.corpus_a.documents().iter().map(String::as_str), 2048, 2).map_err(|e| e.to_string())?,
    );
    let words: Vec<&str> = vocab
        .pieces()
        .iter()
        .skip(vocab.learned_ids().start as usize)
        .map(String::as_str)
        .filter(|p| !p.starts_with("##") && p.chars().all(char::is_alphanumeric))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut tokenizer_bad = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..16);
        let text = (0..n)
            .map(|_| {
                let w = words[rng.random_range(0..words.len())];
                if rng.random_bool(0.2) { w.to_uppercase() } else { w.to_string() }
            })
            .collect::<Vec<_>>()
            .join(if rng.random_bool(0.5) { " " } else { "  " });
        let e = vocab.encode(&text, 64).map_err(|e| e.to_string())?;
        if vocab.decode(&e.ids).map_err(|e| e.to_string())? != normalize(&text) {
            tokenizer_bad += 1;
        }
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut exact = true;
    for seed in [1, 2] {
        let ck = Checkpoint::<f64>::fresh(common::tiny_config(), vocab.clone(), seed).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("m{seed}.ckpt"));
        save_checkpoint(&path, &ck).map_err(|e| e.to_string())?;
        let back = load_checkpoint::<f64>(&path).map_err(|e| e.to_string())?;
        let bits = |c: &Checkpoint<f64>| -> Vec<u64> {
            c.model.params().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
        };
        exact &= bits(&ck) == bits(&back) && ck.model.config() == back.model.config();
        let f32_ck = ck.cast::<f32>();
        let path = dir.path().join(format!("s{seed}.ckpt"));
        save_checkpoint(&path, &f32_ck).map_err(|e| e.to_string())?;
        let back = load_checkpoint::<f32>(&path).map_err(|e| e.to_string())?;
        exact &= f32_ck.model.params().iter().zip(back.model.params()).all(|(a, b)| {
            a.data().iter().map(|v| v.to_bits()).eq(b.data().iter().map(|v| v.to_bits()))
        });
    }
    check(
        tokenizer_bad == 0 && exact && oracle_bad == 0,
        format!(
            "tokenizer {}/1000 sentences ({} words); checkpoints bit-exact: {exact}; oracle {}/{oracle_total} labels",
            1000 - tokenizer_bad,
            words.len(),
            oracle_total - oracle_bad
        ),
    )
}

// ---- 8 and 9: command line ------------------------------------------------

struct Run {
    code: i32,
    stderr: String,
}

/// The `sciedkit` binary next to this test's directory, if it has been built.
fn binary() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let p = exe.parent()?.parent()?.join(format!("sciedkit{}", std::env::consts::EXE_SUFFIX));
    p.exists().then_some(p)
}

fn sciedkit(args: &[&str]) -> Run {
    if let Some(bin) = binary() {
        let o = std::process::Command::new(bin)
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .expect("binary runs");
        return Run {
            code: o.status.code().unwrap_or(-1),
            stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
        };
    }
    let args: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = sciedkit::cli::run(&args, &mut out, &mut err);
    Run {
        code,
        stderr: String::from_utf8_lossy(&err).into_owned(),
    }
}

fn via() -> &'static str {
    if binary().is_some() {
        "binary"
    } else {
        "in-process"
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = "\
benchmark.base_words = 20
benchmark.a_words = 40
benchmark.b_words = 20
benchmark.c_words = 40
benchmark.synonyms_per_category = 4
benchmark.context_words_per_category = 2
benchmark.corpus_a_sentences = 200
benchmark.corpus_b_sentences = 100
benchmark.corpus_c_sentences = 100
benchmark.n_tasks = 2
benchmark.examples_per_task = 60
model.max_len = 24
model.d_model = 16
model.n_heads = 2
model.d_ff = 32
model.n_layers = 1
";

fn criterion_no_dilution() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let docs = common::overfit_sentences();
    let corpus = d.join("mixed.txt");
    std::fs::write(&corpus, docs.join("\n\n")).map_err(|e| e.to_string())?;
    let vocab_path = d.join("vocab.txt");
    common::vocab_for(&docs).save(&vocab_path).map_err(|e| e.to_string())?;
    let base = d.join("base.ckpt");
    let r = sciedkit(&[
        "pretrain", "--corpus", s(&corpus), "--vocab", s(&vocab_path), "--output", s(&base),
        "--model.d_model", "16", "--model.n_heads", "2", "--model.d_ff", "32", "--model.n_layers", "1",
        "--train.steps", "2", "--train.warmup_steps", "1", "--train.batch_size", "4",
    ]);
    if r.code != 0 {
        return Err(format!("pretrain failed with {}: {}", r.code, r.stderr));
    }
    let out = d.join("never.ckpt");
    let r = sciedkit(&[
        "continue-pretrain", "--checkpoint", s(&base), "--corpus", s(&corpus), "--corpus.tag", "mixed",
        "--output", s(&out),
    ]);
    let message = r.stderr.lines().find(|l| l.contains("no-dilution")).unwrap_or("").trim().to_string();
    check(
        r.code == 2 && !message.is_empty() && !out.exists(),
        format!("exit {} via {}: {message:?}", r.code, via()),
    )
}

fn criterion_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let cfg = d.join("matrix.cfg");
    std::fs::write(
        &cfg,
        format!(
            "command = run-matrix\nprecision = f64\n\
             variants = base: corpus_A | b: corpus_A > corpus_B | c: corpus_A > corpus_C\n\
             vocab.size = 400\nmatrix.seeds = 2\n{SMALL}\
             pretrain.steps = 20\npretrain.batch_size = 8\npretrain.warmup_steps = 2\n\
             continual.steps = 10\ncontinual.batch_size = 8\ncontinual.warmup_steps = 1\n\
             finetune.epochs = 2\n"
        ),
    )
    .map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for run in ["first", "second"] {
        let prefix = d.join(run);
        let r = sciedkit(&["run-matrix", "--config", s(&cfg), "--seed", "5", "--output", s(&prefix)]);
        if r.code != 0 {
            return Err(format!("run-matrix exited {}: {}", r.code, r.stderr));
        }
        let read = |ext: &str| std::fs::read(d.join(format!("{run}.{ext}"))).map_err(|e| e.to_string());
        files.push((read("csv")?, read("seeds.csv")?));
    }
    let same = files[0] == files[1];
    check(
        same && !files[0].0.is_empty(),
        format!(
            "report csv {} bytes, per-seed csv {} bytes, identical: {same} (via {})",
            files[0].0.len(),
            files[0].1.len(),
            via()
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut passed = Vec::new();
    passed.push(report(1, "gradient suite", criterion_gradients));
    passed.push(report(2, "masking statistics", criterion_masking));
    passed.push(report(3, "overfit", criterion_overfit));
    let shift = catch_unwind(domain_shift).unwrap_or_else(|_| Err("domain-shift matrix panicked".into()));
    passed.push(report(4, "domain adaptation", || criterion_adaptation(&shift)));
    passed.push(report(5, "off-domain continual", || criterion_off_domain(&shift)));
    passed.push(report(6, "table arithmetic", criterion_tables));
    passed.push(report(7, "round trips", criterion_round_trips));
    passed.push(report(8, "no-dilution contract", criterion_no_dilution));
    passed.push(report(9, "end-to-end determinism", criterion_determinism));
    let failed: Vec<usize> = passed.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
