use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sciedkit::checkpoint::Checkpoint;
use sciedkit::model::ModelConfig;
use sciedkit::training::{train_mlm, MaskingPolicy, TrainConfig};
use sciedkit::Tape;
use sciedkit_bench::{corpus, sentences, values, vocab};

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [32usize, 64, 128] {
        let a = values(n * n, 0.1).into_iter().map(|v| v as f32).collect::<Vec<_>>();
        let b = values(n * n, 0.7).into_iter().map(|v| v as f32).collect::<Vec<_>>();
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| {
                let mut t = Tape::<f32>::new();
                let x = t.constant([n, n], a.clone()).unwrap();
                let y = t.constant([n, n], b.clone()).unwrap();
                black_box(t.matmul(x, y).unwrap());
            })
        });
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let (batch, seq, heads, width) = (8usize, 32usize, 4usize, 16usize);
    let rows = batch * seq;
    let d = heads * width;
    let q = values(rows * d, 0.2).into_iter().map(|v| v as f32).collect::<Vec<_>>();
    let k = values(rows * d, 0.4).into_iter().map(|v| v as f32).collect::<Vec<_>>();
    let v = values(rows * d, 0.9).into_iter().map(|v| v as f32).collect::<Vec<_>>();
    let mut g = c.benchmark_group("attention");
    g.bench_function("forward", |bench| {
        bench.iter(|| {
            let mut t = Tape::<f32>::new();
            let (qv, kv, vv) = (
                t.constant([rows, d], q.clone()).unwrap(),
                t.constant([rows, d], k.clone()).unwrap(),
                t.constant([rows, d], v.clone()).unwrap(),
            );
            black_box(t.attention(qv, kv, vv, batch, heads, None).unwrap());
        })
    });
    g.bench_function("forward_backward", |bench| {
        bench.iter(|| {
            let mut t = Tape::<f32>::new();
            let (qv, kv, vv) = (
                t.variable([rows, d], q.clone()).unwrap(),
                t.variable([rows, d], k.clone()).unwrap(),
                t.variable([rows, d], v.clone()).unwrap(),
            );
            let o = t.attention(qv, kv, vv, batch, heads, None).unwrap();
            let loss = t.sum(o);
            t.backward(loss).unwrap();
            black_box(t.grad(qv).map(|g| g[0]));
        })
    });
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let docs = sentences(256);
    let vocab = vocab(&docs);
    let corpus = corpus(256);
    let cfg = TrainConfig {
        steps: 5,
        warmup_steps: 1,
        eval_every: 5,
        ..Default::default()
    };
    let policy = MaskingPolicy::default();
    let base = Checkpoint::<f32>::fresh(ModelConfig::default(), vocab.clone(), 1).unwrap();
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("mlm_5_steps_default_config", |bench| {
        bench.iter(|| {
            let mut model = base.model.clone();
            black_box(train_mlm(&mut model, &vocab, &corpus, &cfg, &policy).unwrap());
        })
    });
    g.finish();
}

fn tokenizer(c: &mut Criterion) {
    let docs = sentences(512);
    let vocab = vocab(&docs[..64]);
    c.bench_function("tokenizer/encode_512_sentences", |bench| {
        bench.iter(|| {
            for d in &docs {
                black_box(vocab.encode(d, 64).unwrap());
            }
        })
    });
}

criterion_group!(benches, matmul, attention, train_step, tokenizer);
criterion_main!(benches);
