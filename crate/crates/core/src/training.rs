//! MLM pre-training, continual pre-training and fine-tuning.

use std::fmt::Write as _;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::corpus::{Corpus, DomainTag, LabeledExample};
use crate::error::{Error, Result};
use crate::model::{Batch, EncoderModel, ParamGroup, ParamInfo};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::tokenizer::{Vocabulary, CLS, MASK, MIN_VOCAB_SIZE, NUM_SPECIAL, SEP};

/// Target marker for positions that carry no MLM loss.
pub const IGNORE: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskingPolicy {
    pub select_prob: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
    pub keep_frac: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            select_prob: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
            keep_frac: 0.1,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.select_prob) {
            return Err(Error::Config(format!(
                "select_prob {} outside [0, 1)",
                self.select_prob
            )));
        }
        let fracs = [self.mask_frac, self.random_frac, self.keep_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "mask/random/keep fractions {fracs:?} must lie in [0, 1] and sum to 1"
            )));
        }
        Ok(())
    }
}

/// Counts of what masking did to a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MaskStats {
    pub candidates: usize,
    pub selected: usize,
    pub masked: usize,
    pub randomized: usize,
    pub kept: usize,
}

impl std::ops::AddAssign for MaskStats {
    fn add_assign(&mut self, o: Self) {
        self.candidates += o.candidates;
        self.selected += o.selected;
        self.masked += o.masked;
        self.randomized += o.randomized;
        self.kept += o.kept;
    }
}

/// A corrupted batch with its MLM targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmBatch {
    pub batch: Batch,
    /// Original id at selected flat positions, [`IGNORE`] elsewhere.
    pub targets: Vec<usize>,
    pub stats: MaskStats,
}

impl MlmBatch {
    /// Flat rows carrying a target, with those targets.
    pub fn selected(&self) -> (Vec<usize>, Vec<usize>) {
        self.targets
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != IGNORE)
            .map(|(i, &t)| (i, t))
            .unzip()
    }
}

fn is_candidate(id: u32) -> bool {
    id as usize >= NUM_SPECIAL
}

/// Ids random replacement draws from: learned pieces when there are any.
pub fn replacement_range(vocab_size: usize) -> Range<u32> {
    if vocab_size > MIN_VOCAB_SIZE {
        MIN_VOCAB_SIZE as u32..vocab_size as u32
    } else {
        NUM_SPECIAL as u32..vocab_size.max(NUM_SPECIAL + 1) as u32
    }
}

/// Dynamic masking of `rows` (unpadded id sequences). Each non-special
/// position is selected with `select_prob`; a selected position becomes
/// MASK, a random id from `replacement`, or stays, per the policy fractions.
pub fn mask_batch(
    rows: &[Vec<u32>],
    policy: &MaskingPolicy,
    replacement: Range<u32>,
    rng: &mut impl Rng,
) -> Result<MlmBatch> {
    if replacement.is_empty() {
        return Err(Error::Input("empty replacement id range".into()));
    }
    let batch = Batch::from_ids(rows)?;
    let mut corrupted = batch.ids.clone();
    let mut targets = vec![IGNORE; corrupted.len()];
    let mut stats = MaskStats::default();
    for (i, id) in corrupted.iter_mut().enumerate() {
        let orig = *id as u32;
        if !is_candidate(orig) {
            continue;
        }
        stats.candidates += 1;
        if !rng.random_bool(policy.select_prob) {
            continue;
        }
        stats.selected += 1;
        targets[i] = orig as usize;
        let u: f64 = rng.random();
        if u < policy.mask_frac {
            *id = MASK as usize;
            stats.masked += 1;
        } else if u < policy.mask_frac + policy.random_frac {
            *id = rng.random_range(replacement.clone()) as usize;
            stats.randomized += 1;
        } else {
            stats.kept += 1;
        }
    }
    Ok(MlmBatch {
        batch: Batch {
            ids: corrupted,
            ..batch
        },
        targets,
        stats,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Loss is recorded (and dev accuracy measured when fine-tuning) every
    /// this many steps and at the last step.
    pub eval_every: usize,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_steps: 100,
            weight_decay: 0.01,
            seed: 0,
            eval_every: 50,
            grad_clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning defaults: lr 5e-4, batch 16, `epochs` passes over
    /// `n_train` examples, 10% warmup, dev check once per epoch.
    pub fn finetune(n_train: usize, epochs: usize, seed: u64) -> Self {
        let batch_size = 16;
        let per_epoch = n_train.div_ceil(batch_size).max(1);
        let steps = per_epoch * epochs;
        TrainConfig {
            steps,
            batch_size,
            peak_lr: 5e-4,
            warmup_steps: steps / 10,
            seed,
            eval_every: per_epoch,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            )));
        }
        let finite_nonneg = [
            ("peak_lr", self.peak_lr),
            ("weight_decay", self.weight_decay),
            ("grad_clip_norm", self.grad_clip_norm),
        ];
        for (name, v) in finite_nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr` over `warmup_steps`, then linear decay
/// to 0 at `steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.steps {
        return if cfg.steps == cfg.warmup_steps && step == cfg.steps {
            cfg.peak_lr
        } else {
            0.0
        };
    }
    cfg.peak_lr * (cfg.steps - step) as f64 / (cfg.steps - cfg.warmup_steps) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }
}

/// One AdamW update with bias correction:
/// `p -= lr·(m̂/(√v̂ + eps) + wd·p)`, the decay term only where `decay[i]`.
/// Tensors whose gradient is `None` are frozen and left alone. Any
/// non-finite gradient aborts before anything changes.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Option<Vec<T>>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
    decay: &[bool],
    names: &[&str],
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || decay.len() != params.len() {
        return Err(Error::dim(
            "adam_step",
            &[params.len()],
            &[grads.len(), state.m.len(), decay.len()],
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if g.len() != params[i].len() {
                return Err(Error::dim("adam_step gradient", params[i].shape(), &[g.len()]));
            }
            if !g.iter().all(|v| v.is_finite()) {
                let name = names.get(i).copied().unwrap_or("?");
                return Err(Error::Training(format!("non-finite gradient in tensor {name}")));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (nb1, nb2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let (ic1, ic2) = (T::from_f64(1.0 / c1), T::from_f64(1.0 / c2));
    let lr_t = T::from_f64(lr);
    let eps = T::from_f64(cfg.eps);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let wd = T::from_f64(if decay[i] { cfg.weight_decay } else { 0.0 });
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, p) in params[i].data_mut().iter_mut().enumerate() {
            let gj = g[j];
            m[j] = b1 * m[j] + nb1 * gj;
            v[j] = b2 * v[j] + nb2 * gj * gj;
            let mh = m[j] * ic1;
            let vh = v[j] * ic2;
            *p -= lr_t * (mh / (vh.sqrt() + eps) + wd * *p);
        }
    }
    Ok(())
}

/// Euclidean norm over every present gradient.
pub fn global_grad_norm<T: Scalar>(grads: &[Option<Vec<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| {
            let x = v.to_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean training loss since the previous point.
    pub loss: f64,
    pub lr: f64,
    pub dev_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurve {
    pub points: Vec<CurvePoint>,
}

impl LossCurve {
    pub fn last_loss(&self) -> Option<f64> {
        self.points.last().map(|p| p.loss)
    }

    /// `step,loss,lr` rows, plus `dev_accuracy` when any point has one.
    pub fn to_csv(&self) -> String {
        let with_dev = self.points.iter().any(|p| p.dev_accuracy.is_some());
        let mut s = String::from(if with_dev {
            "step,loss,lr,dev_accuracy\n"
        } else {
            "step,loss,lr\n"
        });
        for p in &self.points {
            let _ = write!(s, "{},{},{}", p.step, p.loss, p.lr);
            if with_dev {
                let _ = write!(s, ",{}", p.dev_accuracy.map(|a| a.to_string()).unwrap_or_default());
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Pretrain,
    Continual,
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::Pretrain => "pretrain",
            StageKind::Continual => "continual",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            StageKind::Pretrain => 0,
            StageKind::Continual => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(StageKind::Pretrain),
            1 => Some(StageKind::Continual),
            _ => None,
        }
    }
}

/// One MLM stage on a single corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage {
    pub corpus_id: String,
    pub tag: DomainTag,
    pub steps: u64,
    pub kind: StageKind,
}

/// Ordered record of the corpora a checkpoint was trained on.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PyramidLineage {
    stages: Vec<Stage>,
}

impl PyramidLineage {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, stage: Stage) {
        self.stages.push(stage);
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// `corpus_A(general,pretrain,2000) > corpus_B(in_domain,continual,1000)`.
    pub fn describe(&self) -> String {
        if self.stages.is_empty() {
            return "fresh".into();
        }
        self.stages
            .iter()
            .map(|s| format!("{}({},{},{})", s.corpus_id, s.tag, s.kind.as_str(), s.steps))
            .collect::<Vec<_>>()
            .join(" > ")
    }
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

/// Documents cut into `[CLS] … [SEP]` chunks of at most `max_len` ids.
pub fn corpus_sequences(corpus: &Corpus, vocab: &Vocabulary, max_len: usize) -> Result<Vec<Vec<u32>>> {
    if max_len < 3 {
        return Err(Error::Input(format!("max_len must be at least 3, got {max_len}")));
    }
    let mut out = Vec::new();
    for doc in corpus.documents() {
        let pieces = vocab.tokenize(doc);
        for chunk in pieces.chunks(max_len - 2) {
            let mut s = Vec::with_capacity(chunk.len() + 2);
            s.push(CLS);
            s.extend_from_slice(chunk);
            s.push(SEP);
            out.push(s);
        }
    }
    Ok(out)
}

/// Cycles through shuffled example indices, reshuffling every epoch.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Sampler {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn check_vocab<T: Scalar>(model: &EncoderModel<T>, vocab: &Vocabulary) -> Result<()> {
    if vocab.len() > model.config().vocab_size {
        return Err(Error::Config(format!(
            "vocabulary of {} pieces does not fit model vocab_size {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    Ok(())
}

fn collect_grads<T: Scalar>(tape: &mut Tape<T>, vars: &[crate::tensor::Var]) -> Vec<Option<Vec<T>>> {
    vars.iter().map(|&v| tape.take_grad(v)).collect()
}

struct Optimizer<T: Scalar> {
    state: AdamState<T>,
    cfg: AdamConfig,
    decay: Vec<bool>,
    names: Vec<String>,
}

impl<T: Scalar> Optimizer<T> {
    fn new(model: &EncoderModel<T>, cfg: &TrainConfig) -> Self {
        Optimizer {
            state: AdamState::new(model.params()),
            cfg: cfg.into(),
            decay: model.param_info().iter().map(|i| i.kind.decays()).collect(),
            names: model.param_info().iter().map(|i| i.name.clone()).collect(),
        }
    }

    fn step(&mut self, model: &mut EncoderModel<T>, mut grads: Vec<Option<Vec<T>>>, lr: f64, clip: f64) -> Result<()> {
        clip_grad_norm(&mut grads, clip);
        let names: Vec<&str> = self.names.iter().map(String::as_str).collect();
        adam_step(model.params_mut(), &grads, &mut self.state, lr, &self.cfg, &self.decay, &names)?;
        if let Some(bad) = model.first_non_finite() {
            return Err(Error::Training(format!("parameter {bad} became non-finite")));
        }
        Ok(())
    }
}

fn mlm_trainable(info: &ParamInfo) -> bool {
    info.group != ParamGroup::Classifier
}

/// Runs `cfg.steps` MLM steps on `model` in place.
pub fn train_mlm<T: Scalar>(
    model: &mut EncoderModel<T>,
    vocab: &Vocabulary,
    corpus: &Corpus,
    cfg: &TrainConfig,
    policy: &MaskingPolicy,
) -> Result<LossCurve> {
    cfg.validate()?;
    policy.validate()?;
    check_vocab(model, vocab)?;
    let seqs = corpus_sequences(corpus, vocab, model.config().max_len)?;
    if !seqs.iter().any(|s| s.iter().any(|&i| is_candidate(i))) {
        return Err(Error::Input(format!(
            "corpus {} has no maskable tokens under this vocabulary",
            corpus.id()
        )));
    }
    let replacement = replacement_range(vocab.len());
    let mut sampler = Sampler::new(seqs.len(), stream(cfg.seed, 1));
    let mut mask_rng = stream(cfg.seed, 2);
    let mut dropout_rng = stream(cfg.seed, 3);
    let mut opt = Optimizer::new(model, cfg);
    let mut curve = LossCurve::default();
    let (mut window, mut window_n) = (0.0, 0usize);

    for step in 1..=cfg.steps {
        let mut mb = None;
        for _ in 0..1000 {
            let idx = sampler.next_batch(cfg.batch_size);
            let rows: Vec<Vec<u32>> = idx.iter().map(|&i| seqs[i].clone()).collect();
            let b = mask_batch(&rows, policy, replacement.clone(), &mut mask_rng)?;
            if b.stats.selected > 0 {
                mb = Some(b);
                break;
            }
        }
        let mb = mb.ok_or_else(|| {
            Error::Training("masking selected no tokens in 1000 consecutive batches".into())
        })?;
        let (rows, targets) = mb.selected();
        let lr = lr_schedule(step - 1, cfg);

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, mlm_trainable);
        let enc = bound.encode(&mut tape, &mb.batch, Some(&mut dropout_rng as &mut dyn RngCore))?;
        let logits = bound.mlm_logits(&mut tape, enc.hidden, &rows)?;
        let loss = tape.cross_entropy(logits, &targets, IGNORE)?;
        let loss_value = tape.scalar(loss).to_f64();
        if !loss_value.is_finite() {
            return Err(Error::Training(format!("MLM loss became non-finite at step {step}")));
        }
        tape.backward(loss)?;
        let vars = bound.vars().to_vec();
        let grads = collect_grads(&mut tape, &vars);
        drop(tape);
        opt.step(model, grads, lr, cfg.grad_clip_norm)?;

        window += loss_value;
        window_n += 1;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            curve.points.push(CurvePoint {
                step,
                loss: window / window_n as f64,
                lr,
                dev_accuracy: None,
            });
            window = 0.0;
            window_n = 0;
        }
    }
    Ok(curve)
}

fn run_stage<T: Scalar>(
    mut ckpt: Checkpoint<T>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    policy: &MaskingPolicy,
    kind: StageKind,
) -> Result<(Checkpoint<T>, LossCurve)> {
    let vocab = ckpt.vocab.clone();
    let curve = train_mlm(&mut ckpt.model, &vocab, corpus, cfg, policy)?;
    ckpt.lineage.push(Stage {
        corpus_id: corpus.id().to_string(),
        tag: corpus.tag(),
        steps: cfg.steps as u64,
        kind,
    });
    Ok((ckpt, curve))
}

/// MLM pre-training of `init` (fresh or not) on `corpus`; the corpus is
/// appended to the lineage.
pub fn pretrain<T: Scalar>(
    init: Checkpoint<T>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    policy: &MaskingPolicy,
) -> Result<(Checkpoint<T>, LossCurve)> {
    run_stage(init, corpus, cfg, policy, StageKind::Pretrain)
}

/// Continues MLM training on one domain corpus. Corpora tagged `mixed` are
/// refused: each stage of the pyramid trains on a single corpus so scarce
/// in-domain text is never diluted by general text.
pub fn continual_pretrain<T: Scalar>(
    ckpt: Checkpoint<T>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    policy: &MaskingPolicy,
) -> Result<(Checkpoint<T>, LossCurve)> {
    check_no_dilution(corpus)?;
    run_stage(ckpt, corpus, cfg, policy, StageKind::Continual)
}

/// Policy error if `corpus` may not be a continual stage.
pub fn check_no_dilution(corpus: &Corpus) -> Result<()> {
    if corpus.tag() == DomainTag::Mixed {
        return Err(Error::Policy(format!(
            "no-dilution rule: corpus {} is tagged mixed; continual pre-training takes one \
             domain corpus per stage and never pools general and in-domain text",
            corpus.id()
        )));
    }
    Ok(())
}

/// Eval-mode MLM loss on `corpus` under a fixed masking draw.
pub fn mlm_eval_loss<T: Scalar>(
    model: &EncoderModel<T>,
    vocab: &Vocabulary,
    corpus: &Corpus,
    policy: &MaskingPolicy,
    seed: u64,
) -> Result<f64> {
    policy.validate()?;
    check_vocab(model, vocab)?;
    let seqs = corpus_sequences(corpus, vocab, model.config().max_len)?;
    let replacement = replacement_range(vocab.len());
    let mut rng = stream(seed, 7);
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in seqs.chunks(64) {
        let mb = mask_batch(chunk, policy, replacement.clone(), &mut rng)?;
        let (rows, targets) = mb.selected();
        if rows.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, |_| false);
        let enc = bound.encode(&mut tape, &mb.batch, None)?;
        let logits = bound.mlm_logits(&mut tape, enc.hidden, &rows)?;
        let loss = tape.cross_entropy(logits, &targets, IGNORE)?;
        total += tape.scalar(loss).to_f64() * rows.len() as f64;
        count += rows.len();
    }
    if count == 0 {
        return Err(Error::UndefinedLoss);
    }
    Ok(total / count as f64)
}

/// Encodes response texts for classification.
pub fn encode_texts(vocab: &Vocabulary, texts: &[&str], max_len: usize) -> Result<Vec<Vec<u32>>> {
    texts
        .iter()
        .map(|t| vocab.encode(t, max_len).map(|e| e.active_ids().to_vec()))
        .collect()
}

/// Predicted class of every text, in eval mode.
pub fn predict<T: Scalar>(model: &EncoderModel<T>, vocab: &Vocabulary, texts: &[&str]) -> Result<Vec<usize>> {
    let seqs = encode_texts(vocab, texts, model.config().max_len)?;
    predict_encoded(model, &seqs)
}

fn predict_encoded<T: Scalar>(model: &EncoderModel<T>, seqs: &[Vec<u32>]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(64) {
        out.extend(model.predict(&Batch::from_ids(chunk)?)?);
    }
    Ok(out)
}

fn accuracy_of(pred: &[usize], gold: &[usize]) -> f64 {
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    hits as f64 / gold.len().max(1) as f64
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<T: Scalar> {
    /// Parameters at the best dev accuracy (earliest on ties).
    pub checkpoint: Checkpoint<T>,
    pub curve: LossCurve,
    pub best_dev_accuracy: Option<f64>,
    pub best_step: usize,
}

/// Full fine-tuning of encoder and a fresh `n_classes`-way classifier with
/// cross-entropy on the CLS logits. The MLM head is left untouched, as are
/// the vocabulary and lineage.
pub fn finetune<T: Scalar>(
    ckpt: &Checkpoint<T>,
    train: &[LabeledExample],
    dev: &[LabeledExample],
    n_classes: usize,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("fine-tuning needs at least one training example".into()));
    }
    for (split, set) in [("train", train), ("dev", dev)] {
        if let Some((i, e)) = set.iter().enumerate().find(|(_, e)| e.label >= n_classes) {
            return Err(Error::Data {
                path: None,
                line: None,
                message: format!("{split} example {i} has label {} outside 0..{n_classes}", e.label),
            });
        }
    }
    if n_classes == 1 {
        log::warn!("fine-tuning with n_classes = 1 is degenerate: every prediction is trivially correct");
    }
    let mut model = ckpt.model.clone();
    model.reset_classifier(n_classes, stream(cfg.seed, 4).next_u64())?;
    let max_len = model.config().max_len;
    let texts: Vec<&str> = train.iter().map(|e| e.text.as_str()).collect();
    let seqs = encode_texts(&ckpt.vocab, &texts, max_len)?;
    let labels: Vec<usize> = train.iter().map(|e| e.label).collect();
    let dev_texts: Vec<&str> = dev.iter().map(|e| e.text.as_str()).collect();
    let dev_seqs = encode_texts(&ckpt.vocab, &dev_texts, max_len)?;
    let dev_labels: Vec<usize> = dev.iter().map(|e| e.label).collect();

    let mut sampler = Sampler::new(seqs.len(), stream(cfg.seed, 5));
    let mut dropout_rng = stream(cfg.seed, 6);
    let mut opt = Optimizer::new(&model, cfg);
    let mut curve = LossCurve::default();
    let mut best: Option<(f64, usize, EncoderModel<T>)> = None;
    let (mut window, mut window_n) = (0.0, 0usize);
    let trainable = |i: &ParamInfo| i.group != ParamGroup::MlmHead;

    for step in 1..=cfg.steps {
        let idx = sampler.next_batch(cfg.batch_size.min(seqs.len()));
        let rows: Vec<Vec<u32>> = idx.iter().map(|&i| seqs[i].clone()).collect();
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let batch = Batch::from_ids(&rows)?;
        let lr = lr_schedule(step - 1, cfg);

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, trainable);
        let enc = bound.encode(&mut tape, &batch, Some(&mut dropout_rng as &mut dyn RngCore))?;
        let logits = bound.cls_logits(&mut tape, enc.hidden, &batch)?;
        let loss = tape.cross_entropy(logits, &y, IGNORE)?;
        let loss_value = tape.scalar(loss).to_f64();
        if !loss_value.is_finite() {
            return Err(Error::Training(format!("fine-tuning loss became non-finite at step {step}")));
        }
        tape.backward(loss)?;
        let vars = bound.vars().to_vec();
        let grads = collect_grads(&mut tape, &vars);
        drop(tape);
        opt.step(&mut model, grads, lr, cfg.grad_clip_norm)?;

        window += loss_value;
        window_n += 1;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let dev_accuracy = if dev_seqs.is_empty() {
                None
            } else {
                let pred = predict_encoded(&model, &dev_seqs)?;
                Some(accuracy_of(&pred, &dev_labels))
            };
            if let Some(acc) = dev_accuracy {
                if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                    best = Some((acc, step, model.clone()));
                }
            }
            curve.points.push(CurvePoint {
                step,
                loss: window / window_n as f64,
                lr,
                dev_accuracy,
            });
            window = 0.0;
            window_n = 0;
        }
    }
    let (best_dev_accuracy, best_step, model) = match best {
        Some((acc, step, m)) => (Some(acc), step, m),
        None => (None, cfg.steps, model),
    };
    let mut out = Checkpoint {
        model,
        vocab: ckpt.vocab.clone(),
        vocab_path: ckpt.vocab_path.clone(),
        lineage: ckpt.lineage.clone(),
        metadata: ckpt.metadata.clone(),
    };
    out.metadata.insert("finetune.n_classes".into(), n_classes.to_string());
    out.metadata.insert("finetune.best_step".into(), best_step.to_string());
    Ok(FinetuneOutcome {
        checkpoint: out,
        curve,
        best_dev_accuracy,
        best_step,
    })
}

/// Predicted-vs-gold accuracy of a fine-tuned checkpoint on `examples`.
pub fn evaluate<T: Scalar>(ckpt: &Checkpoint<T>, examples: &[LabeledExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty example set".into()));
    }
    let texts: Vec<&str> = examples.iter().map(|e| e.text.as_str()).collect();
    let pred = predict(&ckpt.model, &ckpt.vocab, &texts)?;
    let gold: Vec<usize> = examples.iter().map(|e| e.label).collect();
    Ok(accuracy_of(&pred, &gold))
}
