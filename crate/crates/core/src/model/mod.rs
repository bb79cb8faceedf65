//! Post-norm transformer encoder with MLM and classification heads.

mod config;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use config::{ModelConfig, NORM_PLACEMENT};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::tokenizer::{EncodedSequence, Vocabulary, PAD};

/// Standard deviation of the normal initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    MlmHead,
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Weight,
    Bias,
    NormGain,
    NormBias,
}

impl ParamKind {
    /// Whether decoupled weight decay applies.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Embedding | ParamKind::Weight)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub group: ParamGroup,
    pub kind: ParamKind,
}

#[derive(Debug, Clone)]
struct LayerLayout {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    tok: usize,
    pos: Option<usize>,
    emb_ln_g: usize,
    emb_ln_b: usize,
    layers: Vec<LayerLayout>,
    mlm_w: usize,
    mlm_b: usize,
    mlm_ln_g: usize,
    mlm_ln_b: usize,
    mlm_decoder: Option<usize>,
    mlm_bias: usize,
    cls_w: usize,
    cls_b: usize,
}

enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Builder<'r, T: Scalar> {
    info: Vec<ParamInfo>,
    params: Vec<Tensor<T>>,
    rng: &'r mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn add(&mut self, name: String, group: ParamGroup, kind: ParamKind, shape: &[usize]) -> usize {
        let init = match kind {
            ParamKind::Embedding | ParamKind::Weight => Init::Normal,
            ParamKind::Bias | ParamKind::NormBias => Init::Zeros,
            ParamKind::NormGain => Init::Ones,
        };
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Normal => {
                let dist = Normal::new(0.0, INIT_STD).expect("valid std");
                (0..n).map(|_| T::from_f64(dist.sample(self.rng))).collect()
            }
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
        };
        self.info.push(ParamInfo { name, group, kind });
        self.params
            .push(Tensor::new(shape.to_vec(), data).expect("builder shapes are positive"));
        self.params.len() - 1
    }
}

fn build_layout<T: Scalar>(
    config: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<ParamInfo>, Vec<Tensor<T>>, Layout) {
    use ParamGroup::*;
    use ParamKind::*;
    let (v, d, f, c) = (config.vocab_size, config.d_model, config.d_ff, config.n_classes);
    let mut b = Builder {
        info: Vec::new(),
        params: Vec::new(),
        rng,
    };
    let tok = b.add("embeddings.token".into(), Encoder, Embedding, &[v, d]);
    let pos = config
        .position_embeddings
        .then(|| b.add("embeddings.position".into(), Encoder, Embedding, &[config.max_len, d]));
    let emb_ln_g = b.add("embeddings.norm.gain".into(), Encoder, NormGain, &[d]);
    let emb_ln_b = b.add("embeddings.norm.bias".into(), Encoder, NormBias, &[d]);
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = |s: &str| format!("layer.{l}.{s}");
        layers.push(LayerLayout {
            wq: b.add(p("attention.query.weight"), Encoder, Weight, &[d, d]),
            bq: b.add(p("attention.query.bias"), Encoder, Bias, &[d]),
            wk: b.add(p("attention.key.weight"), Encoder, Weight, &[d, d]),
            bk: b.add(p("attention.key.bias"), Encoder, Bias, &[d]),
            wv: b.add(p("attention.value.weight"), Encoder, Weight, &[d, d]),
            bv: b.add(p("attention.value.bias"), Encoder, Bias, &[d]),
            wo: b.add(p("attention.output.weight"), Encoder, Weight, &[d, d]),
            bo: b.add(p("attention.output.bias"), Encoder, Bias, &[d]),
            ln1_g: b.add(p("attention.norm.gain"), Encoder, NormGain, &[d]),
            ln1_b: b.add(p("attention.norm.bias"), Encoder, NormBias, &[d]),
            w1: b.add(p("ffn.inner.weight"), Encoder, Weight, &[d, f]),
            b1: b.add(p("ffn.inner.bias"), Encoder, Bias, &[f]),
            w2: b.add(p("ffn.outer.weight"), Encoder, Weight, &[f, d]),
            b2: b.add(p("ffn.outer.bias"), Encoder, Bias, &[d]),
            ln2_g: b.add(p("ffn.norm.gain"), Encoder, NormGain, &[d]),
            ln2_b: b.add(p("ffn.norm.bias"), Encoder, NormBias, &[d]),
        });
    }
    let mlm_w = b.add("mlm.transform.weight".into(), MlmHead, Weight, &[d, d]);
    let mlm_b = b.add("mlm.transform.bias".into(), MlmHead, Bias, &[d]);
    let mlm_ln_g = b.add("mlm.norm.gain".into(), MlmHead, NormGain, &[d]);
    let mlm_ln_b = b.add("mlm.norm.bias".into(), MlmHead, NormBias, &[d]);
    let mlm_decoder = (!config.tie_mlm_decoder)
        .then(|| b.add("mlm.decoder.weight".into(), MlmHead, Weight, &[d, v]));
    let mlm_bias = b.add("mlm.decoder.bias".into(), MlmHead, Bias, &[v]);
    let cls_w = b.add("classifier.weight".into(), Classifier, Weight, &[d, c]);
    let cls_b = b.add("classifier.bias".into(), Classifier, Bias, &[c]);
    let layout = Layout {
        tok,
        pos,
        emb_ln_g,
        emb_ln_b,
        layers,
        mlm_w,
        mlm_b,
        mlm_ln_g,
        mlm_ln_b,
        mlm_decoder,
        mlm_bias,
        cls_w,
        cls_b,
    };
    (b.info, b.params, layout)
}

/// A batch of id sequences padded to a common length.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Row-major `batch × seq` token ids.
    pub ids: Vec<usize>,
    pub key_pad: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    /// Pads every row with PAD to the longest row.
    pub fn from_ids(rows: &[Vec<u32>]) -> Result<Self> {
        let seq = rows.iter().map(Vec::len).max().unwrap_or(0);
        if rows.is_empty() || seq == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        let mut ids = Vec::with_capacity(rows.len() * seq);
        for r in rows {
            ids.extend(r.iter().map(|&i| i as usize));
            ids.extend(std::iter::repeat_n(PAD as usize, seq - r.len()));
        }
        let key_pad = ids.iter().map(|&i| i == PAD as usize).collect();
        Ok(Batch {
            ids,
            key_pad,
            batch: rows.len(),
            seq,
        })
    }

    /// Trims encoded sequences to the longest unpadded length.
    pub fn from_sequences(seqs: &[EncodedSequence]) -> Result<Self> {
        let rows: Vec<Vec<u32>> = seqs.iter().map(|s| s.active_ids().to_vec()).collect();
        Self::from_ids(&rows)
    }

    /// Flat row index of position `pos` in sequence `b`.
    pub fn row(&self, b: usize, pos: usize) -> usize {
        b * self.seq + pos
    }
}

/// Result of an encoder pass on a tape.
pub struct Encoded {
    /// `batch·seq × d_model` hidden states.
    pub hidden: Var,
    /// One attention node per layer; see [`Tape::attention_probs`].
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct EncoderModel<T: Scalar> {
    config: ModelConfig,
    info: Vec<ParamInfo>,
    params: Vec<Tensor<T>>,
    layout: Layout,
}

/// Model parameters recorded on a tape.
pub struct Bound<'m, T: Scalar> {
    model: &'m EncoderModel<T>,
    vars: Vec<Var>,
}

/// Attention weights of one head for one input, with token labels.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub tokens: Vec<String>,
    /// `weights[i][j]`: how much query `i` attends to key `j`.
    pub weights: Vec<Vec<f64>>,
}

impl<T: Scalar> EncoderModel<T> {
    /// Freshly initialized model; weights ~ N(0, 0.02²), biases 0, norm
    /// gains 1. Identical seeds give identical values in either precision.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (info, params, layout) = build_layout(&config, &mut rng);
        Ok(EncoderModel {
            config,
            info,
            params,
            layout,
        })
    }

    /// Reassembles a model from named tensors, checking names and shapes.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (info, template, layout) = build_layout::<T>(&config, &mut rng);
        if named.len() != info.len() {
            return Err(Error::MalformedCheckpoint(format!(
                "expected {} tensors, found {}",
                info.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, t), (inf, tmpl)) in named.into_iter().zip(info.iter().zip(&template)) {
            if name != inf.name || t.shape() != tmpl.shape() {
                return Err(Error::MalformedCheckpoint(format!(
                    "tensor {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    inf.name,
                    tmpl.shape()
                )));
            }
            params.push(t);
        }
        Ok(EncoderModel {
            config,
            info,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.info
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.info.iter().position(|i| i.name == name)
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.info.iter().map(|i| i.name.as_str()).zip(&self.params)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Name of the first parameter tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.info
            .iter()
            .zip(&self.params)
            .find(|(_, p)| !p.is_finite())
            .map(|(i, _)| i.name.as_str())
    }

    pub fn cast<U: Scalar>(&self) -> EncoderModel<U> {
        EncoderModel {
            config: self.config.clone(),
            info: self.info.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Replaces the classifier with a fresh `n_classes`-way head.
    pub fn reset_classifier(&mut self, n_classes: usize, seed: u64) -> Result<()> {
        if n_classes == 0 {
            return Err(Error::Config("n_classes must be positive".into()));
        }
        self.config.n_classes = n_classes;
        let d = self.config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, INIT_STD).expect("valid std");
        let w: Vec<T> = (0..d * n_classes)
            .map(|_| T::from_f64(dist.sample(&mut rng)))
            .collect();
        self.params[self.layout.cls_w] = Tensor::new(vec![d, n_classes], w)?;
        self.params[self.layout.cls_b] = Tensor::zeros(vec![n_classes]);
        Ok(())
    }

    /// Records every parameter on `tape`; those selected by `trainable`
    /// become differentiable leaves.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&ParamInfo) -> bool) -> Bound<'_, T> {
        let vars = self
            .info
            .iter()
            .zip(&self.params)
            .map(|(info, p)| {
                let (shape, data) = (p.shape().to_vec(), p.data().to_vec());
                let v = if trainable(info) {
                    tape.variable(shape, data)
                } else {
                    tape.constant(shape, data)
                };
                v.expect("parameter shapes are valid")
            })
            .collect();
        Bound { model: self, vars }
    }

    /// Records parameters as constants, substituting `var` for parameter
    /// `index`. Used to differentiate with respect to one tensor.
    pub fn bind_replacing(&self, tape: &mut Tape<T>, index: usize, var: Var) -> Result<Bound<'_, T>> {
        if tape.shape(var) != self.params[index].shape() {
            return Err(Error::dim("bind_replacing", tape.shape(var), self.params[index].shape()));
        }
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| if i == index { var } else { tape.leaf(p) })
            .collect();
        Ok(Bound { model: self, vars })
    }

    fn eval_pass<R>(&self, batch: &Batch, f: impl FnOnce(&mut Tape<T>, &Bound<'_, T>, &Encoded) -> Result<R>) -> Result<R> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let enc = bound.encode(&mut tape, batch, None)?;
        f(&mut tape, &bound, &enc)
    }

    /// Eval-mode hidden states, shape `batch × seq × d_model`.
    pub fn hidden_states(&self, batch: &Batch) -> Result<Tensor<T>> {
        self.eval_pass(batch, |tape, _, enc| {
            Tensor::new(
                vec![batch.batch, batch.seq, self.config.d_model],
                tape.value(enc.hidden).to_vec(),
            )
        })
    }

    /// Eval-mode MLM logits at every position, `batch × seq × vocab`.
    pub fn mlm_logits(&self, batch: &Batch) -> Result<Tensor<T>> {
        self.eval_pass(batch, |tape, bound, enc| {
            let all: Vec<usize> = (0..batch.batch * batch.seq).collect();
            let logits = bound.mlm_logits(tape, enc.hidden, &all)?;
            Tensor::new(
                vec![batch.batch, batch.seq, self.config.vocab_size],
                tape.value(logits).to_vec(),
            )
        })
    }

    /// Eval-mode classifier logits from the CLS position, `batch × n_classes`.
    pub fn cls_logits(&self, batch: &Batch) -> Result<Tensor<T>> {
        self.eval_pass(batch, |tape, bound, enc| {
            let logits = bound.cls_logits(tape, enc.hidden, batch)?;
            Ok(tape.to_tensor(logits))
        })
    }

    /// Predicted class per sequence.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        let logits = self.cls_logits(batch)?;
        let c = self.config.n_classes;
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, row[0]), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    /// Attention weights of `head` in `layer` for a single id sequence.
    pub fn attention_weights(&self, ids: &[u32], layer: usize, head: usize) -> Result<Vec<Vec<f64>>> {
        if layer >= self.config.n_layers {
            return Err(Error::Input(format!(
                "layer {layer} out of range for {} layers",
                self.config.n_layers
            )));
        }
        if head >= self.config.n_heads {
            return Err(Error::Input(format!(
                "head {head} out of range for {} heads",
                self.config.n_heads
            )));
        }
        let batch = Batch::from_ids(&[ids.to_vec()])?;
        self.eval_pass(&batch, |tape, _, enc| {
            let probs = tape
                .attention_probs(enc.attention[layer])
                .expect("attention node");
            let l = batch.seq;
            let block = &probs[head * l * l..(head + 1) * l * l];
            Ok(block
                .chunks(l)
                .map(|r| r.iter().map(|v| v.to_f64()).collect())
                .collect())
        })
    }

    /// Attention map for `text` as encoded by `vocab`, CLS and SEP included.
    pub fn attention_map(&self, vocab: &Vocabulary, text: &str, layer: usize, head: usize) -> Result<AttentionMap> {
        let enc = vocab.encode(text, self.config.max_len)?;
        let ids = enc.active_ids();
        let weights = self.attention_weights(ids, layer, head)?;
        let tokens = ids
            .iter()
            .map(|&i| vocab.piece(i).unwrap_or("[?]").to_string())
            .collect();
        Ok(AttentionMap { tokens, weights })
    }
}

impl<T: Scalar> Bound<'_, T> {
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn dropout(&self, tape: &mut Tape<T>, x: Var, rng: &mut Option<&mut dyn RngCore>) -> Result<Var> {
        let p = self.model.config.dropout;
        let Some(rng) = rng.as_deref_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let shape = tape.shape(x).to_vec();
        let n = tape.value(x).len();
        let threshold = (p * (u32::MAX as f64 + 1.0)) as u64;
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if (rng.next_u32() as u64) < threshold {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let m = tape.constant(shape, mask)?;
        tape.mul(x, m)
    }

    /// Encoder forward pass. Passing a generator enables dropout (train
    /// mode); `None` is eval mode.
    pub fn encode(&self, tape: &mut Tape<T>, batch: &Batch, mut rng: Option<&mut dyn RngCore>) -> Result<Encoded> {
        let cfg = &self.model.config;
        let lay = &self.model.layout;
        if batch.seq > cfg.max_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_len {}",
                batch.seq, cfg.max_len
            )));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let eps = cfg.layer_norm_eps;
        let v = |i: usize| self.vars[i];

        let mut h = tape.rows(v(lay.tok), &batch.ids)?;
        if let Some(pos) = lay.pos {
            let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
            let p = tape.rows(v(pos), &positions)?;
            h = tape.add(h, p)?;
        }
        h = tape.layer_norm(h, v(lay.emb_ln_g), v(lay.emb_ln_b), eps)?;
        h = self.dropout(tape, h, &mut rng)?;

        let mut attention = Vec::with_capacity(lay.layers.len());
        for l in &lay.layers {
            let q = tape.linear(h, v(l.wq), v(l.bq))?;
            let k = tape.linear(h, v(l.wk), v(l.bk))?;
            let val = tape.linear(h, v(l.wv), v(l.bv))?;
            let a = tape.attention(q, k, val, batch.batch, cfg.n_heads, Some(&batch.key_pad))?;
            attention.push(a);
            let o = tape.linear(a, v(l.wo), v(l.bo))?;
            let o = self.dropout(tape, o, &mut rng)?;
            let r = tape.add(h, o)?;
            let h1 = tape.layer_norm(r, v(l.ln1_g), v(l.ln1_b), eps)?;
            let f = tape.linear(h1, v(l.w1), v(l.b1))?;
            let f = tape.activation(f, cfg.activation);
            let f = tape.linear(f, v(l.w2), v(l.b2))?;
            let f = self.dropout(tape, f, &mut rng)?;
            let r = tape.add(h1, f)?;
            h = tape.layer_norm(r, v(l.ln2_g), v(l.ln2_b), eps)?;
        }
        Ok(Encoded {
            hidden: h,
            attention,
        })
    }

    /// MLM logits (`rows.len() × vocab`) at the given flat hidden rows.
    pub fn mlm_logits(&self, tape: &mut Tape<T>, hidden: Var, rows: &[usize]) -> Result<Var> {
        let cfg = &self.model.config;
        let lay = &self.model.layout;
        let v = |i: usize| self.vars[i];
        let x = tape.rows(hidden, rows)?;
        let x = tape.linear(x, v(lay.mlm_w), v(lay.mlm_b))?;
        let x = tape.activation(x, cfg.activation);
        let x = tape.layer_norm(x, v(lay.mlm_ln_g), v(lay.mlm_ln_b), cfg.layer_norm_eps)?;
        let logits = match lay.mlm_decoder {
            Some(w) => tape.matmul(x, v(w))?,
            None => tape.matmul_t(x, v(lay.tok))?,
        };
        tape.add_row(logits, v(lay.mlm_bias))
    }

    /// Classifier logits (`batch × n_classes`) read from position 0.
    pub fn cls_logits(&self, tape: &mut Tape<T>, hidden: Var, batch: &Batch) -> Result<Var> {
        let lay = &self.model.layout;
        let rows: Vec<usize> = (0..batch.batch).map(|b| batch.row(b, 0)).collect();
        let x = tape.rows(hidden, &rows)?;
        tape.linear(x, self.vars[lay.cls_w], self.vars[lay.cls_b])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 300,
            max_len: 8,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            n_layers: 2,
            n_classes: 3,
            ..Default::default()
        }
    }

    #[test]
    fn parameter_count_matches_formula() {
        let m = EncoderModel::<f32>::new(tiny(), 1).unwrap();
        assert_eq!(m.num_parameters(), m.config().parameter_count());
    }

    #[test]
    fn same_seed_same_weights_across_precisions() {
        let a = EncoderModel::<f32>::new(tiny(), 7).unwrap();
        let b = EncoderModel::<f64>::new(tiny(), 7).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            for (&p, &q) in x.data().iter().zip(y.data()) {
                assert_eq!(p, q as f32);
            }
        }
    }

    #[test]
    fn rejects_out_of_range_ids_and_long_input() {
        let m = EncoderModel::<f32>::new(tiny(), 1).unwrap();
        let b = Batch::from_ids(&[vec![2, 300, 3]]).unwrap();
        assert!(matches!(m.hidden_states(&b), Err(Error::Input(_))));
        let b = Batch::from_ids(&[vec![5; 9]]).unwrap();
        assert!(matches!(m.hidden_states(&b), Err(Error::Input(_))));
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let m = EncoderModel::<f64>::new(tiny(), 1).unwrap();
        let b = Batch::from_ids(&[vec![2, 10, 11, 3]]).unwrap();
        let eval = m.hidden_states(&b).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, |_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = bound.encode(&mut tape, &b, Some(&mut rng)).unwrap();
        assert_ne!(tape.value(enc.hidden), eval.data());
    }
}
