use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Activation;

/// Shape and behaviour of an [`EncoderModel`](super::EncoderModel).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_classes: usize,
    pub dropout: f64,
    pub activation: Activation,
    /// Share the MLM output projection with the token embedding table.
    pub tie_mlm_decoder: bool,
    /// Learned absolute position embeddings. Turning them off makes the
    /// encoder permutation-equivariant; only useful for testing.
    pub position_embeddings: bool,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2048,
            max_len: 64,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            n_layers: 2,
            n_classes: 3,
            dropout: 0.1,
            activation: Activation::GeluTanh,
            tie_mlm_decoder: true,
            position_embeddings: true,
            layer_norm_eps: 1e-12,
        }
    }
}

/// Residual/normalization arrangement; only post-norm is implemented.
pub const NORM_PLACEMENT: &str = "post-norm";

impl ModelConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let (v, d, f, p, c) = (
            self.vocab_size,
            self.d_model,
            self.d_ff,
            self.max_len,
            self.n_classes,
        );
        let embeddings = v * d + if self.position_embeddings { p * d } else { 0 } + 2 * d;
        let attention = 4 * (d * d + d) + 2 * d;
        let feed_forward = d * f + f + f * d + d + 2 * d;
        let layers = self.n_layers * (attention + feed_forward);
        let mlm = d * d + d + 2 * d + v + if self.tie_mlm_decoder { 0 } else { d * v };
        let classifier = d * c + c;
        embeddings + layers + mlm + classifier
    }

    /// Key/value form used in checkpoints and run metadata.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("max_len".into(), self.max_len.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("d_ff".into(), self.d_ff.to_string()),
            ("n_layers".into(), self.n_layers.to_string()),
            ("n_classes".into(), self.n_classes.to_string()),
            ("dropout".into(), self.dropout.to_string()),
            ("activation".into(), self.activation.name().to_string()),
            ("tie_mlm_decoder".into(), self.tie_mlm_decoder.to_string()),
            ("position_embeddings".into(), self.position_embeddings.to_string()),
            ("layer_norm_eps".into(), self.layer_norm_eps.to_string()),
            ("norm_placement".into(), NORM_PLACEMENT.to_string()),
        ]
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(pairs: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = pairs
                .get(key)
                .ok_or_else(|| Error::Config(format!("missing model key {key}")))?;
            raw.parse()
                .map_err(|_| Error::Config(format!("bad value {raw:?} for model key {key}")))
        }
        let act: String = get(pairs, "activation")?;
        let cfg = ModelConfig {
            vocab_size: get(pairs, "vocab_size")?,
            max_len: get(pairs, "max_len")?,
            d_model: get(pairs, "d_model")?,
            n_heads: get(pairs, "n_heads")?,
            d_ff: get(pairs, "d_ff")?,
            n_layers: get(pairs, "n_layers")?,
            n_classes: get(pairs, "n_classes")?,
            dropout: get(pairs, "dropout")?,
            activation: Activation::parse(&act)
                .ok_or_else(|| Error::Config(format!("unknown activation {act:?}")))?,
            tie_mlm_decoder: get(pairs, "tie_mlm_decoder")?,
            position_embeddings: get(pairs, "position_embeddings")?,
            layer_norm_eps: get(pairs, "layer_norm_eps")?,
        };
        if let Some(p) = pairs.get("norm_placement") {
            if p != NORM_PLACEMENT {
                return Err(Error::Config(format!("unsupported norm placement {p:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        let map: BTreeMap<_, _> = c.to_pairs().into_iter().collect();
        assert_eq!(ModelConfig::from_pairs(&map).unwrap(), c);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = ModelConfig {
            d_model: 10,
            n_heads: 4,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
