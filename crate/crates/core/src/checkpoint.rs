//! Checkpoints in memory and on disk.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! "SEDB" | u32 version
//! u32 len | config block: UTF-8 `key=value` lines
//! [u8; 32] SHA-256 of the vocabulary file
//! u32 stages | per stage: u32 len, corpus id, u8 tag, u8 kind, u64 steps
//! u32 tensors | per tensor: u32 len, name, u32 ndim, u64 dims…, data
//! ```
//!
//! Tensor data is stored at the width named by the `dtype` config key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::corpus::DomainTag;
use crate::error::{Error, Result};
use crate::model::{EncoderModel, ModelConfig};
use crate::tensor::{DType, Scalar, Tensor};
use crate::tokenizer::{sha256, Vocabulary};
use crate::training::{PyramidLineage, Stage, StageKind};

pub const MAGIC: &[u8; 4] = b"SEDB";
pub const FORMAT_VERSION: u32 = 1;

const MODEL_PREFIX: &str = "model.";
const META_PREFIX: &str = "meta.";

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub model: EncoderModel<T>,
    pub vocab: Arc<Vocabulary>,
    /// Where the vocabulary file lives; `None` until saved.
    pub vocab_path: Option<PathBuf>,
    pub lineage: PyramidLineage,
    /// Free-form provenance; keys and values must be single-line.
    pub metadata: BTreeMap<String, String>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Freshly initialized model around `vocab` with an empty lineage.
    /// `config.vocab_size` is set to the vocabulary size.
    pub fn fresh(mut config: ModelConfig, vocab: Arc<Vocabulary>, seed: u64) -> Result<Self> {
        config.vocab_size = vocab.len();
        let model = EncoderModel::new(config, seed)?;
        let mut metadata = BTreeMap::new();
        metadata.insert("init_seed".into(), seed.to_string());
        Ok(Checkpoint {
            model,
            vocab,
            vocab_path: None,
            lineage: PyramidLineage::new(),
            metadata,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Checkpoint<U> {
        Checkpoint {
            model: self.model.cast(),
            vocab: self.vocab.clone(),
            vocab_path: self.vocab_path.clone(),
            lineage: self.lineage.clone(),
            metadata: self.metadata.clone(),
        }
    }
}

fn check_line(kind: &str, s: &str) -> Result<()> {
    if s.contains('\n') || s.contains('\r') {
        return Err(Error::Input(format!("checkpoint {kind} {s:?} spans lines")));
    }
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

/// Default vocabulary location next to a checkpoint: `<file>.vocab`.
pub fn sidecar_vocab_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".vocab");
    path.with_file_name(name)
}

/// Serializes `ckpt`. The vocabulary is referenced by path and hash; when
/// the checkpoint has no vocabulary path the vocabulary is written next to
/// it and referenced relative to the checkpoint's directory.
pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let vocab_ref = match &ckpt.vocab_path {
        Some(p) => {
            let on_disk = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            if sha256(&on_disk) != ckpt.vocab.content_hash() {
                return Err(Error::VocabHashMismatch(p.clone()));
            }
            std::path::absolute(p).map_err(|e| Error::io(p, e))?
        }
        None => {
            let side = sidecar_vocab_path(path);
            ckpt.vocab.save(&side)?;
            PathBuf::from(side.file_name().expect("sidecar has a file name"))
        }
    };
    let mut config = String::new();
    config.push_str(&format!("dtype={}\n", T::DTYPE.name()));
    let vocab_ref_str = vocab_ref.to_string_lossy();
    check_line("vocabulary path", &vocab_ref_str)?;
    config.push_str(&format!("vocab.path={vocab_ref_str}\n"));
    for (k, v) in ckpt.model.config().to_pairs() {
        config.push_str(&format!("{MODEL_PREFIX}{k}={v}\n"));
    }
    for (k, v) in &ckpt.metadata {
        check_line("metadata key", k)?;
        check_line("metadata value", v)?;
        if k.contains('=') {
            return Err(Error::Input(format!("checkpoint metadata key {k:?} contains '='")));
        }
        config.push_str(&format!("{META_PREFIX}{k}={v}\n"));
    }

    let mut out = Vec::with_capacity(ckpt.model.num_parameters() * T::DTYPE.width() + 4096);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_str(&mut out, &config);
    out.extend_from_slice(&ckpt.vocab.content_hash());
    put_u32(&mut out, ckpt.lineage.len() as u32);
    for s in ckpt.lineage.stages() {
        put_str(&mut out, &s.corpus_id);
        out.push(s.tag.code());
        out.push(s.kind.code());
        out.extend_from_slice(&s.steps.to_le_bytes());
    }
    let params = ckpt.model.params();
    put_u32(&mut out, params.len() as u32);
    for (name, t) in ckpt.model.named_params() {
        put_str(&mut out, name);
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)? as usize;
        std::str::from_utf8(self.take(n, what)?)
            .map_err(|_| Error::MalformedCheckpoint(format!("{what} is not UTF-8")))
    }
}

fn read_tensor_data<T: Scalar, S: Scalar>(bytes: &[u8]) -> Vec<T> {
    bytes
        .chunks_exact(S::DTYPE.width())
        .map(|c| T::from_f64(S::read_le(c).to_f64()))
        .collect()
}

/// Reads a checkpoint, verifying the referenced vocabulary's hash. Data
/// stored at another precision is converted to `T`.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if buf.len() < 4 || r.take(4, "magic")? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let config = r.string("config block")?;
    let mut model_pairs = BTreeMap::new();
    let mut metadata = BTreeMap::new();
    let mut dtype = None;
    let mut vocab_ref = None;
    for line in config.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::MalformedCheckpoint(format!("config line {line:?}")))?;
        if let Some(k) = k.strip_prefix(MODEL_PREFIX) {
            model_pairs.insert(k.to_string(), v.to_string());
        } else if let Some(k) = k.strip_prefix(META_PREFIX) {
            metadata.insert(k.to_string(), v.to_string());
        } else if k == "dtype" {
            dtype = Some(v.parse::<DType>().map_err(|_| Error::MalformedCheckpoint(format!("dtype {v:?}")))?);
        } else if k == "vocab.path" {
            vocab_ref = Some(PathBuf::from(v));
        } else {
            return Err(Error::MalformedCheckpoint(format!("unknown config key {k:?}")));
        }
    }
    let dtype = dtype.ok_or_else(|| Error::MalformedCheckpoint("missing dtype".into()))?;
    let vocab_ref = vocab_ref.ok_or_else(|| Error::MalformedCheckpoint("missing vocab.path".into()))?;
    let model_config = ModelConfig::from_pairs(&model_pairs)
        .map_err(|e| Error::MalformedCheckpoint(format!("model config: {e}")))?;
    let hash: [u8; 32] = r.take(32, "vocabulary hash")?.try_into().expect("32 bytes");

    let n_stages = r.u32("lineage")?;
    let mut lineage = PyramidLineage::new();
    for _ in 0..n_stages {
        let corpus_id = r.string("lineage stage")?.to_string();
        let tag = DomainTag::from_code(r.u8("lineage stage")?)
            .ok_or_else(|| Error::MalformedCheckpoint("lineage domain tag".into()))?;
        let kind = StageKind::from_code(r.u8("lineage stage")?)
            .ok_or_else(|| Error::MalformedCheckpoint("lineage stage kind".into()))?;
        let steps = r.u64("lineage stage")?;
        lineage.push(Stage {
            corpus_id,
            tag,
            steps,
            kind,
        });
    }

    let n_tensors = r.u32("tensor count")? as usize;
    let mut named = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name = r.string("tensor name")?.to_string();
        let what = format!("tensor {name}");
        let ndim = r.u32(&what)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64(&what)? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::MalformedCheckpoint(format!("{what} shape overflows")))?;
        let bytes = r.take(count.saturating_mul(dtype.width()), &what)?;
        let data = match dtype {
            DType::F32 => read_tensor_data::<T, f32>(bytes),
            DType::F64 => read_tensor_data::<T, f64>(bytes),
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::MalformedCheckpoint(format!("{what}: {e}")))?;
        named.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(Error::MalformedCheckpoint(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    let model = EncoderModel::from_named(model_config, named)?;

    let vocab_path = if vocab_ref.is_absolute() {
        vocab_ref
    } else {
        path.parent().unwrap_or(Path::new(".")).join(vocab_ref)
    };
    let bytes = std::fs::read(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
    if sha256(&bytes) != hash {
        return Err(Error::VocabHashMismatch(vocab_path));
    }
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Input(format!("{} is not UTF-8", vocab_path.display())))?;
    let vocab = Vocabulary::parse(&text)?;
    if vocab.len() > model.config().vocab_size {
        return Err(Error::MalformedCheckpoint(format!(
            "vocabulary has {} pieces but model vocab_size is {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    Ok(Checkpoint {
        model,
        vocab: Arc::new(vocab),
        vocab_path: Some(vocab_path),
        lineage,
        metadata,
    })
}

/// The data type a checkpoint file stores its tensors in.
pub fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if buf.len() < 4 || r.take(4, "magic")? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let config = r.string("config block")?;
    config
        .lines()
        .find_map(|l| l.strip_prefix("dtype="))
        .ok_or_else(|| Error::MalformedCheckpoint("missing dtype".into()))?
        .parse()
        .map_err(|_| Error::MalformedCheckpoint("dtype".into()))
}
