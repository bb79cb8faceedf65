mod common;

use sciedkit::checkpoint::{checkpoint_dtype, load_checkpoint, save_checkpoint, sidecar_vocab_path, FORMAT_VERSION};
use sciedkit::corpus::DomainTag;
use sciedkit::tensor::DType;
use sciedkit::training::{pretrain, MaskingPolicy, TrainConfig};
use sciedkit::Error;

fn trained<T: sciedkit::Scalar>() -> sciedkit::checkpoint::Checkpoint<T> {
    let docs = common::overfit_sentences();
    let vocab = common::vocab_for(&docs);
    let c = common::corpus("general", docs, DomainTag::General);
    let ck = common::fresh::<T>(common::tiny_config(), vocab, 8);
    let cfg = TrainConfig {
        steps: 3,
        warmup_steps: 1,
        batch_size: 4,
        ..Default::default()
    };
    let (mut ck, _) = pretrain(ck, &c, &cfg, &MaskingPolicy::default()).unwrap();
    ck.metadata.insert("note".into(), "a b=c".into());
    ck
}

#[test]
fn round_trip_is_bit_exact_f32() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ck = trained::<f32>();
    save_checkpoint(&path, &ck).unwrap();
    assert!(sidecar_vocab_path(&path).exists());
    let back = load_checkpoint::<f32>(&path).unwrap();
    for (a, b) in ck.model.params().iter().zip(back.model.params()) {
        let bits = |t: &sciedkit::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
        assert_eq!(a.shape(), b.shape());
    }
    assert_eq!(back.model.config(), ck.model.config());
    assert_eq!(back.lineage, ck.lineage);
    assert_eq!(back.metadata, ck.metadata);
    assert_eq!(back.vocab.pieces(), ck.vocab.pieces());
    assert_eq!(checkpoint_dtype(&path).unwrap(), DType::F32);

    let again = dir.path().join("again.ckpt");
    save_checkpoint(&again, &back).unwrap();
    let twice = load_checkpoint::<f32>(&again).unwrap();
    assert_eq!(twice.model.params(), ck.model.params());
    assert_eq!(twice.vocab_path, back.vocab_path);
}

#[test]
fn round_trip_is_bit_exact_f64() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ck = trained::<f64>();
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint::<f64>(&path).unwrap();
    assert_eq!(back.model.params(), ck.model.params());
    assert_eq!(checkpoint_dtype(&path).unwrap(), DType::F64);
}

fn saved() -> (tempfile::TempDir, std::path::PathBuf, Vec<u8>) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &trained::<f32>()).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    (dir, path, bytes)
}

#[test]
fn corrupt_files_give_distinct_errors() {
    let (_dir, path, bytes) = saved();

    let mut b = bytes.clone();
    b[0] = b'X';
    std::fs::write(&path, &b).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::BadMagic)));

    let mut b = bytes.clone();
    b[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    std::fs::write(&path, &b).unwrap();
    assert!(matches!(
        load_checkpoint::<f32>(&path),
        Err(Error::UnsupportedVersion { found, .. }) if found == FORMAT_VERSION + 1
    ));

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Truncated(_))));

    let mut b = bytes.clone();
    b.push(0);
    std::fs::write(&path, &b).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::MalformedCheckpoint(_))));
}

#[test]
fn edited_vocabulary_is_rejected() {
    let (_dir, path, _) = saved();
    let vp = sidecar_vocab_path(&path);
    let mut text = std::fs::read_to_string(&vp).unwrap();
    text.push_str("zzzz\n");
    std::fs::write(&vp, text).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::VocabHashMismatch(_))));
}

#[test]
fn loads_across_precisions() {
    let (_dir, path, _) = saved();
    let ck32 = load_checkpoint::<f32>(&path).unwrap();
    let ck64 = load_checkpoint::<f64>(&path).unwrap();
    for (a, b) in ck32.model.params().iter().zip(ck64.model.params()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| *x as f64 == *y));
    }
}
