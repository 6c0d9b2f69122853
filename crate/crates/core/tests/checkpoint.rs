use jscc_core::data::synthetic;
use jscc_core::model::{Mode, Model, ModelKind, ModelSpec};
use jscc_core::training::*;
use jscc_core::Error;

fn tiny(kind: ModelKind, seed: u64) -> Model {
    Model::build(ModelSpec::with_default_plan(kind, 8), seed).unwrap()
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        ..TrainConfig::desk()
    }
}

fn trained_checkpoint(kind: ModelKind) -> Checkpoint {
    let data = synthetic(8, 8, 5);
    let cfg = quick_config(1);
    let mut model = tiny(kind, 3);
    let history = train(&mut model, &data, None, &cfg, 0).unwrap();
    Checkpoint {
        model,
        train: cfg,
        epoch: 1,
        history,
    }
}

/// Byte range of the tensor manifest inside an encoded checkpoint.
fn manifest_span(bytes: &[u8]) -> std::ops::Range<usize> {
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&bytes[16..16 + len]).unwrap();
    let start = header.find("\"tensors\":").unwrap();
    let end = start + header[start..].find(']').unwrap();
    let end = end + header[end..].find("}]").unwrap() + 2;
    16 + start..16 + end
}

#[test]
fn round_trip_is_exact() {
    for kind in [ModelKind::Ae, ModelKind::Vae] {
        let ckpt = trained_checkpoint(kind);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        for ((na, a), (nb, b)) in ckpt.model.tensors().zip(back.model.tensors()) {
            assert_eq!(na, nb);
            let bits = |t: &jscc_autodiff::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        // saving the reloaded model reproduces the file
        assert_eq!(encode_checkpoint(&back).unwrap(), std::fs::read(&path).unwrap());
    }
}

#[test]
fn reloaded_model_evaluates_bit_identically() {
    let data = synthetic(6, 16, 9);
    let mut model = Model::build(ModelSpec::with_default_plan(ModelKind::Vae, 16), 2).unwrap();
    let cfg = quick_config(1);
    let history = train(&mut model, &data, None, &cfg, 0).unwrap();
    let ckpt = Checkpoint { model, train: cfg, epoch: 1, history };
    let bytes = encode_checkpoint(&ckpt).unwrap();
    let back = decode_checkpoint("mem".as_ref(), &bytes).unwrap();
    let channel = ckpt.train.channel(ckpt.model.spec().k).unwrap().with_snr(0.0);
    let mode = Mode::Eval { sample_latent: true };
    let a = evaluate(&ckpt.model, &data, &channel, mode, 11, 4).unwrap();
    let b = evaluate(&back.model, &data, &channel, mode, 11, 4).unwrap();
    assert_eq!(a.psnr_db.to_bits(), b.psnr_db.to_bits());
    assert_eq!(a.ssim.to_bits(), b.ssim.to_bits());
}

#[test]
fn every_manifest_byte_is_guarded() {
    let bytes = encode_checkpoint(&trained_checkpoint(ModelKind::Ae)).unwrap();
    let span = manifest_span(&bytes);
    assert!(span.len() > 100);
    for i in span {
        for mask in [0x01u8, 0x20] {
            let mut bad = bytes.clone();
            bad[i] ^= mask;
            match decode_checkpoint("bad".as_ref(), &bad) {
                Err(Error::Checkpoint { .. }) => {}
                other => panic!("flip {mask:#x} at byte {i} gave {other:?}"),
            }
        }
    }
}

#[test]
fn payload_corruption_is_detected() {
    let bytes = encode_checkpoint(&trained_checkpoint(ModelKind::Ae)).unwrap();
    let mut bad = bytes.clone();
    let last = bad.len() - 3;
    bad[last] ^= 0x40;
    let err = decode_checkpoint("bad".as_ref(), &bad).unwrap_err().to_string();
    assert!(err.contains("checksum"), "{err}");
}

#[test]
fn structural_errors_are_specific() {
    let bytes = encode_checkpoint(&trained_checkpoint(ModelKind::Ae)).unwrap();
    let msg = |b: &[u8]| decode_checkpoint("x".as_ref(), b).unwrap_err().to_string();

    assert!(msg(&bytes[..bytes.len() - 4]).contains("truncated"));
    assert!(msg(&bytes[..10]).contains("truncated"));

    let mut long = bytes.clone();
    long.extend([0u8; 4]);
    assert!(msg(&long).contains("trailing"));

    let mut magic = bytes.clone();
    magic[..8].copy_from_slice(b"NOTJSCC!");
    assert!(msg(&magic).contains("magic"));

    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&bytes[16..16 + len]).unwrap().replacen("\"f32\"", "\"f64\"", 1);
    let mut wide = bytes[..8].to_vec();
    wide.extend((header.len() as u64).to_le_bytes());
    wide.extend(header.as_bytes());
    wide.extend(&bytes[16 + len..]);
    assert!(msg(&wide).contains("f64"));
}

#[test]
fn missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoint(&dir.path().join("none.ckpt")), Err(Error::Io { .. })));
}

#[test]
fn one_epoch_is_deterministic() {
    let run = || trained_checkpoint(ModelKind::Vae);
    let (a, b) = (run(), run());
    assert_eq!(tensor_payload(&a.model), tensor_payload(&b.model));
    assert_eq!(a.history, b.history);
}

#[test]
fn longer_runs_extend_shorter_ones() {
    let data = synthetic(8, 8, 5);
    let mut short = tiny(ModelKind::Ae, 1);
    let first = train(&mut short, &data, None, &quick_config(1), 0).unwrap();
    let mut long = tiny(ModelKind::Ae, 1);
    let full = train(&mut long, &data, None, &quick_config(2), 0).unwrap();
    assert_eq!(full[0], first[0]);

    let mut resumed = short.clone();
    let rest = train(&mut resumed, &data, None, &quick_config(1), 1).unwrap();
    assert_eq!(rest.len(), 1);
    assert_eq!(rest[0].epoch, 1);
}

#[test]
fn noiseless_training_reduces_loss() {
    let data = synthetic(64, 8, 2);
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 16,
        train_snr_db: f64::INFINITY,
        ..TrainConfig::desk()
    };
    let mut model = tiny(ModelKind::Ae, 0);
    let history = train(&mut model, &data, None, &cfg, 0).unwrap();
    assert_eq!(history.len(), 30);
    assert!(history.iter().all(|r| r.train_loss.is_finite()));
    assert!(history[29].train_loss < history[0].train_loss, "{history:?}");
}
