mod common;

use std::path::PathBuf;

use bicap::autodiff::{BnMode, Graph};
use bicap::checkpoint::{load_checkpoint, save_checkpoint, save_deployment, SaveMeta};
use bicap::entropy::EntropyConfig;
use bicap::model::{build_model, Arch, Model, ModelConfig};
use bicap::quant::QuantConfig;
use bicap::tensor::Tensor;
use bicap::train::OptimizerState;
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tmp(name: &str) -> PathBuf {
    std::env::temp_dir().join(format!("bicap_ckpt_{name}.bnnc"))
}

fn small_model() -> Model {
    let cfg = ModelConfig {
        arch: Arch::LenetBinary,
        num_classes: 10,
        width_den: 1,
        in_channels: 3,
        binarize: true,
        quant: QuantConfig::default(),
    };
    let mut m = build_model(&cfg, 123).unwrap();
    m.norm_stats = Some((vec![0.5, 0.49, 0.51], vec![0.25, 0.26, 0.24]));
    m
}

fn probe_logits(model: &mut Model) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let images = rand_tensor(&mut rng, &[4, 3, 32, 32], -1.0, 1.0);
    let mut g = Graph::inference();
    let out = model.forward(&mut g, images, BnMode::Eval).unwrap();
    g.value(out.logits).data().to_vec()
}

#[test]
fn save_load_save_is_byte_identical_and_probe_exact() {
    let mut model = small_model();
    let before = probe_logits(&mut model);
    let meta = SaveMeta {
        epoch: 7,
        val_acc: Some(0.8125),
        deployment: false,
        entropy: Some(EntropyConfig::default()),
    };
    let opt = OptimizerState::new(&model);
    let p1 = tmp("roundtrip1");
    let p2 = tmp("roundtrip2");
    save_checkpoint(&model, Some(&opt), &meta, &p1).unwrap();

    let loaded = load_checkpoint(&p1).unwrap();
    assert_eq!(loaded.meta, meta);
    assert!(loaded.optimizer.is_some());
    let mut reloaded = loaded.model;
    let after = probe_logits(&mut reloaded);
    assert_eq!(before, after, "training checkpoints restore bit-exact forward behavior");

    save_checkpoint(&reloaded, loaded.optimizer.as_ref(), &loaded.meta, &p2).unwrap();
    let b1 = std::fs::read(&p1).unwrap();
    let b2 = std::fs::read(&p2).unwrap();
    assert_eq!(b1, b2, "save -> load -> save must be a byte-level fixed point");
    let _ = std::fs::remove_file(&p1);
    let _ = std::fs::remove_file(&p2);
}

#[test]
fn deployment_checkpoint_restores_exact_binary_weights() {
    let model = small_model();
    let path = tmp("deploy");
    save_deployment(&model, &SaveMeta::default(), &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert!(loaded.meta.deployment);
    assert!(loaded.optimizer.is_none());
    for ((_, orig), (_, rest)) in
        model.binary_conv_layers().iter().zip(loaded.model.binary_conv_layers().iter())
    {
        assert_eq!(orig.binary.data(), rest.binary.data());
        assert!(rest.master.data().iter().all(|&v| v == 1.0 || v == -1.0));
    }
    let _ = std::fs::remove_file(&path);
}

#[test]
fn deployment_file_size_tracks_packed_model_bytes() {
    let cfg = ModelConfig {
        arch: Arch::PreactResNet18,
        num_classes: 10,
        width_den: 1,
        in_channels: 3,
        binarize: true,
        quant: QuantConfig::default(),
    };
    let model = build_model(&cfg, 0).unwrap();
    let path = tmp("deploy_size");
    let written = save_deployment(&model, &SaveMeta::default(), &path).unwrap();
    let pmb = bicap::bitpack::packed_model_bytes(&model).unwrap() as f64;
    let rel = (written as f64 - pmb).abs() / pmb;
    assert!(rel < 0.03, "file {written} vs packed accounting {pmb} ({rel:.4})");
    // Table-scale check: about 1.4-1.5 MB on disk for the 10-class model.
    assert!(written > 1_350_000 && written < 1_550_000, "file size {written}");
    let _ = std::fs::remove_file(&path);
}

#[test]
fn tampered_magic_is_rejected() {
    let model = small_model();
    let path = tmp("magic");
    save_checkpoint(&model, None, &SaveMeta::default(), &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    let err = load_checkpoint(&path).unwrap_err();
    assert!(err.to_string().contains("magic"), "{err}");
    let _ = std::fs::remove_file(&path);
}

#[test]
fn truncated_file_is_rejected_without_partial_model() {
    let model = small_model();
    let path = tmp("trunc");
    save_checkpoint(&model, None, &SaveMeta::default(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(&path).is_err());
    let _ = std::fs::remove_file(&path);
}

#[test]
fn future_version_is_rejected_with_explicit_error() {
    let model = small_model();
    let path = tmp("version");
    save_checkpoint(&model, None, &SaveMeta::default(), &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    // Bump the version field and refresh the checksum so only the version
    // check can fire.
    bytes[4] = 2;
    let body_end = bytes.len() - 4;
    let crc = {
        let mut crc = 0xFFFF_FFFFu32;
        for &b in &bytes[4..body_end] {
            crc ^= b as u32;
            for _ in 0..8 {
                let mask = (crc & 1).wrapping_neg();
                crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
            }
        }
        !crc
    };
    bytes[body_end..].copy_from_slice(&crc.to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    let err = load_checkpoint(&path).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");
    let _ = std::fs::remove_file(&path);
}

#[test]
fn flipped_payload_byte_fails_the_checksum() {
    let model = small_model();
    let path = tmp("crc");
    save_checkpoint(&model, None, &SaveMeta::default(), &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xFF;
    std::fs::write(&path, &bytes).unwrap();
    let err = load_checkpoint(&path).unwrap_err();
    assert!(err.to_string().contains("checksum"), "{err}");
    let _ = std::fs::remove_file(&path);
}

#[test]
fn optimizer_state_round_trips() {
    let model = small_model();
    let mut opt = OptimizerState::new(&model);
    opt.step = 4242;
    for v in &mut opt.velocities {
        let n = v.numel();
        *v = Tensor::from_vec(v.shape(), (0..n).map(|i| i as f64 * 0.001).collect()).unwrap();
    }
    let path = tmp("opt");
    save_checkpoint(&model, Some(&opt), &SaveMeta::default(), &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let restored = loaded.optimizer.unwrap();
    assert_eq!(restored.step, 4242);
    for (a, b) in opt.velocities.iter().zip(&restored.velocities) {
        assert_eq!(a.data(), b.data());
    }
    let _ = std::fs::remove_file(&path);
}
