use std::fs;
use std::path::Path;

use advit::checkpoint::Checkpoint;
use advit::data::{
    checksum_path, decode_dataset, encode_dataset, generate_synthetic, load_dataset, save_dataset, Split,
    SyntheticSpec,
};
use advit::rng::RngState;
use advit::trainer::OptimizerConfig;
use advit::vit::{ModelParams, ViTConfig};
use advit::Error;

fn config(embed_dim: usize) -> ViTConfig {
    ViTConfig {
        image_size: 8,
        channels: 3,
        patch_size: 4,
        embed_dim,
        num_heads: 2,
        depth: 1,
        mlp_ratio: 2.0,
        num_classes: 3,
    }
}

fn checkpoint(optimizer: Option<OptimizerConfig>) -> Checkpoint<f32> {
    let cfg = config(8);
    let mut rng = RngState::with_stream(7, 1);
    let params = ModelParams::randomized(&cfg, 0.5, &mut rng);
    let optimizer = optimizer.map(|o| {
        let mut state = o.init_state::<f32>(&cfg);
        let grads = ModelParams::randomized(&cfg, 1.0, &mut rng);
        let mut p = params.clone();
        state.step(&o, &mut p, &grads, 0.01).unwrap();
        state
    });
    rng.unit();
    Checkpoint { config: cfg, params, optimizer, rng: rng.snapshot(), epoch: 3 }
}

fn optimizers() -> Vec<Option<OptimizerConfig>> {
    vec![
        None,
        Some(OptimizerConfig::default()),
        Some(OptimizerConfig::Adamw { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.1 }),
    ]
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (i, opt) in optimizers().into_iter().enumerate() {
        let ck = checkpoint(opt);
        let a = dir.path().join(format!("a{i}.ckpt"));
        let b = dir.path().join(format!("b{i}.ckpt"));
        ck.save(&a).unwrap();
        let loaded = Checkpoint::<f32>::load(&a).unwrap();
        assert!(loaded.params.bit_eq(&ck.params));
        assert_eq!(loaded, ck);
        loaded.save(&b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let restored = RngState::restore(loaded.rng);
        assert_eq!(restored.snapshot(), ck.rng);
    }
}

#[test]
fn every_corrupted_checkpoint_byte_is_detected() {
    for opt in optimizers() {
        let bytes = checkpoint(opt).to_bytes().unwrap();
        for i in 0..bytes.len() {
            for flip in [0x01u8, 0x80] {
                let mut bad = bytes.clone();
                bad[i] ^= flip;
                let r = Checkpoint::<f32>::from_bytes(&bad, Path::new("c.ckpt"), None);
                assert!(r.is_err(), "flipping bit {flip:#x} of byte {i} went unnoticed");
            }
        }
    }
}

#[test]
fn payload_corruption_is_a_checksum_error() {
    let bytes = checkpoint(None).to_bytes().unwrap();
    let mut bad = bytes.clone();
    let at = bytes.len() - 60;
    bad[at] ^= 0x10;
    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&bad, Path::new("c.ckpt"), None),
        Err(Error::Checksum { .. })
    ));
    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 30], Path::new("c.ckpt"), None),
        Err(Error::Truncated { .. } | Error::Malformed { .. } | Error::Checksum { .. })
    ));
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&magic, Path::new("c.ckpt"), None),
        Err(Error::BadMagic { .. })
    ));
    let mut version = bytes;
    version[4] = 9;
    assert!(matches!(
        Checkpoint::<f32>::from_bytes(&version, Path::new("c.ckpt"), None),
        Err(Error::UnsupportedVersion { found: 9, .. })
    ));
}

#[test]
fn mismatched_config_names_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    checkpoint(None).save(&path).unwrap();
    match Checkpoint::<f32>::load_expecting(&path, &config(16)) {
        Err(Error::ShapeMismatch { name, expected, found }) => {
            assert_eq!(name, "patch_embed.weight");
            assert_eq!(expected, vec![48, 16]);
            assert_eq!(found, vec![48, 8]);
        }
        other => panic!("expected a shape mismatch, got {other:?}"),
    }
    assert!(Checkpoint::<f32>::load_expecting(&path, &config(8)).is_ok());
    // wrong precision
    assert!(matches!(Checkpoint::<f64>::load(&path), Err(Error::Malformed { .. })));
}

fn synthetic(seed: u64) -> advit::data::Dataset {
    generate_synthetic(&SyntheticSpec {
        classes: 3,
        per_class: 4,
        image_size: 8,
        channels: 3,
        seed,
        total: None,
        split: Split::Train,
    })
    .unwrap()
}

#[test]
fn dataset_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synthetic(1);
    let a = dir.path().join("a.avd");
    let b = dir.path().join("b.avd");
    save_dataset(&a, &ds).unwrap();
    let loaded = load_dataset(&a).unwrap();
    for i in 0..ds.len() {
        assert_eq!(loaded.label(i), ds.label(i));
        for (x, y) in loaded.pixels(i).iter().zip(ds.pixels(i)) {
            assert!((x - y).abs() <= 1.0 / 510.0 + 1e-7);
        }
    }
    save_dataset(&b, &loaded).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    // once quantized, decoding and re-encoding is the identity
    let again = load_dataset(&b).unwrap();
    assert_eq!(again, loaded);
}

#[test]
fn every_corrupted_dataset_byte_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.avd");
    save_dataset(&path, &synthetic(2)).unwrap();
    let bytes = fs::read(&path).unwrap();
    for i in 0..bytes.len() {
        let mut bad = bytes.clone();
        bad[i] ^= 0x01;
        fs::write(&path, &bad).unwrap();
        assert!(load_dataset(&path).is_err(), "flipped byte {i} went unnoticed");
    }
    fs::write(&path, &bytes).unwrap();
    assert!(load_dataset(&path).is_ok());
    fs::write(checksum_path(&path), "zz\n").unwrap();
    assert!(matches!(load_dataset(&path), Err(Error::Malformed { .. })));
}

#[test]
fn dataset_container_errors() {
    let p = Path::new("d.avd");
    assert!(matches!(decode_dataset(&[], p, Split::Train), Err(Error::BadMagic { .. })));
    let bytes = encode_dataset(&synthetic(3)).unwrap();
    let per = 3 * 8 * 8;
    assert!(matches!(
        decode_dataset(&bytes[..bytes.len() - per], p, Split::Train),
        Err(Error::Truncated { .. })
    ));
    let mut bad = bytes.clone();
    bad[24 + 5] = 7;
    match decode_dataset(&bad, p, Split::Train) {
        Err(Error::LabelOutOfRange { offset, label, .. }) => assert_eq!((offset, label), (29, 7)),
        other => panic!("{other:?}"),
    }
    let header: Vec<u32> = bytes[4..24].chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(header, vec![12, 3, 8, 8, 3]);
    assert_eq!(bytes.len(), 24 + 12 + 12 * per);
}
