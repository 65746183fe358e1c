//! End-to-end persistence: train a few steps, write the checkpoint to disk,
//! read it back, and verify bit-exact state recovery plus the distinct
//! failure modes for damaged files.

use std::fs;

use redapt_core::checkpoint::Checkpoint;
use redapt_core::encoder::EncoderConfig;
use redapt_core::search::PositionConfig;
use redapt_core::train::{
    build_checkpoint, evaluate, restore_model, toy_dataset, train_toy_with, AdamState,
    OptimizerConfig, ToyModel, TrainOptions,
};
use redapt_core::{CheckpointError, Error};

fn small_run() -> (EncoderConfig, redapt_core::train::TrainOutcome) {
    let mut cfg = EncoderConfig::desk();
    cfg.layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ffn = 32;
    cfg.redapt = redapt_core::redapt::RedAptSpec::with_channels(16);
    cfg.positions = PositionConfig::new(vec![0]).unwrap();
    let options = TrainOptions {
        steps: 5,
        batch_size: 4,
        train_clips_per_class: 2,
        val_clips_per_class: 2,
        ..TrainOptions::default()
    };
    let outcome =
        train_toy_with(&cfg, &OptimizerConfig::default(), &options, 99).unwrap();
    (cfg, outcome)
}

#[test]
fn checkpoint_survives_a_disk_round_trip_bit_for_bit() {
    let (_cfg, outcome) = small_run();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    outcome.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();

    assert_eq!(outcome.checkpoint.entries.len(), loaded.entries.len());
    for (name, tensor) in &outcome.checkpoint.entries {
        let other = loaded.get(name).unwrap_or_else(|| panic!("{name} missing after load"));
        assert_eq!(tensor.shape(), other.shape(), "{name} shape");
        assert!(
            tensor
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            "{name} changed across the round trip"
        );
    }
}

#[test]
fn restored_model_evaluates_identically() {
    let (cfg, outcome) = small_run();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    outcome.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();

    let mut fresh = ToyModel::init(&cfg, 123_456).unwrap(); // different seed on purpose
    let state = restore_model(&loaded, &mut fresh).unwrap();
    assert!(state.step > 0, "training steps should persist");

    let val = toy_dataset(2, 0.1, 424_242).unwrap();
    let a = evaluate(&fresh, &val.clips, 4, 0.0).unwrap();

    // The reference: a model rebuilt directly from the in-memory checkpoint.
    let mut reference = ToyModel::init(&cfg, 777).unwrap();
    restore_model(&outcome.checkpoint, &mut reference).unwrap();
    let b = evaluate(&reference, &val.clips, 4, 0.0).unwrap();

    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
}

#[test]
fn adam_moments_round_trip_through_disk() {
    let (cfg, outcome) = small_run();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    outcome.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();

    let mut model = ToyModel::init(&cfg, 1).unwrap();
    let state: AdamState = restore_model(&loaded, &mut model).unwrap();
    let rebuilt = build_checkpoint(&model, &state).unwrap();
    assert_eq!(rebuilt.entries.len(), outcome.checkpoint.entries.len());
    for (name, tensor) in &outcome.checkpoint.entries {
        let other = rebuilt.get(name).unwrap();
        assert!(
            tensor
                .data()
                .iter()
                .zip(other.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            "{name} lost precision through restore"
        );
    }
}

#[test]
fn corrupted_header_and_truncation_fail_distinctly() {
    let (_cfg, outcome) = small_run();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    outcome.checkpoint.save(&path).unwrap();
    let bytes = fs::read(&path).unwrap();

    // Stamp a wrong magic.
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'Z';
    let bad_path = dir.path().join("bad_magic.ckpt");
    fs::write(&bad_path, &bad_magic).unwrap();
    let magic_err = Checkpoint::load(&bad_path).unwrap_err();
    assert!(
        matches!(magic_err, Error::Checkpoint(CheckpointError::BadMagic { .. })),
        "got {magic_err:?}"
    );

    // Cut the file off mid-payload.
    let cut = dir.path().join("truncated.ckpt");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let trunc_err = Checkpoint::load(&cut).unwrap_err();
    assert!(
        matches!(trunc_err, Error::Checkpoint(CheckpointError::Truncated { .. })),
        "got {trunc_err:?}"
    );

    // The two failures are different variants, not one generic error.
    let (Error::Checkpoint(inner_magic), Error::Checkpoint(inner_trunc)) =
        (&magic_err, &trunc_err)
    else {
        panic!("expected checkpoint errors, got {magic_err:?} / {trunc_err:?}");
    };
    assert_ne!(
        std::mem::discriminant(inner_magic),
        std::mem::discriminant(inner_trunc)
    );
}
