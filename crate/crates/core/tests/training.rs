mod common;

use evidr::evaluation::evaluate;
use evidr::numerics::checkpoint::{self, CheckpointError};
use evidr::training::{check_shapes, load_model, meta_path, metrics_path, train, PersistError, TrainConfig, CSV_HEADER};
use proptest::prelude::*;

#[test]
fn same_seed_reproduces_loss_curve_and_weights() {
    let cfg = common::small_config();
    let data = common::small_run_data(&cfg);
    let a = train(&cfg, &data.vocab, &data.train, &data.dev, None, &mut |_| {}).unwrap();
    let b = train(&cfg, &data.vocab, &data.train, &data.dev, None, &mut |_| {}).unwrap();
    assert_eq!(a.step_losses.len(), 2 * data.train.len().div_ceil(cfg.batch_size));
    assert_eq!(a.step_losses, b.step_losses);
    assert_eq!(checkpoint::encode(&a.best), checkpoint::encode(&b.best));
    assert!(a.step_losses.iter().all(|l| l.is_finite()));

    let other = TrainConfig { seed: cfg.seed + 1, ..cfg.clone() };
    let c = train(&other, &data.vocab, &data.train, &data.dev, None, &mut |_| {}).unwrap();
    assert_ne!(a.step_losses, c.step_losses);
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let cfg = common::small_config();
    let data = common::small_run_data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let outcome = train(&cfg, &data.vocab, &data.train, &data.dev, Some(&path), &mut |_| {}).unwrap();
    assert!(meta_path(&path).exists());

    let csv = std::fs::read_to_string(metrics_path(&path)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 1 + cfg.epochs);

    let (meta, store) = load_model(&path).unwrap();
    assert_eq!(meta, outcome.meta);
    assert_eq!(checkpoint::encode(&store), checkpoint::encode(&outcome.best));
    let model = meta.model_config();
    let before = evaluate(&model, &outcome.best, &data.dev, cfg.threshold).unwrap();
    let after = evaluate(&model, &store, &data.dev, cfg.threshold).unwrap();
    assert_eq!(before, after);
    assert_eq!(outcome.best_record().dev.em, after.em);
}

#[test]
fn hidden_size_mismatch_is_reported() {
    let cfg = common::small_config();
    let data = common::small_run_data(&cfg);
    let model = cfg.model_config(&data.vocab);
    let store = model.init_store::<f32>(1).unwrap();
    let wider = TrainConfig { hidden_size: 32, ..cfg }.model_config(&data.vocab);
    match check_shapes(&wider, &store) {
        Err(PersistError::HiddenMismatch { config: 32, checkpoint: 16 }) => {}
        other => panic!("expected hidden mismatch, got {other:?}"),
    }
    check_shapes(&model, &store).unwrap();
}

fn encoded_small_store() -> Vec<u8> {
    let cfg = common::small_config();
    let vocab = evidr::encoder::Vocab::build(std::iter::empty::<&[evidr::corpus::Token]>(), 1);
    checkpoint::encode(&cfg.model_config(&vocab).init_store::<f32>(5).unwrap())
}

#[test]
fn bad_magic_is_rejected() {
    let mut bytes = encoded_small_store();
    bytes[0] ^= 0x20;
    assert!(matches!(checkpoint::decode(&bytes), Err(CheckpointError::BadMagic)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_single_byte_corruption_is_caught(offset in any::<usize>(), flip in 1u8..=255) {
        let mut bytes = encoded_small_store();
        let i = 6 + offset % (bytes.len() - 6);
        bytes[i] ^= flip;
        let crc = matches!(checkpoint::decode(&bytes), Err(CheckpointError::Crc { .. }));
        prop_assert!(crc, "byte {} not caught", i);
    }
}
