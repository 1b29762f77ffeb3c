#![allow(dead_code)]

pub mod oracle;

use evidr::corpus::{ingest_drop_str, to_drop_json, Dataset};
use evidr::encoder::Vocab;
use evidr::model::Example;
use evidr::synth::generate_split;
use evidr::training::{build_vocab, prepare_examples, TrainConfig};

/// Synthetic split routed through the same JSON path the CLI reads.
pub fn synthetic(seed: u64, split: &str, n: usize) -> Dataset {
    ingest_drop_str(&to_drop_json(&generate_split(seed, split, n))).unwrap().data
}

pub fn small_config() -> TrainConfig {
    TrainConfig {
        hidden_size: 16,
        max_len: 160,
        epochs: 2,
        batch_size: 8,
        lr_model: 3e-3,
        lr_other: 3e-3,
        seed: 3,
        ..TrainConfig::default()
    }
}

pub struct Prepared {
    pub vocab: Vocab,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

pub fn prepare(cfg: &TrainConfig, train: &Dataset, dev: &Dataset) -> Prepared {
    let vocab = build_vocab(train, cfg.min_count);
    let (train, bad) = prepare_examples(train, &vocab, cfg);
    assert!(bad.is_empty(), "{bad:?}");
    let (dev, bad) = prepare_examples(dev, &vocab, cfg);
    assert!(bad.is_empty(), "{bad:?}");
    Prepared { vocab, train, dev }
}

pub fn small_run_data(cfg: &TrainConfig) -> Prepared {
    prepare(cfg, &synthetic(21, "train", 96), &synthetic(21, "dev", 32))
}
