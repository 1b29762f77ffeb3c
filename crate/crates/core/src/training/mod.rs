//! Joint evidence and answer training with AdamW, best-dev checkpointing
//! and a CSV metrics log.

mod config;
pub mod loss;
pub mod optim;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Dataset;
use crate::encoder::Vocab;
use crate::evaluation::{evaluate, EvalReport};
use crate::model::{forward, Example, ModelConfig, ModelError};
use crate::numerics::{checkpoint, CheckpointError, Matrix, NumericsError, ParameterStore, Real, Tape, Var};

pub use config::{ConfigError, TrainConfig};
pub use loss::{answer_marginal_loss, evidence_loss, total_loss};
pub use optim::{clip_global_norm, schedule, AdamW};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss on instance {query_id}")]
    NonFinite { query_id: String },
    #[error("{query_id}: {source}")]
    Model { query_id: String, source: ModelError },
    #[error("no training examples")]
    Empty,
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Error)]
pub enum PersistError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("cannot read model metadata {path}: {reason}")]
    Meta { path: String, reason: String },
    #[error("checkpoint hidden size {checkpoint} does not match configured hidden size {config}")]
    HiddenMismatch { config: usize, checkpoint: usize },
    #[error("checkpoint parameter `{name}` has shape {found:?}, configuration expects {expected:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint lacks parameter `{0}`")]
    Missing(String),
}

/// Everything besides the weights needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: TrainConfig,
    pub vocab: Vocab,
}

impl ModelMeta {
    pub fn model_config(&self) -> ModelConfig {
        self.config.model_config(&self.vocab)
    }
}

pub fn meta_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Write the checkpoint and its metadata sidecar, each atomically.
pub fn save_model(path: &Path, meta: &ModelMeta, store: &ParameterStore<f32>) -> Result<(), PersistError> {
    let mp = meta_path(path);
    let io = |e: std::io::Error| PersistError::Meta { path: mp.display().to_string(), reason: e.to_string() };
    let tmp = mp.with_extension("tmp-meta");
    std::fs::write(&tmp, serde_json::to_string_pretty(meta).expect("metadata serializes")).map_err(io)?;
    std::fs::rename(&tmp, &mp).map_err(io)?;
    checkpoint::save(store, path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(ModelMeta, ParameterStore<f32>), PersistError> {
    let store = checkpoint::load(path)?;
    let mp = meta_path(path);
    let meta_err = |reason: String| PersistError::Meta { path: mp.display().to_string(), reason };
    let text = std::fs::read_to_string(&mp).map_err(|e| meta_err(e.to_string()))?;
    let mut meta: ModelMeta = serde_json::from_str(&text).map_err(|e| meta_err(e.to_string()))?;
    meta.vocab.reindex();
    check_shapes(&meta.model_config(), &store)?;
    Ok((meta, store))
}

/// Verify a store against the parameter layout a configuration implies.
pub fn check_shapes(cfg: &ModelConfig, store: &ParameterStore<f32>) -> Result<(), PersistError> {
    if let Some(p) = store.parameter("encoder.embed") {
        if p.dims.get(1) != Some(&cfg.hidden_size) {
            return Err(PersistError::HiddenMismatch { config: cfg.hidden_size, checkpoint: p.dims[1] });
        }
    }
    for (name, dims) in cfg.param_spec() {
        match store.parameter(&name) {
            None => return Err(PersistError::Missing(name)),
            Some(p) if p.dims != dims => return Err(PersistError::Shape { name, expected: dims, found: p.dims.clone() }),
            Some(_) => {}
        }
    }
    Ok(())
}

/// Vocabulary over the question and passage tokens of a dataset.
pub fn build_vocab(data: &Dataset, min_count: usize) -> Vocab {
    let texts = data
        .iter()
        .flat_map(|(doc, qs)| std::iter::once(doc.tokens.as_slice()).chain(qs.iter().map(|q| q.question_tokens.as_slice())));
    Vocab::build(texts, min_count)
}

/// Prepare every instance; failures are returned with their query ids.
pub fn prepare_examples(data: &Dataset, vocab: &Vocab, cfg: &TrainConfig) -> (Vec<Example>, Vec<(String, ModelError)>) {
    let jobs: Vec<_> = data.iter().flat_map(|(doc, qs)| qs.iter().map(move |q| (doc, q))).collect();
    let results: Vec<_> = jobs
        .par_iter()
        .map(|(doc, qa)| Example::prepare(doc, qa, vocab, cfg.max_len, cfg.max_expr_terms, cfg.expression_cap))
        .collect();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for ((_, qa), r) in jobs.iter().zip(results) {
        match r {
            Ok(e) => ok.push(e),
            Err(e) => failed.push((qa.query_id.clone(), e)),
        }
    }
    (ok, failed)
}

/// Component values of one instance's loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub answer: Option<f64>,
    pub sentence: Option<f64>,
    pub clause: Option<f64>,
}

/// Build the full training loss of one example on `tape`.
pub fn instance_loss<T: Real>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    ex: &Example,
) -> Result<(Var, LossParts), ModelError> {
    let f = forward(model, tape, store, ex, cfg.gold_evidence_forcing)?;
    let labels = &ex.supervision.labels;
    let ans = answer_marginal_loss(tape, &f.heads, &ex.supervision.annotations, &ex.layout)?;
    let evi_s = evidence_loss(tape, f.p_sentence, &labels.sentence_labels)?;
    let evi_c = evidence_loss(tape, f.p_clause, &labels.clause_labels)?;
    let total = total_loss(tape, ans, evi_s, evi_c, cfg.lambda_sentence, cfg.lambda_clause)?;
    let read = |tape: &Tape<T>, v: Option<Var>| v.map(|v| tape.scalar(v).as_f64());
    let parts = LossParts {
        total: tape.scalar(total).as_f64(),
        answer: read(tape, ans),
        sentence: read(tape, evi_s),
        clause: read(tape, evi_c),
    };
    Ok((total, parts))
}

type Grads = BTreeMap<String, Matrix<f32>>;

fn example_gradients(
    model: &ModelConfig,
    cfg: &TrainConfig,
    store: &ParameterStore<f32>,
    ex: &Example,
) -> Result<(f64, Grads), TrainError> {
    let non_finite = || TrainError::NonFinite { query_id: ex.qa.query_id.clone() };
    let mut tape = Tape::new();
    let (root, parts) = match instance_loss(model, cfg, &mut tape, store, ex) {
        Ok(r) => r,
        Err(ModelError::Numerics(NumericsError::NonFinite { .. })) => return Err(non_finite()),
        Err(source) => return Err(TrainError::Model { query_id: ex.qa.query_id.clone(), source }),
    };
    if !parts.total.is_finite() {
        return Err(non_finite());
    }
    let grads = tape.backward(root).map_err(|_| non_finite())?;
    Ok((parts.total, tape.param_grads(&grads)))
}

/// One CSV row of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev: EvalReport,
}

pub const CSV_HEADER: &str = "epoch,train_loss,dev_em,dev_f1,number_em,number_f1,date_em,date_f1,span_em,span_f1,\
sentence_p,sentence_r,sentence_f1,clause_p,clause_r,clause_f1,akr_sentence,akr_clause";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let d = &self.dev;
        let mut cols = vec![self.epoch.to_string(), format!("{:.6}", self.train_loss), format!("{:.4}", d.em), format!("{:.4}", d.f1)];
        for name in crate::evaluation::BUCKETS {
            let b = d.bucket(name).cloned().unwrap_or_default();
            cols.push(format!("{:.4}", b.em));
            cols.push(format!("{:.4}", b.f1));
        }
        for m in [&d.sentence, &d.clause] {
            cols.extend([m.precision, m.recall, m.f1].map(|v| format!("{v:.4}")));
        }
        cols.push(format!("{:.4}", d.akr_sentence));
        cols.push(format!("{:.4}", d.akr_clause));
        cols.join(",")
    }
}

pub struct TrainOutcome {
    pub epochs: Vec<EpochRecord>,
    /// Mean loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    /// Parameters of the best dev epoch.
    pub best: ParameterStore<f32>,
    pub meta: ModelMeta,
}

impl TrainOutcome {
    pub fn best_record(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }
}

/// Train, evaluating on `dev` after every epoch. With `out` set, the best
/// dev epoch is checkpointed there and metrics go to `out` + `.metrics.csv`.
pub fn train(
    cfg: &TrainConfig,
    vocab: &Vocab,
    train_set: &[Example],
    dev_set: &[Example],
    out: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> Result<TrainOutcome, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::Empty);
    }
    let meta = ModelMeta { config: cfg.clone(), vocab: vocab.clone() };
    let model = meta.model_config();
    let mut store: ParameterStore<f32> =
        model.init_store(cfg.seed).map_err(|e| TrainError::Model { query_id: "<init>".into(), source: e.into() })?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut csv = match out {
        Some(p) => {
            let path = metrics_path(p);
            let mut f = std::fs::File::create(&path).map_err(|source| TrainError::Io { path: path.display().to_string(), source })?;
            writeln!(f, "{CSV_HEADER}").map_err(|source| TrainError::Io { path: path.display().to_string(), source })?;
            Some((path, f))
        }
        None => None,
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    let mut step_losses = Vec::with_capacity(total_steps);
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, ParameterStore<f32>)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, Grads)> = batch
                .par_iter()
                .map(|&i| example_gradients(&model, cfg, &store, &train_set[i]))
                .collect::<Result<_, _>>()?;
            // reduce in batch order so sums do not depend on scheduling
            let scale = 1.0 / batch.len() as f32;
            let mut grads: Grads = BTreeMap::new();
            let mut batch_loss = 0.0;
            for (l, g) in results {
                batch_loss += l;
                for (name, m) in g {
                    match grads.get_mut(&name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(m.data()).for_each(|(a, &b)| *a += b),
                        None => {
                            grads.insert(name, m);
                        }
                    }
                }
            }
            grads.values_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= scale));
            clip_global_norm(&mut grads, cfg.grad_clip);
            let mult = schedule(step, total_steps, cfg.warmup_fraction);
            opt.step(&mut store, &grads, |name| mult * if name.starts_with("encoder.") { cfg.lr_model } else { cfg.lr_other });
            step += 1;
            let mean = batch_loss / batch.len() as f64;
            step_losses.push(mean);
            epoch_loss += batch_loss;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let dev = if dev_set.is_empty() {
            EvalReport::default()
        } else {
            evaluate(&model, &store, dev_set, cfg.threshold).map_err(|source| TrainError::Model { query_id: "<dev>".into(), source })?
        };
        log(&format!(
            "epoch {epoch}/{}: train_loss {train_loss:.4}  dev EM {:.2} F1 {:.2}  detector F1 sentence {:.2} clause {:.2}",
            cfg.epochs, dev.em, dev.f1, dev.sentence.f1, dev.clause.f1
        ));
        let record = EpochRecord { epoch, train_loss, dev };
        if let Some((path, f)) = csv.as_mut() {
            writeln!(f, "{}", record.csv_row()).map_err(|source| TrainError::Io { path: path.display().to_string(), source })?;
        }
        if best.as_ref().is_none_or(|(_, em, _)| record.dev.em > *em) {
            if let Some(p) = out {
                save_model(p, &meta, &store)?;
            }
            best = Some((epoch, record.dev.em, store.clone()));
        }
        epochs.push(record);
    }
    let (best_epoch, _, best) = best.expect("at least one epoch");
    Ok(TrainOutcome { epochs, step_losses, best_epoch, best, meta })
}

pub fn metrics_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".metrics.csv");
    PathBuf::from(s)
}
