//! Command-line verbs.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use crate::corpus::{ingest_drop, CorpusError, Dataset};
use crate::evaluation::{evaluate, infer, DEFAULT_THRESHOLD};
use crate::graph::to_dot;
use crate::model::{Example, ModelError};
use crate::numerics::CheckpointError;
use crate::supervision::{compute_akr, supervise_with, DEFAULT_EXPRESSION_CAP, DEFAULT_MAX_TERMS};
use crate::training::{build_vocab, load_model, prepare_examples, train, ConfigError, PersistError, TrainConfig, TrainError};

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING_FILE: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;
pub const EXIT_CORRUPT_CHECKPOINT: i32 = 5;

#[derive(Parser, Debug)]
#[command(name = "evidr", version, about = "Evidence-driven discrete reasoning over passages")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse a DROP-format file and write the processed dataset.
    Ingest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic census corpus (train.json, dev.json).
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        dev: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distant evidence labels and answer annotations as JSON lines.
    Label {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report_akr: bool,
    },
    /// Train and keep the best dev checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        per_type: bool,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Write one instance's reasoning graph in DOT format.
    InspectGraph {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        query_id: String,
        #[arg(long)]
        out: PathBuf,
        /// Annotate nodes with evidence weights from this checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Finite-difference check of the full training loss.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        size: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// List a checkpoint's parameters and configuration.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingFile(_) => EXIT_MISSING_FILE,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Persist(PersistError::Checkpoint(CheckpointError::Io { .. })) => EXIT_MISSING_FILE,
            CliError::Persist(PersistError::Checkpoint(_)) => EXIT_CORRUPT_CHECKPOINT,
            CliError::Persist(_) => EXIT_CONFIG,
            _ => EXIT_OTHER,
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() { Ok(()) } else { Err(CliError::MissingFile(path.to_path_buf())) }
}

/// A DROP-format JSON file, or a directory written by `ingest`.
pub fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    require(path)?;
    if path.is_dir() {
        let file = path.join("dataset.json");
        require(&file)?;
        let text = std::fs::read_to_string(&file).map_err(io_err(&file))?;
        return serde_json::from_str(&text).map_err(|e| CliError::Corpus(CorpusError::Json(e)));
    }
    let report = ingest_drop(path)?;
    if report.skipped > 0 {
        eprintln!("warning: skipped {} instances with unknown answer shapes", report.skipped);
    }
    Ok(report.data)
}

fn create_parent(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    Ok(())
}

/// Run with the given arguments (program name first); returns the exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<(), CliError> {
    let mut say = |s: String| {
        let _ = writeln!(out, "{s}");
    };
    match cmd {
        Command::Ingest { data, out: dir } => {
            require(&data)?;
            let report = ingest_drop(&data)?;
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let file = dir.join("dataset.json");
            std::fs::write(&file, serde_json::to_string(&report.data).expect("dataset serializes")).map_err(io_err(&file))?;
            say(format!(
                "ingested {} passages, {} instances ({} skipped) -> {}",
                report.data.len(),
                report.num_instances(),
                report.skipped,
                file.display()
            ));
        }
        Command::Synth { seed, train, dev, out: dir } => {
            if train == 0 || dev == 0 {
                return Err(CliError::Usage("--train and --dev must be at least 1".into()));
            }
            say(format!("seed = {seed}\ntrain = {train}\ndev = {dev}"));
            crate::synth::write_synthetic(seed, train, dev, &dir).map_err(io_err(&dir))?;
            say(format!("wrote {} and {}", dir.join("train.json").display(), dir.join("dev.json").display()));
        }
        Command::Label { data, out: file, report_akr } => {
            let dataset = load_dataset(&data)?;
            say(format!("max_expr_terms = {DEFAULT_MAX_TERMS}\nexpression_cap = {DEFAULT_EXPRESSION_CAP}"));
            create_parent(&file)?;
            let mut w = std::io::BufWriter::new(std::fs::File::create(&file).map_err(io_err(&file))?);
            let mut labels = Vec::new();
            let mut unmatched = 0;
            for (doc, qs) in &dataset {
                for qa in qs {
                    let b = supervise_with(doc, qa, DEFAULT_MAX_TERMS, DEFAULT_EXPRESSION_CAP);
                    unmatched += usize::from(b.labels.is_unmatched());
                    let line = json!({
                        "query_id": qa.query_id,
                        "passage_id": doc.passage_id,
                        "sentence_labels": b.labels.sentence_labels,
                        "clause_labels": b.labels.clause_labels,
                        "annotations": b.annotations,
                    });
                    writeln!(w, "{line}").map_err(io_err(&file))?;
                    labels.push(b.labels);
                }
            }
            w.flush().map_err(io_err(&file))?;
            say(format!("labeled {} instances ({unmatched} with no evidence fragment) -> {}", labels.len(), file.display()));
            if report_akr {
                let (s, c) = compute_akr(&labels);
                say(format!("AKR sentence {s:.2}  clause {c:.2}"));
                say("note: fragments come from a rule-based sentence/clause segmenter; AKR depends on its boundaries.".into());
            }
        }
        Command::Train { config, train: train_path, dev, out: ckpt } => {
            require(&config)?;
            let cfg = TrainConfig::load(&config)?;
            say(format!("# resolved configuration\n{}", cfg.to_text().trim_end()));
            let train_data = load_dataset(&train_path)?;
            let dev_data = load_dataset(&dev)?;
            let vocab = build_vocab(&train_data, cfg.min_count);
            let (train_set, skipped_t) = prepare_examples(&train_data, &vocab, &cfg);
            let (dev_set, skipped_d) = prepare_examples(&dev_data, &vocab, &cfg);
            for (qid, e) in skipped_t.iter().chain(&skipped_d) {
                eprintln!("warning: skipped {qid}: {e}");
            }
            let trainable = train_set.iter().filter(|e| e.supervision.annotations.is_trainable()).count();
            say(format!(
                "vocabulary {} words; train {} instances ({} with feasible answers), dev {}",
                vocab.len(),
                train_set.len(),
                trainable,
                dev_set.len()
            ));
            create_parent(&ckpt)?;
            let outcome = train(&cfg, &vocab, &train_set, &dev_set, Some(&ckpt), &mut |line| say(line.to_string()))?;
            let best = outcome.best_record();
            say(format!(
                "best epoch {}: dev EM {:.2} F1 {:.2} -> {}",
                outcome.best_epoch,
                best.dev.em,
                best.dev.f1,
                ckpt.display()
            ));
        }
        Command::Eval { ckpt, data, report, per_type, threshold } => {
            require(&ckpt)?;
            let (meta, store) = load_model(&ckpt)?;
            let cfg = TrainConfig { threshold, ..meta.config.clone() };
            say(format!("# checkpoint configuration\n{}", cfg.to_text().trim_end()));
            let dataset = load_dataset(&data)?;
            let (examples, skipped) = prepare_examples(&dataset, &meta.vocab, &cfg);
            for (qid, e) in &skipped {
                eprintln!("warning: skipped {qid}: {e}");
            }
            let rep = evaluate(&meta.model_config(), &store, &examples, threshold)?;
            say(rep.table(per_type));
            create_parent(&report)?;
            let mut summary = serde_json::to_value(&rep).expect("report serializes");
            summary.as_object_mut().expect("object").remove("records");
            std::fs::write(&report, serde_json::to_string_pretty(&summary).expect("json")).map_err(io_err(&report))?;
            let preds = PathBuf::from(format!("{}.predictions.jsonl", report.display()));
            let mut w = std::io::BufWriter::new(std::fs::File::create(&preds).map_err(io_err(&preds))?);
            for r in &rep.records {
                writeln!(w, "{}", serde_json::to_string(r).expect("json")).map_err(io_err(&preds))?;
            }
            w.flush().map_err(io_err(&preds))?;
            say(format!("report -> {}\npredictions -> {}", report.display(), preds.display()));
        }
        Command::InspectGraph { data, query_id, out: file, ckpt } => {
            let dataset = load_dataset(&data)?;
            let (doc, qa) = dataset
                .iter()
                .find_map(|(d, qs)| qs.iter().find(|q| q.query_id == query_id).map(|q| (d, q)))
                .ok_or_else(|| CliError::Failed(format!("no instance with query id `{query_id}`")))?;
            let (doc, graph, weights) = match ckpt {
                Some(path) => {
                    require(&path)?;
                    let (meta, store) = load_model(&path)?;
                    let ex = Example::prepare(doc, qa, &meta.vocab, meta.config.max_len, meta.config.max_expr_terms, meta.config.expression_cap)?;
                    let inf = infer(&meta.model_config(), &store, &ex)?;
                    let w = node_weights_of(&ex, &inf);
                    (ex.doc, ex.graph, Some(w))
                }
                None => (doc.clone(), crate::graph::build_graph(doc, qa), None),
            };
            create_parent(&file)?;
            std::fs::write(&file, to_dot(&graph, &doc, qa, weights.as_deref())).map_err(io_err(&file))?;
            say(format!("{} nodes, {} edges -> {}", graph.nodes.len(), graph.edges.len(), file.display()));
        }
        Command::Gradcheck { size, seed } => {
            if size != "tiny" {
                return Err(CliError::Usage(format!("unknown size `{size}` (only `tiny` is available)")));
            }
            say(format!("seed = {seed}\nsize = {size}"));
            let r = crate::diagnostics::full_model_gradcheck(seed, 1e-5)?;
            say(format!(
                "{} parameters over a {}-token instance: max relative error {:.3e} (worst {:?})",
                r.parameters, r.tokens, r.report.max_relative_error, r.report.worst_parameter
            ));
            if r.report.max_relative_error >= 1e-4 {
                return Err(CliError::Failed("gradient check failed (threshold 1e-4)".into()));
            }
            say("gradient check passed (threshold 1e-4)".into());
        }
        Command::Inspect { ckpt } => {
            require(&ckpt)?;
            let (meta, store) = load_model(&ckpt)?;
            say(format!("# configuration\n{}", meta.config.to_text().trim_end()));
            say(format!("vocabulary {} words; {} parameters, {} scalars", meta.vocab.len(), store.len(), store.num_scalars()));
            for (name, p) in store.iter() {
                say(format!("{name} {:?}", p.dims));
            }
        }
    }
    Ok(())
}

/// Per-node evidence weights as the model sees them at inference.
fn node_weights_of(ex: &Example, inf: &crate::evaluation::Inference) -> Vec<f64> {
    use crate::graph::NodeKind;
    ex.graph
        .nodes
        .iter()
        .map(|n| match n.kind {
            NodeKind::Number if n.in_question => inf.p_gate[ex.layout.question.start + n.start],
            NodeKind::Number => inf.p_gate[ex.layout.passage.start + n.start],
            NodeKind::Sentence => inf.p_sentence[n.source],
            NodeKind::Clause => inf.p_clause[n.source],
        })
        .collect()
}
