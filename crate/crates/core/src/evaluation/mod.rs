//! Answer scoring and evidence-detector metrics.

mod metrics;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::AnswerSpec;
use crate::model::{forward, Example, ModelConfig, ModelError};
use crate::numerics::{ParameterStore, Tape};
use crate::predictors::{decode_answer, DecodedAnswer, PredictionResult};
use crate::supervision::{compute_akr, EvidenceLabels};

pub use metrics::{em_f1, em_f1_max, normalize_answer, token_bag};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Model outputs for one example.
#[derive(Clone, Debug)]
pub struct Inference {
    pub prediction: PredictionResult,
    pub decoded: DecodedAnswer,
    pub p_sentence: Vec<f64>,
    pub p_clause: Vec<f64>,
    /// Gating distribution over sequence positions.
    pub p_gate: Vec<f64>,
}

pub fn infer(cfg: &ModelConfig, store: &ParameterStore<f32>, ex: &Example) -> Result<Inference, ModelError> {
    let mut tape = Tape::new();
    let f = forward(cfg, &mut tape, store, ex, false)?;
    let prediction = PredictionResult::read(&tape, &f.heads, &ex.layout);
    let decoded = decode_answer(&prediction, &ex.doc, &ex.qa, &ex.layout, &ex.numbers);
    let column = |v| tape.value(v).data().iter().map(|&x: &f32| f64::from(x)).collect();
    Ok(Inference {
        p_sentence: column(f.p_sentence),
        p_clause: column(f.p_clause),
        p_gate: column(f.p_gate),
        prediction,
        decoded,
    })
}

/// Bucket of a gold answer: number, date or span (multi-span included).
pub fn bucket_of(gold: &AnswerSpec) -> &'static str {
    match gold {
        AnswerSpec::Number { .. } => "number",
        AnswerSpec::Date { .. } => "date",
        AnswerSpec::Spans(_) => "span",
    }
}

pub const BUCKETS: [&str; 3] = ["number", "date", "span"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub query_id: String,
    pub bucket: String,
    pub predicted_type: String,
    pub answer: Vec<String>,
    pub em: f64,
    pub f1: f64,
    pub decoded: DecodedAnswer,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub name: String,
    pub count: usize,
    /// Percentages.
    pub em: f64,
    pub f1: f64,
}

/// Precision, recall and F1 in percent, with the raw confusion counts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

/// Micro-averaged detector metrics; a probability at or above `threshold`
/// predicts evidence. No positive predictions means precision 0.
pub fn detector_metrics(pairs: impl IntoIterator<Item = (f64, bool)>, threshold: f64) -> DetectorMetrics {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, label) in pairs {
        match (p >= threshold, label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    DetectorMetrics {
        precision: precision * 100.0,
        recall: recall * 100.0,
        f1: f1 * 100.0,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub em: f64,
    pub f1: f64,
    pub buckets: Vec<BucketMetrics>,
    pub sentence: DetectorMetrics,
    pub clause: DetectorMetrics,
    pub akr_sentence: f64,
    pub akr_clause: f64,
    pub threshold: f64,
    pub records: Vec<InstanceRecord>,
}

impl EvalReport {
    pub fn bucket(&self, name: &str) -> Option<&BucketMetrics> {
        self.buckets.iter().find(|b| b.name == name)
    }

    /// Human-readable answer-type and evidence tables.
    pub fn table(&self, per_type: bool) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<10} {:>6} {:>7} {:>7}\n", "type", "count", "EM", "F1"));
        if per_type {
            for b in &self.buckets {
                out.push_str(&format!("{:<10} {:>6} {:>7.2} {:>7.2}\n", b.name, b.count, b.em, b.f1));
            }
        }
        out.push_str(&format!("{:<10} {:>6} {:>7.2} {:>7.2}\n\n", "overall", self.count, self.em, self.f1));
        out.push_str(&format!("evidence @ {:.2}  {:>7} {:>7} {:>7} {:>7}\n", self.threshold, "P", "R", "F1", "AKR"));
        for (name, m, akr) in [("sentence", &self.sentence, self.akr_sentence), ("clause", &self.clause, self.akr_clause)] {
            out.push_str(&format!("{:<15} {:>7.2} {:>7.2} {:>7.2} {:>7.2}\n", name, m.precision, m.recall, m.f1, akr));
        }
        out
    }
}

/// Score precomputed inferences against their examples.
pub fn score(examples: &[Example], inferences: &[Inference], threshold: f64) -> EvalReport {
    let mut records = Vec::with_capacity(examples.len());
    for (ex, inf) in examples.iter().zip(inferences) {
        let golds: Vec<Vec<String>> = ex.qa.golds().map(AnswerSpec::strings).collect();
        let (em, f1) = em_f1_max(&inf.decoded.strings, golds.iter().map(Vec::as_slice));
        records.push(InstanceRecord {
            query_id: ex.qa.query_id.clone(),
            bucket: bucket_of(&ex.qa.gold).to_string(),
            predicted_type: inf.decoded.answer_type.name().to_string(),
            answer: inf.decoded.strings.clone(),
            em,
            f1,
            decoded: inf.decoded.clone(),
        });
    }
    let mean = |rs: &[&InstanceRecord], f: fn(&InstanceRecord) -> f64| {
        if rs.is_empty() { 0.0 } else { rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64 * 100.0 }
    };
    let all: Vec<&InstanceRecord> = records.iter().collect();
    let buckets = BUCKETS
        .iter()
        .map(|&name| {
            let rs: Vec<&InstanceRecord> = records.iter().filter(|r| r.bucket == name).collect();
            BucketMetrics { name: name.to_string(), count: rs.len(), em: mean(&rs, |r| r.em), f1: mean(&rs, |r| r.f1) }
        })
        .collect();
    let labels: Vec<EvidenceLabels> = examples.iter().map(|e| e.supervision.labels.clone()).collect();
    let pairs = |get: fn(&Inference) -> &Vec<f64>, lab: fn(&EvidenceLabels) -> &Vec<bool>| {
        inferences
            .iter()
            .zip(&labels)
            .flat_map(move |(i, l)| get(i).iter().copied().zip(lab(l).iter().copied()))
            .collect::<Vec<_>>()
    };
    let sentence = detector_metrics(pairs(|i| &i.p_sentence, |l| &l.sentence_labels), threshold);
    let clause = detector_metrics(pairs(|i| &i.p_clause, |l| &l.clause_labels), threshold);
    let (akr_sentence, akr_clause) = compute_akr(&labels);
    EvalReport {
        count: records.len(),
        em: mean(&all, |r| r.em),
        f1: mean(&all, |r| r.f1),
        buckets,
        sentence,
        clause,
        akr_sentence,
        akr_clause,
        threshold,
        records,
    }
}

/// Full inference over `examples` (in parallel) and scoring.
pub fn evaluate(
    cfg: &ModelConfig,
    store: &ParameterStore<f32>,
    examples: &[Example],
    threshold: f64,
) -> Result<EvalReport, ModelError> {
    let inferences: Vec<Inference> = examples.par_iter().map(|ex| infer(cfg, store, ex)).collect::<Result<_, _>>()?;
    Ok(score(examples, &inferences, threshold))
}
