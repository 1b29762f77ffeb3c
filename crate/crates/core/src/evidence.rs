//! Fragment-level evidence detection, the token-level evidence distribution
//! and its fusion into the sequence representation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, Fragment, FragmentLevel};
use crate::encoder::Layout;
use crate::nn::{ffn, ffn_spec, layer_norm, layer_norm_spec, ones, ParamSpec};
use crate::numerics::{NumericsError, ParameterStore, Real, Tape, Var};

#[derive(Debug, Error)]
pub enum EvidenceError {
    #[error("passage token {0} lies in no fragment")]
    Uncovered(usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// How sentence and clause probabilities combine into a token probability.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combiner {
    #[default]
    Mean,
    Max,
    Product,
}

impl std::str::FromStr for Combiner {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Combiner::Mean),
            "max" => Ok(Combiner::Max),
            "product" => Ok(Combiner::Product),
            _ => Err(format!("unknown combiner `{s}` (expected mean, max or product)")),
        }
    }
}

/// Evidence probabilities as column vectors on the tape.
#[derive(Clone, Copy, Debug)]
pub struct EvidenceScores {
    pub p_sentence: Var,
    pub p_clause: Var,
    /// One entry per sequence position.
    pub p_seq: Var,
}

/// Attention pooling: `β = softmax over rows of (rows · W)` taken per
/// feature, output `Σ_i β_i ⊙ row_i`.
pub fn summarize<T: Real>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    name: &str,
    rows: Var,
) -> Result<Var, NumericsError> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let scores = tape.matmul(rows, w)?;
    let beta = tape.softmax_columns(scores)?;
    tape.weighted_sum(beta, rows)
}

pub fn summarize_spec(spec: &mut ParamSpec, name: &str, d: usize) {
    spec.push((format!("{name}.w"), vec![d, d]));
}

/// Pool each fragment's rows (passage-local spans shifted into the sequence)
/// into a K×d matrix, sharing one scoring map.
pub fn pool_fragments<T: Real>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    name: &str,
    h: Var,
    offset: usize,
    frags: &[Fragment],
) -> Result<Var, NumericsError> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let scores = tape.matmul(h, w)?;
    let mut pooled = Vec::with_capacity(frags.len());
    for f in frags {
        let idx: Vec<usize> = (offset + f.start..offset + f.end).collect();
        let rows = tape.gather_rows(h, idx.clone())?;
        let sc = tape.gather_rows(scores, idx)?;
        let beta = tape.softmax_columns(sc)?;
        pooled.push(tape.weighted_sum(beta, rows)?);
    }
    tape.concat_rows(&pooled)
}

pub fn level_name(level: FragmentLevel) -> &'static str {
    match level {
        FragmentLevel::Sentence => "sentence",
        FragmentLevel::Clause => "clause",
    }
}

/// Question summary `S^Q` used by both detectors.
pub fn question_summary<T: Real>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    h: Var,
    layout: &Layout,
) -> Result<Var, NumericsError> {
    let q = tape.gather_rows(h, layout.question.clone().collect())?;
    summarize(tape, store, "evidence.question_pool", q)
}

/// Probability (K×1) that each fragment is evidence: the positive class of
/// a two-way softmax over `FFN([S^Q; S_k; S^Q ⊙ S_k])`.
pub fn detect<T: Real>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    level: FragmentLevel,
    h: Var,
    layout: &Layout,
    frags: &[Fragment],
    s_q: Var,
) -> Result<Var, NumericsError> {
    let name = level_name(level);
    let k = frags.len();
    let s_p = pool_fragments(tape, store, &format!("evidence.{name}_pool"), h, layout.passage.start, frags)?;
    let s_q = tape.gather_rows(s_q, vec![0; k])?;
    let inter = tape.mul(s_q, s_p)?;
    let features = tape.concat_cols(&[s_q, s_p, inter])?;
    let logits = ffn(tape, store, &format!("evidence.{name}_ffn"), features)?;
    let probs = tape.softmax(logits)?;
    tape.pick(probs, (0..k).map(|i| (i, 1)).collect())
}

pub fn detector_spec(spec: &mut ParamSpec, d: usize) {
    summarize_spec(spec, "evidence.question_pool", d);
    for name in ["sentence", "clause"] {
        summarize_spec(spec, &format!("evidence.{name}_pool"), d);
        ffn_spec(spec, &format!("evidence.{name}_ffn"), 3 * d, d, 2);
    }
    layer_norm_spec(spec, "evidence.fuse_ln", d);
}

/// Token-level evidence distribution over the whole sequence: passage
/// tokens combine their sentence and clause probabilities, all other
/// positions are 1.
pub fn token_distribution<T: Real>(
    tape: &mut Tape<T>,
    p_sentence: Var,
    p_clause: Var,
    doc: &Document,
    layout: &Layout,
    combiner: Combiner,
) -> Result<Var, EvidenceError> {
    let n = doc.tokens.len();
    let sent = doc.sentence_of_token();
    let clause = doc.clause_of_token();
    if let Some(i) = (0..n).find(|&i| sent[i] == usize::MAX || clause[i] == usize::MAX) {
        return Err(EvidenceError::Uncovered(i));
    }
    let lead = ones(tape, layout.passage.start, 1);
    let tail = ones(tape, 1, 1);
    if n == 0 {
        return Ok(tape.concat_rows(&[lead, tail])?);
    }
    let ps = tape.gather_rows(p_sentence, sent)?;
    let pc = tape.gather_rows(p_clause, clause)?;
    let passage = match combiner {
        Combiner::Mean => {
            let s = tape.add(ps, pc)?;
            tape.affine(s, 0.5, 0.0)?
        }
        Combiner::Max => tape.maximum(ps, pc)?,
        Combiner::Product => tape.mul(ps, pc)?,
    };
    Ok(tape.concat_rows(&[lead, passage, tail])?)
}

/// `LN(h_i + p_i · h_i)` row by row.
pub fn fuse<T: Real>(tape: &mut Tape<T>, store: &ParameterStore<T>, h: Var, p_seq: Var) -> Result<Var, NumericsError> {
    let scale = tape.affine(p_seq, 1.0, 1.0)?;
    let x = tape.mul(h, scale)?;
    layer_norm(tape, store, "evidence.fuse_ln", x)
}
