//! Evidence loss, marginal answer likelihood and their weighted total.

use crate::encoder::Layout;
use crate::nn::repeat_scalar;
use crate::numerics::{Matrix, NumericsError, Real, Tape, Var};
use crate::predictors::{HeadOutputs, Side, SpanLogits};
use crate::supervision::{AnswerAnnotations, AnswerType};

/// Mean binary cross-entropy of probabilities `p` (K×1) against labels;
/// `None` for an empty level.
pub fn evidence_loss<T: Real>(tape: &mut Tape<T>, p: Var, labels: &[bool]) -> Result<Option<Var>, NumericsError> {
    if labels.is_empty() {
        return Ok(None);
    }
    let targets = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
    tape.cross_entropy(p, targets).map(Some)
}

fn sub<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var, NumericsError> {
    let nb = tape.affine(b, -1.0, 0.0)?;
    tape.add(a, nb)
}

/// Log-probabilities (k×1) of each inclusive span, local to `side`, under
/// one side's start/end heads, plus `offset` (1×1).
fn span_terms<T: Real>(
    tape: &mut Tape<T>,
    logits: SpanLogits,
    side: Side,
    layout: &Layout,
    spans: &[(usize, usize)],
    offset: Var,
) -> Result<Var, NumericsError> {
    let base = side.range(layout).start;
    let mask = side.mask(layout);
    let lse_s = tape.logsumexp(logits.start, Some(mask.clone()))?;
    let lse_e = tape.logsumexp(logits.end, Some(mask))?;
    let norm = tape.add(lse_s, lse_e)?;
    let c = sub(tape, offset, norm)?;
    let starts = tape.pick(logits.start, spans.iter().map(|&(s, _)| (0, base + s)).collect())?;
    let ends = tape.pick(logits.end, spans.iter().map(|&(_, e)| (0, base + e)).collect())?;
    let both = tape.add(starts, ends)?;
    let c = repeat_scalar(tape, c, spans.len())?;
    tape.add(both, c)
}

fn sign_class(s: i8) -> usize {
    match s {
        1 => 0,
        -1 => 1,
        _ => 2,
    }
}

/// Every log-term `log P_z(a) + log P(z)` of the marginal, one per
/// annotation of every feasible type, as a column.
pub fn marginal_terms<T: Real>(
    tape: &mut Tape<T>,
    heads: &HeadOutputs,
    ann: &AnswerAnnotations,
    layout: &Layout,
) -> Result<Option<Var>, NumericsError> {
    if !ann.is_trainable() {
        return Ok(None);
    }
    let type_lse = tape.logsumexp(heads.type_logits, None)?;
    let mut terms = Vec::new();
    for &t in &ann.feasible_types {
        let picked = tape.pick(heads.type_logits, vec![(0, t.index())])?;
        let log_type = sub(tape, picked, type_lse)?;
        let term = match t {
            AnswerType::QuestionSpan | AnswerType::PassageSpan => {
                let (side, logits, spans) = if t == AnswerType::QuestionSpan {
                    (Side::Question, heads.question_span, &ann.question_spans)
                } else {
                    (Side::Passage, heads.passage_span, &ann.passage_spans)
                };
                let logits = logits.expect("span annotations imply a non-empty side");
                span_terms(tape, logits, side, layout, spans, log_type)?
            }
            AnswerType::Arithmetic => {
                let signs = heads.sign_logits.expect("expressions imply numbers");
                let n = tape.value(signs).rows();
                let e = ann.expressions.len();
                let lse = tape.logsumexp(signs, None)?;
                let norm = tape.sum(lse)?;
                let entries = ann
                    .expressions
                    .iter()
                    .flat_map(|a| a.signs.iter().enumerate().map(|(i, &s)| (i, sign_class(s))))
                    .collect();
                let picked = tape.pick(signs, entries)?;
                let mut select = Matrix::zeros(e, e * n);
                for k in 0..e {
                    for i in 0..n {
                        select.set(k, k * n + i, T::one());
                    }
                }
                let select = tape.constant(select);
                let per_expr = tape.matmul(select, picked)?;
                let c = sub(tape, log_type, norm)?;
                let c = repeat_scalar(tape, c, e)?;
                tape.add(per_expr, c)?
            }
            AnswerType::Count => {
                let label = ann.count_label.expect("count feasibility implies a label");
                let picked = tape.pick(heads.count_logits, vec![(0, label)])?;
                let lse = tape.logsumexp(heads.count_logits, None)?;
                let lp = sub(tape, picked, lse)?;
                tape.add(lp, log_type)?
            }
            AnswerType::MultiSpan => {
                let tags = ann.bio_tags.as_ref().expect("multi-span feasibility implies tags");
                let base = layout.passage.start;
                let picked = tape.pick(heads.bio_logits, tags.iter().enumerate().map(|(i, b)| (base + i, b.index())).collect())?;
                let picked = tape.sum(picked)?;
                let lse = tape.logsumexp(heads.bio_logits, None)?;
                let lse = tape.pick(lse, (0..tags.len()).map(|i| (base + i, 0)).collect())?;
                let lse = tape.sum(lse)?;
                let lp = sub(tape, picked, lse)?;
                tape.add(lp, log_type)?
            }
        };
        terms.push(term);
    }
    tape.concat_rows(&terms).map(Some)
}

/// `-log Σ_z P(z) P_z(a)` summed over every annotation, in log space.
/// `None` when no answer type is feasible.
pub fn answer_marginal_loss<T: Real>(
    tape: &mut Tape<T>,
    heads: &HeadOutputs,
    ann: &AnswerAnnotations,
    layout: &Layout,
) -> Result<Option<Var>, NumericsError> {
    let Some(terms) = marginal_terms(tape, heads, ann, layout)? else {
        return Ok(None);
    };
    let row = tape.transpose(terms)?;
    let lse = tape.logsumexp(row, None)?;
    tape.affine(lse, -1.0, 0.0).map(Some)
}

/// `L_ans + λ_s L_sentence + λ_c L_clause`, skipping absent parts.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    ans: Option<Var>,
    evi_sentence: Option<Var>,
    evi_clause: Option<Var>,
    lambda_sentence: f64,
    lambda_clause: f64,
) -> Result<Var, NumericsError> {
    let mut parts = Vec::new();
    parts.extend(ans);
    if let Some(s) = evi_sentence {
        parts.push(tape.affine(s, lambda_sentence, 0.0)?);
    }
    if let Some(c) = evi_clause {
        parts.push(tape.affine(c, lambda_clause, 0.0)?);
    }
    if parts.is_empty() {
        return Ok(tape.constant(Matrix::zeros(1, 1)));
    }
    let stacked = tape.concat_rows(&parts)?;
    tape.sum(stacked)
}
