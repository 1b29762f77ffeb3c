//! Answer-type classifier, the five answer heads and answer decoding.

use serde::{Deserialize, Serialize};

use crate::corpus::{format_number, span_text, Document, QAInstance};
use crate::encoder::Layout;
use crate::evaluation::normalize_answer;
use crate::evidence::{summarize, summarize_spec};
use crate::nn::{ffn, ffn_spec, linear, linear_spec, ParamSpec};
use crate::numerics::{Matrix, NumericsError, ParameterStore, Real, Tape, Var};
use crate::supervision::{AnswerType, Bio};

pub const MAX_SPAN_LEN: usize = 20;
pub const COUNT_CLASSES: usize = 10;

/// How the evidence weights `(p, p, 1 - p)` enter the sign logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignGating {
    /// Elementwise product with the raw logits.
    #[default]
    Multiply,
    /// Add the log of the weights (a soft mask).
    LogMask,
}

impl std::str::FromStr for SignGating {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "multiply" => Ok(SignGating::Multiply),
            "logmask" => Ok(SignGating::LogMask),
            _ => Err(format!("unknown sign gating `{s}` (expected multiply or logmask)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Question,
    Passage,
}

impl Side {
    fn name(self) -> &'static str {
        match self {
            Side::Question => "question",
            Side::Passage => "passage",
        }
    }

    pub fn range(self, layout: &Layout) -> std::ops::Range<usize> {
        match self {
            Side::Question => layout.question.clone(),
            Side::Passage => layout.passage.clone(),
        }
    }

    pub fn mask(self, layout: &Layout) -> Vec<bool> {
        let r = self.range(layout);
        (0..layout.len).map(|i| r.contains(&i)).collect()
    }
}

/// Start and end logits (each 1×L, already gated) for one side.
#[derive(Clone, Copy, Debug)]
pub struct SpanLogits {
    pub start: Var,
    pub end: Var,
}

/// Raw head outputs on the tape. Probabilities are softmaxes of these.
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    /// 1×5 in `AnswerType::ALL` order.
    pub type_logits: Var,
    /// `None` when the side has no tokens.
    pub question_span: Option<SpanLogits>,
    pub passage_span: Option<SpanLogits>,
    /// N×3 in (plus, minus, zero) order; `None` without numbers.
    pub sign_logits: Option<Var>,
    /// 1×10.
    pub count_logits: Var,
    /// L×3 in (B, I, O) order.
    pub bio_logits: Var,
}

pub fn predictor_spec(spec: &mut ParamSpec, d: usize) {
    summarize_spec(spec, "pred.question_pool", d);
    summarize_spec(spec, "pred.passage_pool", d);
    ffn_spec(spec, "pred.type", 2 * d, d, AnswerType::ALL.len());
    linear_spec(spec, "pred.question_attn", d, 1);
    for side in ["question", "passage"] {
        for end in ["start", "end"] {
            ffn_spec(spec, &format!("pred.{side}_{end}"), 2 * d, d, 1);
        }
    }
    ffn_spec(spec, "pred.sign", 3 * d, d, 3);
    summarize_spec(spec, "pred.count_pool", d);
    ffn_spec(spec, "pred.count", 3 * d, d, COUNT_CLASSES);
    ffn_spec(spec, "pred.bio", d, d, 3);
}

fn pool_range<T: Real>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    name: &str,
    h: Var,
    range: std::ops::Range<usize>,
) -> Result<Var, NumericsError> {
    if range.is_empty() {
        let d = tape.value(h).cols();
        return Ok(tape.constant(Matrix::zeros(1, d)));
    }
    let rows = tape.gather_rows(h, range.collect())?;
    summarize(tape, store, name, rows)
}

/// Pooled question and passage vectors `h^Q`, `h^P`.
pub fn pooled<T: Real>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    h: Var,
    layout: &Layout,
) -> Result<(Var, Var), NumericsError> {
    let hq = pool_range(tape, store, "pred.question_pool", h, layout.question.clone())?;
    let hp = pool_range(tape, store, "pred.passage_pool", h, layout.passage.clone())?;
    Ok((hq, hp))
}

pub fn predict_type<T: Real>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    h_q: Var,
    h_p: Var,
) -> Result<Var, NumericsError> {
    let m = tape.concat_cols(&[h_q, h_p])?;
    ffn(tape, store, "pred.type", m)
}

/// Attention-pooled question vector `g^Q`.
pub fn question_vector<T: Real>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    h: Var,
    layout: &Layout,
) -> Result<Var, NumericsError> {
    if layout.question.is_empty() {
        let d = tape.value(h).cols();
        return Ok(tape.constant(Matrix::zeros(1, d)));
    }
    let hq = tape.gather_rows(h, layout.question.clone().collect())?;
    let scores = linear(tape, store, "pred.question_attn", hq)?;
    let alpha = tape.softmax_columns(scores)?;
    tape.weighted_sum(alpha, hq)
}

/// Gated start/end logits over the whole sequence for one side.
pub fn predict_span<T: Real>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    h: Var,
    g_q: Var,
    p_seq: Var,
    side: Side,
) -> Result<SpanLogits, NumericsError> {
    let hg = tape.mul(h, g_q)?;
    let m = tape.concat_cols(&[h, hg])?;
    let mut out = [m; 2];
    for (slot, end) in out.iter_mut().zip(["start", "end"]) {
        let logits = ffn(tape, store, &format!("pred.{}_{end}", side.name()), m)?;
        let gated = tape.mul(logits, p_seq)?;
        *slot = tape.transpose(gated)?;
    }
    Ok(SpanLogits { start: out[0], end: out[1] })
}

/// Sign logits (N×3, plus/minus/zero) for the numbers at `positions`.
#[allow(clippy::too_many_arguments)]
pub fn predict_signs<T: Real>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    h: Var,
    positions: &[usize],
    h_p: Var,
    h_q: Var,
    p_seq: Var,
    gating: SignGating,
) -> Result<Var, NumericsError> {
    let n = positions.len();
    let u = tape.gather_rows(h, positions.to_vec())?;
    let hp = tape.gather_rows(h_p, vec![0; n])?;
    let hq = tape.gather_rows(h_q, vec![0; n])?;
    let m = tape.concat_cols(&[u, hp, hq])?;
    let logits = ffn(tape, store, "pred.sign", m)?;
    let p = tape.gather_rows(p_seq, positions.to_vec())?;
    let q = tape.affine(p, -1.0, 1.0)?;
    let w = tape.concat_cols(&[p, p, q])?;
    gate_signs(tape, logits, w, gating)
}

pub fn gate_signs<T: Real>(tape: &mut Tape<T>, logits: Var, w: Var, gating: SignGating) -> Result<Var, NumericsError> {
    match gating {
        SignGating::Multiply => tape.mul(logits, w),
        SignGating::LogMask => {
            let lw = tape.log_clamped(w, 1e-7)?;
            tape.add(logits, lw)
        }
    }
}

/// Count logits (1×10); `u` holds the number rows, if any.
pub fn predict_count<T: Real>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    u: Option<Var>,
    h_p: Var,
    h_q: Var,
) -> Result<Var, NumericsError> {
    let h_u = match u {
        Some(u) => summarize(tape, store, "pred.count_pool", u)?,
        None => {
            let d = tape.value(h_p).cols();
            tape.constant(Matrix::zeros(1, d))
        }
    };
    let m = tape.concat_cols(&[h_u, h_p, h_q])?;
    ffn(tape, store, "pred.count", m)
}

/// Per-token BIO logits (L×3).
pub fn predict_multispan<T: Real>(tape: &mut Tape<T>, store: &ParameterStore<T>, h: Var) -> Result<Var, NumericsError> {
    ffn(tape, store, "pred.bio", h)
}

/// Every head on top of the reasoning output `h` (L×d).
pub fn run_heads<T: Real>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    h: Var,
    p_seq: Var,
    layout: &Layout,
    number_positions: &[usize],
    gating: SignGating,
) -> Result<HeadOutputs, NumericsError> {
    let (h_q, h_p) = pooled(tape, store, h, layout)?;
    let type_logits = predict_type(tape, store, h_q, h_p)?;
    let g_q = question_vector(tape, store, h, layout)?;
    let mut spans = [None, None];
    for (slot, side) in spans.iter_mut().zip([Side::Question, Side::Passage]) {
        if !side.range(layout).is_empty() {
            *slot = Some(predict_span(tape, store, h, g_q, p_seq, side)?);
        }
    }
    let (sign_logits, u) = if number_positions.is_empty() {
        (None, None)
    } else {
        let s = predict_signs(tape, store, h, number_positions, h_p, h_q, p_seq, gating)?;
        (Some(s), Some(tape.gather_rows(h, number_positions.to_vec())?))
    };
    let count_logits = predict_count(tape, store, u, h_p, h_q)?;
    let bio_logits = predict_multispan(tape, store, h)?;
    Ok(HeadOutputs {
        type_logits,
        question_span: spans[0],
        passage_span: spans[1],
        sign_logits,
        count_logits,
        bio_logits,
    })
}

fn softmax(logits: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let on = |i: usize| mask.is_none_or(|m| m[i]);
    let max = (0..logits.len()).filter(|&i| on(i)).map(|i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = (0..logits.len()).map(|i| if on(i) { (logits[i] - max).exp() } else { 0.0 }).collect();
    let z: f64 = out.iter().sum();
    if z > 0.0 {
        out.iter_mut().for_each(|p| *p /= z);
    }
    out
}

fn row_values<T: Real>(tape: &Tape<T>, v: Var) -> Vec<Vec<f64>> {
    let m = tape.value(v);
    (0..m.rows()).map(|r| m.row(r).iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()).collect()
}

/// Start and end distributions of one side, zero outside it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpanProbs {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

/// Head probabilities as plain values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub type_probs: Vec<f64>,
    pub question_span: Option<SpanProbs>,
    pub passage_span: Option<SpanProbs>,
    /// Per number, (plus, minus, zero).
    pub sign_probs: Vec<[f64; 3]>,
    pub count_probs: Vec<f64>,
    /// Per sequence position, (B, I, O).
    pub bio_probs: Vec<[f64; 3]>,
}

impl PredictionResult {
    pub fn read<T: Real>(tape: &Tape<T>, heads: &HeadOutputs, layout: &Layout) -> Self {
        let first = |v: Var| row_values(tape, v).remove(0);
        let span = |s: Option<SpanLogits>, side: Side| {
            s.map(|s| {
                let mask = side.mask(layout);
                SpanProbs { start: softmax(&first(s.start), Some(&mask)), end: softmax(&first(s.end), Some(&mask)) }
            })
        };
        let triple = |r: Vec<f64>| {
            let p = softmax(&r, None);
            [p[0], p[1], p[2]]
        };
        Self {
            type_probs: softmax(&first(heads.type_logits), None),
            question_span: span(heads.question_span, Side::Question),
            passage_span: span(heads.passage_span, Side::Passage),
            sign_probs: heads.sign_logits.map(|s| row_values(tape, s).into_iter().map(triple).collect()).unwrap_or_default(),
            count_probs: softmax(&first(heads.count_logits), None),
            bio_probs: row_values(tape, heads.bio_logits).into_iter().map(triple).collect(),
        }
    }
}

/// Final answer with the head-specific argmax details behind it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedAnswer {
    pub answer_type: AnswerType,
    pub strings: Vec<String>,
    /// Inclusive sequence positions.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub span: Option<(usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub signs: Option<Vec<i8>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    /// Passage-local inclusive spans.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bio_spans: Option<Vec<(usize, usize)>>,
}

impl DecodedAnswer {
    fn new(answer_type: AnswerType, strings: Vec<String>) -> Self {
        Self { answer_type, strings, span: None, signs: None, count: None, bio_spans: None }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Best `(start, end)` in `range` with `start <= end < start + MAX_SPAN_LEN`.
pub fn best_span(probs: &SpanProbs, range: std::ops::Range<usize>) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), f64)> = None;
    for s in range.clone() {
        for e in s..range.end.min(s + MAX_SPAN_LEN) {
            let score = probs.start[s] * probs.end[e];
            if best.is_none_or(|(_, b)| score > b) {
                best = Some(((s, e), score));
            }
        }
    }
    best.map(|(span, _)| span)
}

/// Greedy BIO decode into inclusive spans. `I` with no open span opens one.
pub fn greedy_bio(tags: &[Bio]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut open: Option<usize> = None;
    for (i, tag) in tags.iter().enumerate() {
        match tag {
            Bio::B => {
                if let Some(s) = open {
                    spans.push((s, i - 1));
                }
                open = Some(i);
            }
            Bio::I => {
                if open.is_none() {
                    open = Some(i);
                }
            }
            Bio::O => {
                if let Some(s) = open.take() {
                    spans.push((s, i - 1));
                }
            }
        }
    }
    if let Some(s) = open {
        spans.push((s, tags.len() - 1));
    }
    spans
}

fn decode_as(
    t: AnswerType,
    pred: &PredictionResult,
    doc: &Document,
    qa: &QAInstance,
    layout: &Layout,
    numbers: &[f64],
) -> Option<DecodedAnswer> {
    match t {
        AnswerType::QuestionSpan | AnswerType::PassageSpan => {
            let (side, probs) = if t == AnswerType::QuestionSpan {
                (Side::Question, pred.question_span.as_ref()?)
            } else {
                (Side::Passage, pred.passage_span.as_ref()?)
            };
            let range = side.range(layout);
            let (s, e) = best_span(probs, range.clone())?;
            let text = match side {
                Side::Question => span_text(&qa.question, &qa.question_tokens, s - range.start, e - range.start + 1),
                Side::Passage => doc.span_text(s - range.start, e - range.start + 1),
            };
            let mut d = DecodedAnswer::new(t, vec![text.to_string()]);
            d.span = Some((s, e));
            Some(d)
        }
        AnswerType::Arithmetic => {
            let signs: Vec<i8> = pred
                .sign_probs
                .iter()
                .map(|p| match argmax(p) {
                    0 => 1,
                    1 => -1,
                    _ => 0,
                })
                .collect();
            if signs.iter().all(|&s| s == 0) {
                return None;
            }
            let value: f64 = signs.iter().zip(numbers).map(|(&s, &v)| f64::from(s) * v).sum();
            let mut d = DecodedAnswer::new(t, vec![format_number(value)]);
            d.signs = Some(signs);
            Some(d)
        }
        AnswerType::Count => {
            let c = argmax(&pred.count_probs);
            let mut d = DecodedAnswer::new(t, vec![c.to_string()]);
            d.count = Some(c);
            Some(d)
        }
        AnswerType::MultiSpan => {
            let tags: Vec<Bio> = pred.bio_probs[layout.passage.clone()]
                .iter()
                .map(|p| match argmax(p) {
                    0 => Bio::B,
                    1 => Bio::I,
                    _ => Bio::O,
                })
                .collect();
            let spans = greedy_bio(&tags);
            let mut seen = Vec::new();
            let mut strings = Vec::new();
            for &(s, e) in &spans {
                let text = doc.span_text(s, e + 1).to_string();
                let key = normalize_answer(&text);
                if !seen.contains(&key) {
                    seen.push(key);
                    strings.push(text);
                }
            }
            if strings.is_empty() {
                return None;
            }
            let mut d = DecodedAnswer::new(t, strings);
            d.bio_spans = Some(spans);
            Some(d)
        }
    }
}

/// Decode under the most probable type, falling back through the others in
/// probability order and finally to the passage span head.
pub fn decode_answer(
    pred: &PredictionResult,
    doc: &Document,
    qa: &QAInstance,
    layout: &Layout,
    numbers: &[f64],
) -> DecodedAnswer {
    let mut order: Vec<usize> = (0..AnswerType::ALL.len()).collect();
    order.sort_by(|&a, &b| pred.type_probs[b].total_cmp(&pred.type_probs[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .find_map(|i| decode_as(AnswerType::ALL[i], pred, doc, qa, layout, numbers))
        .or_else(|| decode_as(AnswerType::PassageSpan, pred, doc, qa, layout, numbers))
        .unwrap_or_else(|| DecodedAnswer::new(AnswerType::PassageSpan, vec![String::new()]))
}
