//! Distant supervision: evidence labels and weak answer annotations derived
//! from gold answers by fixed heuristic rules, plus the keep-ratio statistic.

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, AnswerSpec, Document, Fragment, QAInstance, Token};

/// Absolute tolerance when matching a signed sum against the gold number.
pub const EXPRESSION_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_EXPRESSION_CAP: usize = 64;
pub const DEFAULT_MAX_TERMS: usize = 3;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceLabels {
    pub sentence_labels: Vec<bool>,
    pub clause_labels: Vec<bool>,
}

impl EvidenceLabels {
    pub fn is_unmatched(&self) -> bool {
        !self.sentence_labels.iter().chain(&self.clause_labels).any(|&l| l)
    }
}

/// One signed expression over all numbers of an instance (question numbers
/// first, then passage numbers). Entries are +1, -1 or 0.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignAssignment {
    pub signs: Vec<i8>,
}

impl SignAssignment {
    /// Nonzero `(index, sign)` pairs in index order.
    pub fn terms(&self) -> Vec<(usize, i8)> {
        self.signs.iter().enumerate().filter(|(_, &s)| s != 0).map(|(i, &s)| (i, s)).collect()
    }

    pub fn evaluate(&self, numbers: &[f64]) -> f64 {
        self.signs.iter().zip(numbers).map(|(&s, &v)| f64::from(s) * v).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Expressions {
    pub list: Vec<SignAssignment>,
    /// More solutions existed than the cap allowed.
    pub truncated: bool,
}

/// All sign assignments with `1..=max_terms` nonzero entries whose signed
/// sum hits `target`, ordered by index tuple then sign tuple (plus before
/// minus), keeping at most `cap`.
pub fn enumerate_expressions(numbers: &[f64], target: f64, max_terms: usize, cap: usize) -> Expressions {
    let n = numbers.len();
    let mut found: Vec<(Vec<usize>, Vec<i8>)> = Vec::new();
    let mut idx = Vec::with_capacity(max_terms);
    let mut sgn = Vec::with_capacity(max_terms);
    #[allow(clippy::too_many_arguments)]
    fn rec(
        numbers: &[f64],
        target: f64,
        max_terms: usize,
        from: usize,
        sum: f64,
        idx: &mut Vec<usize>,
        sgn: &mut Vec<i8>,
        found: &mut Vec<(Vec<usize>, Vec<i8>)>,
    ) {
        if idx.len() == max_terms {
            return;
        }
        for i in from..numbers.len() {
            for s in [1i8, -1] {
                let next = sum + f64::from(s) * numbers[i];
                idx.push(i);
                sgn.push(s);
                if (next - target).abs() <= EXPRESSION_TOLERANCE {
                    found.push((idx.clone(), sgn.clone()));
                }
                rec(numbers, target, max_terms, i + 1, next, idx, sgn, found);
                idx.pop();
                sgn.pop();
            }
        }
    }
    rec(numbers, target, max_terms, 0, 0.0, &mut idx, &mut sgn, &mut found);
    // sign order key: + sorts before -
    found.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| b.1.cmp(&a.1)));
    let truncated = found.len() > cap;
    found.truncate(cap);
    let list = found
        .into_iter()
        .map(|(idx, sgn)| {
            let mut signs = vec![0i8; n];
            for (i, s) in idx.into_iter().zip(sgn) {
                signs[i] = s;
            }
            SignAssignment { signs }
        })
        .collect();
    Expressions { list, truncated }
}

/// Values of every number in an instance, question numbers first.
pub fn instance_numbers(doc: &Document, qa: &QAInstance) -> Vec<f64> {
    qa.question_numbers.iter().chain(&doc.numbers).map(|n| n.value).collect()
}

const STOP_WORDS: &[&str] = &[
    "how", "many", "much", "what", "which", "who", "whom", "whose", "when", "where", "why", "did", "does", "do",
    "is", "was", "were", "are", "be", "been", "had", "has", "have", "the", "a", "an", "of", "in", "on", "at",
    "to", "for", "from", "by", "with", "and", "or", "than", "more", "less", "fewer", "between", "after",
    "before", "there", "it", "its", "as",
];

fn is_stop_word(s: &str) -> bool {
    STOP_WORDS.contains(&s.to_lowercase().as_str())
}

fn is_capitalized(s: &str) -> bool {
    s.chars().next().is_some_and(char::is_uppercase)
}

/// Maximal runs of capitalized, non-stop-word question tokens, lowercased.
pub fn topic_entities(question_tokens: &[Token]) -> Vec<Vec<String>> {
    let mut runs = Vec::new();
    let mut cur: Vec<String> = Vec::new();
    for t in question_tokens {
        if is_capitalized(&t.surface) && !is_stop_word(&t.surface) {
            cur.push(t.surface.to_lowercase());
        } else if !cur.is_empty() {
            runs.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        runs.push(cur);
    }
    runs
}

fn lower_surfaces(tokens: &[Token]) -> Vec<String> {
    tokens.iter().map(|t| t.surface.to_lowercase()).collect()
}

/// Start positions of every occurrence of `needle` in `hay`.
fn occurrences(hay: &[String], needle: &[String]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return Vec::new();
    }
    (0..=hay.len() - needle.len()).filter(|&i| hay[i..i + needle.len()] == *needle).collect()
}

/// Strings whose occurrences mark evidence and span targets for an answer.
/// Dates use their joined form when it occurs, else their parts.
fn answer_strings(doc_lower: &[String], gold: &AnswerSpec) -> Vec<String> {
    match gold {
        AnswerSpec::Spans(s) => s.clone(),
        AnswerSpec::Number { .. } => Vec::new(),
        AnswerSpec::Date { day, month, year } => {
            let joined = gold.strings().remove(0);
            if !occurrences(doc_lower, &lower_surfaces(&tokenize(&joined))).is_empty() {
                vec![joined]
            } else {
                [day, month, year].into_iter().filter(|s| !s.is_empty()).cloned().collect()
            }
        }
    }
}

fn mark_spans(frags: &[Fragment], spans: &[(usize, usize)]) -> Vec<bool> {
    frags.iter().map(|f| spans.iter().any(|&(s, e)| f.start <= s && e <= f.end)).collect()
}

/// Evidence labels for one instance under the distant-supervision rules.
///
/// A fragment is evidence when it contains a gold answer string, a question
/// topic entity, or a passage number used by some expression that yields the
/// gold number. Sentences are additionally marked when any of their clauses is.
pub fn label_evidence(doc: &Document, qa: &QAInstance) -> EvidenceLabels {
    let expressions = match &qa.gold {
        AnswerSpec::Number { value, .. } => {
            enumerate_expressions(&instance_numbers(doc, qa), *value, DEFAULT_MAX_TERMS, DEFAULT_EXPRESSION_CAP).list
        }
        _ => Vec::new(),
    };
    label_with_expressions(doc, qa, &expressions)
}

fn label_with_expressions(doc: &Document, qa: &QAInstance, expressions: &[SignAssignment]) -> EvidenceLabels {
    let passage = lower_surfaces(&doc.tokens);
    // token spans [s, e) that force a label on their containing fragments
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut needles: Vec<Vec<String>> = topic_entities(&qa.question_tokens);
    for s in answer_strings(&passage, &qa.gold) {
        needles.push(lower_surfaces(&tokenize(&s)));
    }
    for needle in &needles {
        for start in occurrences(&passage, needle) {
            spans.push((start, start + needle.len()));
        }
    }
    let offset = qa.question_numbers.len();
    for e in expressions {
        for (i, _) in e.terms() {
            if i >= offset {
                let t = doc.numbers[i - offset].token_index;
                spans.push((t, t + 1));
            }
        }
    }
    let clause_labels = mark_spans(&doc.clauses, &spans);
    let mut sentence_labels = mark_spans(&doc.sentences, &spans);
    for (c, &l) in doc.clauses.iter().zip(&clause_labels) {
        if l {
            if let Some(p) = c.parent_sentence {
                sentence_labels[p] = true;
            }
        }
    }
    EvidenceLabels { sentence_labels, clause_labels }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnswerType {
    QuestionSpan,
    PassageSpan,
    Arithmetic,
    Count,
    MultiSpan,
}

impl AnswerType {
    pub const ALL: [AnswerType; 5] =
        [AnswerType::QuestionSpan, AnswerType::PassageSpan, AnswerType::Arithmetic, AnswerType::Count, AnswerType::MultiSpan];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            AnswerType::QuestionSpan => "question_span",
            AnswerType::PassageSpan => "passage_span",
            AnswerType::Arithmetic => "arithmetic",
            AnswerType::Count => "count",
            AnswerType::MultiSpan => "multi_span",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bio {
    B,
    I,
    O,
}

impl Bio {
    pub fn index(self) -> usize {
        match self {
            Bio::B => 0,
            Bio::I => 1,
            Bio::O => 2,
        }
    }
}

/// Every annotation consistent with the gold answer. Span positions are
/// inclusive `(start, end)` token indices local to their side.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnswerAnnotations {
    pub feasible_types: Vec<AnswerType>,
    pub question_spans: Vec<(usize, usize)>,
    pub passage_spans: Vec<(usize, usize)>,
    pub expressions: Vec<SignAssignment>,
    pub expressions_truncated: bool,
    pub count_label: Option<usize>,
    /// Over passage tokens; present iff multi-span is feasible.
    pub bio_tags: Option<Vec<Bio>>,
}

impl AnswerAnnotations {
    pub fn is_trainable(&self) -> bool {
        !self.feasible_types.is_empty()
    }

    pub fn is_feasible(&self, t: AnswerType) -> bool {
        self.feasible_types.contains(&t)
    }
}

fn inclusive_spans(hay: &[String], needle: &[String]) -> Vec<(usize, usize)> {
    occurrences(hay, needle).into_iter().map(|s| (s, s + needle.len() - 1)).collect()
}

fn bio_over(n: usize, spans: &[(usize, usize)]) -> Vec<Bio> {
    let mut tags = vec![Bio::O; n];
    let mut sorted = spans.to_vec();
    sorted.sort();
    for (s, e) in sorted {
        if tags[s..=e].iter().any(|&t| t != Bio::O) {
            continue;
        }
        tags[s] = Bio::B;
        for t in &mut tags[s + 1..=e] {
            *t = Bio::I;
        }
    }
    tags
}

pub fn build_annotations(doc: &Document, qa: &QAInstance) -> AnswerAnnotations {
    build_annotations_with(doc, qa, DEFAULT_MAX_TERMS, DEFAULT_EXPRESSION_CAP)
}

/// `build_annotations` with explicit expression limits.
pub fn build_annotations_with(doc: &Document, qa: &QAInstance, max_terms: usize, cap: usize) -> AnswerAnnotations {
    let passage = lower_surfaces(&doc.tokens);
    let question = lower_surfaces(&qa.question_tokens);
    let mut ann = AnswerAnnotations::default();
    let mut feasible = Vec::new();
    let single_span = |ann: &mut AnswerAnnotations, feasible: &mut Vec<AnswerType>, s: &str| {
        let needle = lower_surfaces(&tokenize(s));
        ann.passage_spans = inclusive_spans(&passage, &needle);
        ann.question_spans = inclusive_spans(&question, &needle);
        if !ann.question_spans.is_empty() {
            feasible.push(AnswerType::QuestionSpan);
        }
        if !ann.passage_spans.is_empty() {
            feasible.push(AnswerType::PassageSpan);
        }
    };
    let multi_span = |ann: &mut AnswerAnnotations, feasible: &mut Vec<AnswerType>, strings: &[String]| {
        let mut all = Vec::new();
        for s in strings {
            let found = inclusive_spans(&passage, &lower_surfaces(&tokenize(s)));
            if found.is_empty() {
                return;
            }
            all.extend(found);
        }
        ann.bio_tags = Some(bio_over(passage.len(), &all));
        feasible.push(AnswerType::MultiSpan);
    };
    match &qa.gold {
        AnswerSpec::Spans(spans) if spans.len() == 1 => single_span(&mut ann, &mut feasible, &spans[0]),
        AnswerSpec::Spans(spans) => multi_span(&mut ann, &mut feasible, spans),
        AnswerSpec::Number { value, text } => {
            let ex = enumerate_expressions(&instance_numbers(doc, qa), *value, max_terms, cap);
            if !ex.list.is_empty() {
                feasible.push(AnswerType::Arithmetic);
            }
            ann.expressions = ex.list;
            ann.expressions_truncated = ex.truncated;
            if value.fract() == 0.0 && (0.0..=9.0).contains(value) {
                ann.count_label = Some(*value as usize);
                feasible.push(AnswerType::Count);
            }
            ann.passage_spans = inclusive_spans(&passage, &lower_surfaces(&tokenize(text)));
            if !ann.passage_spans.is_empty() {
                feasible.push(AnswerType::PassageSpan);
            }
        }
        AnswerSpec::Date { .. } => {
            let strings = answer_strings(&passage, &qa.gold);
            if strings.len() == 1 {
                single_span(&mut ann, &mut feasible, &strings[0]);
            } else if !strings.is_empty() {
                multi_span(&mut ann, &mut feasible, &strings);
            }
        }
    }
    feasible.sort();
    ann.feasible_types = feasible;
    ann
}

/// Labels and annotations for one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisionBundle {
    pub labels: EvidenceLabels,
    pub annotations: AnswerAnnotations,
}

pub fn supervise(doc: &Document, qa: &QAInstance) -> SupervisionBundle {
    supervise_with(doc, qa, DEFAULT_MAX_TERMS, DEFAULT_EXPRESSION_CAP)
}

pub fn supervise_with(doc: &Document, qa: &QAInstance, max_terms: usize, cap: usize) -> SupervisionBundle {
    let annotations = build_annotations_with(doc, qa, max_terms, cap);
    let labels = label_with_expressions(doc, qa, &annotations.expressions);
    SupervisionBundle { labels, annotations }
}

/// Mean percentage of fragments labeled evidence, per level. Instances with
/// no fragments at a level are skipped for that level.
pub fn compute_akr(labels: &[EvidenceLabels]) -> (f64, f64) {
    let ratio = |get: &dyn Fn(&EvidenceLabels) -> &Vec<bool>| {
        let kept: Vec<f64> = labels
            .iter()
            .map(get)
            .filter(|v| !v.is_empty())
            .map(|v| v.iter().filter(|&&l| l).count() as f64 / v.len() as f64 * 100.0)
            .collect();
        if kept.is_empty() { 0.0 } else { kept.iter().sum::<f64>() / kept.len() as f64 }
    };
    (ratio(&|l| &l.sentence_labels), ratio(&|l| &l.clause_labels))
}
