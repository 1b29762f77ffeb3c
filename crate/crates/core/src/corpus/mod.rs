//! Passages, questions and answers: DROP-format ingestion, tokenization,
//! fragment segmentation and number mentions.

mod drop;
pub mod text;

use serde::{Deserialize, Serialize};

pub use drop::{answer_to_json, ingest_drop, ingest_drop_str, to_drop_json, CorpusError, Dataset, IngestReport, RawPassage};
pub use text::{extract_numbers, parse_number, segment, tokenize};

/// A token with byte offsets into its source text (`text[char_start..char_end] == surface`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub char_start: usize,
    pub char_end: usize,
    pub seq_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FragmentLevel {
    Sentence,
    Clause,
}

/// Half-open token span `[start, end)` of a sentence or clause.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fragment {
    pub frag_id: usize,
    pub level: FragmentLevel,
    pub start: usize,
    pub end: usize,
    /// Set exactly for clauses.
    pub parent_sentence: Option<usize>,
}

impl Fragment {
    pub fn contains(&self, token: usize) -> bool {
        self.start <= token && token < self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumberMention {
    pub token_index: usize,
    pub value: f64,
    pub surface: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub passage_id: String,
    pub text: String,
    pub tokens: Vec<Token>,
    pub sentences: Vec<Fragment>,
    pub clauses: Vec<Fragment>,
    pub numbers: Vec<NumberMention>,
}

impl Document {
    pub fn new(passage_id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        let (sentences, clauses) = segment(&tokens);
        let numbers = extract_numbers(&tokens);
        Self { passage_id: passage_id.into(), text, tokens, sentences, clauses, numbers }
    }

    /// Sentence index of every token.
    pub fn sentence_of_token(&self) -> Vec<usize> {
        owner_index(&self.sentences, self.tokens.len())
    }

    /// Clause index of every token.
    pub fn clause_of_token(&self) -> Vec<usize> {
        owner_index(&self.clauses, self.tokens.len())
    }

    /// Source text covered by tokens `[start, end)`.
    pub fn span_text(&self, start: usize, end: usize) -> &str {
        span_text(&self.text, &self.tokens, start, end)
    }

    pub fn fragment_text(&self, f: &Fragment) -> &str {
        self.span_text(f.start, f.end)
    }

    /// Drop passage tokens from `max_tokens` on, with the fragments and
    /// numbers that fall beyond the cut.
    pub fn truncated(&self, max_tokens: usize) -> Document {
        if self.tokens.len() <= max_tokens {
            return self.clone();
        }
        let cut = |frags: &[Fragment]| -> Vec<Fragment> {
            frags
                .iter()
                .filter(|f| f.start < max_tokens)
                .map(|f| Fragment { end: f.end.min(max_tokens), ..f.clone() })
                .collect()
        };
        Document {
            passage_id: self.passage_id.clone(),
            text: self.text.clone(),
            tokens: self.tokens[..max_tokens].to_vec(),
            sentences: cut(&self.sentences),
            clauses: cut(&self.clauses),
            numbers: self.numbers.iter().filter(|n| n.token_index < max_tokens).cloned().collect(),
        }
    }
}

fn owner_index(frags: &[Fragment], n: usize) -> Vec<usize> {
    let mut owner = vec![usize::MAX; n];
    for (k, f) in frags.iter().enumerate() {
        for slot in &mut owner[f.start..f.end] {
            *slot = k;
        }
    }
    owner
}

pub fn span_text<'a>(text: &'a str, tokens: &[Token], start: usize, end: usize) -> &'a str {
    if start >= end || end > tokens.len() {
        return "";
    }
    &text[tokens[start].char_start..tokens[end - 1].char_end]
}

/// Gold answer in one of DROP's three shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AnswerSpec {
    Number { value: f64, text: String },
    Spans(Vec<String>),
    Date { day: String, month: String, year: String },
}

impl AnswerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            AnswerSpec::Number { .. } => "number",
            AnswerSpec::Spans(_) => "spans",
            AnswerSpec::Date { .. } => "date",
        }
    }

    /// Answer strings as scored by the evaluator.
    pub fn strings(&self) -> Vec<String> {
        match self {
            AnswerSpec::Number { text, .. } => vec![text.clone()],
            AnswerSpec::Spans(s) => s.clone(),
            AnswerSpec::Date { day, month, year } => {
                let parts: Vec<&str> = [day, month, year].into_iter().map(String::as_str).filter(|s| !s.is_empty()).collect();
                vec![parts.join(" ")]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAInstance {
    pub query_id: String,
    pub question: String,
    pub question_tokens: Vec<Token>,
    pub question_numbers: Vec<NumberMention>,
    pub gold: AnswerSpec,
    /// Additional accepted answers (DROP `validated_answers`).
    pub validated: Vec<AnswerSpec>,
}

impl QAInstance {
    pub fn new(query_id: impl Into<String>, question: impl Into<String>, gold: AnswerSpec) -> Self {
        let question = question.into();
        let question_tokens = tokenize(&question);
        let question_numbers = extract_numbers(&question_tokens);
        Self { query_id: query_id.into(), question, question_tokens, question_numbers, gold, validated: Vec::new() }
    }

    /// Every accepted gold answer, primary first.
    pub fn golds(&self) -> impl Iterator<Item = &AnswerSpec> {
        std::iter::once(&self.gold).chain(self.validated.iter())
    }
}

/// Numbers rendered with trailing zeros trimmed ("93.10" → "93.1", "5.0" → "5").
pub fn format_number(v: f64) -> String {
    let s = format!("{:.6}", v);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".to_string() } else { s.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::CENSUS_PASSAGE;


    #[test]
    fn census_segmentation_and_numbers() {
        let doc = Document::new("p", CENSUS_PASSAGE);
        assert_eq!(doc.sentences.len(), 5);
        let racial = doc
            .sentences
            .iter()
            .find(|s| doc.fragment_text(s).starts_with("The racial makeup"))
            .expect("racial makeup sentence");
        let n_clauses = doc.clauses.iter().filter(|c| c.parent_sentence == Some(racial.frag_id)).count();
        assert!(n_clauses >= 6, "{n_clauses} clauses");
        let values: Vec<f64> = doc.numbers.iter().map(|n| n.value).collect();
        for v in [2010.0, 31894.0, 93.9, 0.8] {
            assert!(values.contains(&v), "missing {v}");
        }
    }

    #[test]
    fn partition_and_containment_invariants() {
        let doc = Document::new("p", CENSUS_PASSAGE);
        let mut next = 0;
        for s in &doc.sentences {
            assert_eq!(s.start, next);
            next = s.end;
        }
        assert_eq!(next, doc.tokens.len());
        for s in &doc.sentences {
            let mut cur = s.start;
            for c in doc.clauses.iter().filter(|c| c.parent_sentence == Some(s.frag_id)) {
                assert_eq!(c.start, cur);
                assert!(c.end <= s.end && !c.is_empty());
                cur = c.end;
            }
            assert_eq!(cur, s.end);
        }
        let so = doc.sentence_of_token();
        let co = doc.clause_of_token();
        for n in &doc.numbers {
            assert_eq!(doc.clauses[co[n.token_index]].parent_sentence, Some(so[n.token_index]));
        }
    }

    #[test]
    fn number_formatting_trims_zeros() {
        assert_eq!(format_number(93.1), "93.1");
        assert_eq!(format_number(93.10), "93.1");
        assert_eq!(format_number(2010.0), "2010");
        assert_eq!(format_number(-0.0), "0");
        assert_eq!(format_number(93.9 - 0.8), "93.1");
    }

    #[test]
    fn date_answer_strings_skip_empty_parts() {
        let d = AnswerSpec::Date { day: "".into(), month: "May".into(), year: "1990".into() };
        assert_eq!(d.strings(), vec!["May 1990".to_string()]);
    }
}

