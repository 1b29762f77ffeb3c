use std::path::Path;

use serde_json::{json, Map, Value};
use thiserror::Error;

use super::{parse_number, AnswerSpec, Document, QAInstance};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed DROP JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed DROP data in passage `{passage_id}`: {reason}")]
    Schema { passage_id: String, reason: String },
}

/// One passage with its questions.
pub type Dataset = Vec<(Document, Vec<QAInstance>)>;

#[derive(Debug, Default)]
pub struct IngestReport {
    pub data: Dataset,
    /// qa_pairs dropped because their answer matched no known shape.
    pub skipped: usize,
}

impl IngestReport {
    pub fn num_instances(&self) -> usize {
        self.data.iter().map(|(_, qs)| qs.len()).sum()
    }
}

pub fn ingest_drop(path: &Path) -> Result<IngestReport, CorpusError> {
    let text =
        std::fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
    ingest_drop_str(&text)
}

fn str_field<'a>(v: &'a Value, key: &str) -> Option<&'a str> {
    v.get(key).and_then(Value::as_str)
}

/// Decode one DROP answer object; `None` when no shape is populated.
fn parse_answer(v: &Value) -> Option<AnswerSpec> {
    if let Some(n) = str_field(v, "number").map(str::trim).filter(|s| !s.is_empty()) {
        let value = parse_number(n).or_else(|| n.parse::<f64>().ok())?;
        return Some(AnswerSpec::Number { value, text: n.to_string() });
    }
    if let Some(spans) = v.get("spans").and_then(Value::as_array) {
        let spans: Vec<String> = spans.iter().filter_map(Value::as_str).map(str::to_string).collect();
        if !spans.is_empty() {
            return Some(AnswerSpec::Spans(spans));
        }
    }
    if let Some(date) = v.get("date") {
        let part = |k| str_field(date, k).unwrap_or("").trim().to_string();
        let (day, month, year) = (part("day"), part("month"), part("year"));
        if !(day.is_empty() && month.is_empty() && year.is_empty()) {
            return Some(AnswerSpec::Date { day, month, year });
        }
    }
    None
}

pub fn ingest_drop_str(text: &str) -> Result<IngestReport, CorpusError> {
    let root: Value = serde_json::from_str(text)?;
    let passages = root.as_object().ok_or_else(|| CorpusError::Schema {
        passage_id: "<root>".into(),
        reason: "top level must be an object keyed by passage id".into(),
    })?;
    let mut report = IngestReport::default();
    for (pid, entry) in passages {
        let schema = |reason: &str| CorpusError::Schema { passage_id: pid.clone(), reason: reason.to_string() };
        let passage = str_field(entry, "passage").ok_or_else(|| schema("missing \"passage\" string"))?;
        let pairs = entry.get("qa_pairs").and_then(Value::as_array).ok_or_else(|| schema("missing \"qa_pairs\" array"))?;
        let doc = Document::new(pid.clone(), passage);
        let mut instances = Vec::with_capacity(pairs.len());
        for qa in pairs {
            let question = str_field(qa, "question").ok_or_else(|| schema("qa pair without \"question\""))?;
            let query_id = str_field(qa, "query_id").ok_or_else(|| schema("qa pair without \"query_id\""))?;
            let Some(gold) = qa.get("answer").and_then(parse_answer) else {
                report.skipped += 1;
                continue;
            };
            let mut inst = QAInstance::new(query_id, question, gold);
            if let Some(va) = qa.get("validated_answers").and_then(Value::as_array) {
                inst.validated = va.iter().filter_map(parse_answer).collect();
            }
            instances.push(inst);
        }
        report.data.push((doc, instances));
    }
    Ok(report)
}

/// DROP answer object with every shape present (unused ones empty).
pub fn answer_to_json(a: &AnswerSpec) -> Value {
    let (number, spans, date) = match a {
        AnswerSpec::Number { text, .. } => (text.clone(), vec![], ("", "", "")),
        AnswerSpec::Spans(s) => (String::new(), s.clone(), ("", "", "")),
        AnswerSpec::Date { day, month, year } => (String::new(), vec![], (day.as_str(), month.as_str(), year.as_str())),
    };
    json!({
        "number": number,
        "spans": spans,
        "date": { "day": date.0, "month": date.1, "year": date.2 },
    })
}

/// Passage id, passage text and its (query id, question, answer) triples.
pub type RawPassage = (String, String, Vec<(String, String, AnswerSpec)>);

/// Serialize passages and questions in DROP layout, preserving order.
pub fn to_drop_json(data: &[RawPassage]) -> String {
    let mut root = Map::new();
    for (pid, passage, qas) in data {
        let pairs: Vec<Value> = qas
            .iter()
            .map(|(qid, q, a)| json!({ "question": q, "query_id": qid, "answer": answer_to_json(a) }))
            .collect();
        root.insert(pid.clone(), json!({ "passage": passage, "qa_pairs": pairs }));
    }
    serde_json::to_string_pretty(&Value::Object(root)).expect("json values serialize")
}
