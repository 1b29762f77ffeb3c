//! Brute-force re-implementations of the corpus, graph and supervision
//! rules, shared by the oracle tests and the acceptance target.

#![allow(clippy::needless_range_loop)]

use std::collections::{BTreeMap, BTreeSet};

use evidr::corpus::{segment, tokenize, AnswerSpec, Document, QAInstance, Token};
use evidr::graph::{build_graph, NodeKind, Relation};
use evidr::supervision::{enumerate_expressions, instance_numbers, label_evidence};
use evidr::synth::generate_split;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 16] = [
    "the", "city", "Mayor", "Smith", "had", "people", "and", "or", "but", "river", "North", "grew", "in", "of", "Asian", "parks",
];

pub fn random_text(rng: &mut ChaCha8Rng) -> String {
    let mut parts = Vec::new();
    for _ in 0..rng.gen_range(1..6) {
        for _ in 0..rng.gen_range(1..14) {
            let r: f64 = rng.gen();
            let piece = if r < 0.12 {
                ",".to_string()
            } else if r < 0.16 {
                ";".to_string()
            } else if r < 0.3 {
                match rng.gen_range(0..4) {
                    0 => rng.gen_range(0..3000).to_string(),
                    1 => format!("{:.1}%", rng.gen_range(0.0..100.0)),
                    2 => format!("{},{:03}", rng.gen_range(1..999), rng.gen_range(0..1000)),
                    _ => ["two", "seven", "ten"][rng.gen_range(0..3)].to_string(),
                }
            } else {
                WORDS.choose(rng).unwrap().to_string()
            };
            parts.push(piece);
        }
        parts.push([".", "!", "?"][rng.gen_range(0..3)].to_string());
    }
    parts.join(" ")
}

// ---- segmentation

fn is_word(s: &str) -> bool {
    s.chars().any(char::is_alphanumeric)
}

/// Sentences as `(start, end)`, clauses as `(start, end, sentence)`.
pub type Segmentation = (Vec<(usize, usize)>, Vec<(usize, usize, usize)>);

/// Cut points by direct rule application, then fragments between cuts.
pub fn oracle_segment(tokens: &[Token]) -> Segmentation {
    let s: Vec<&str> = tokens.iter().map(|t| t.surface.as_str()).collect();
    let terminal = |x: &str| matches!(x, "." | "!" | "?");
    let closer = |x: &str| matches!(x, "\"" | "'" | ")" | "]" | "”" | "’");
    let mut sentence_cuts = BTreeSet::from([0, s.len()]);
    let mut i = 0;
    while i < s.len() {
        if terminal(s[i]) {
            let mut j = i + 1;
            while j < s.len() && (terminal(s[j]) || closer(s[j])) {
                j += 1;
            }
            sentence_cuts.insert(j);
            i = j;
        } else {
            i += 1;
        }
    }
    let bounds: Vec<usize> = sentence_cuts.into_iter().collect();
    let sentences: Vec<(usize, usize)> = bounds.windows(2).map(|w| (w[0], w[1])).filter(|(a, b)| a < b).collect();
    let mut clauses = Vec::new();
    for (sid, &(a, b)) in sentences.iter().enumerate() {
        let words_after = |j: usize| (j + 1..b).filter(|&k| is_word(s[k])).count();
        let mut cuts = BTreeSet::from([a, b]);
        for j in a..b {
            if (s[j] == "," || s[j] == ";") && words_after(j) >= 1 {
                cuts.insert(j + 1);
            }
        }
        for j in a..b {
            let lower = s[j].to_lowercase();
            if ["and", "but", "or"].contains(&lower.as_str()) && j > a && words_after(j) >= 3 {
                cuts.insert(j);
            }
        }
        let c: Vec<usize> = cuts.into_iter().collect();
        clauses.extend(c.windows(2).filter(|w| w[0] < w[1]).map(|w| (w[0], w[1], sid)));
    }
    (sentences, clauses)
}

pub fn check_segmentation(text: &str) -> Result<(), String> {
    let tokens = tokenize(text);
    let (sentences, clauses) = segment(&tokens);
    let (os, oc) = oracle_segment(&tokens);
    let got_s: Vec<(usize, usize)> = sentences.iter().map(|f| (f.start, f.end)).collect();
    let got_c: Vec<(usize, usize, usize)> = clauses.iter().map(|f| (f.start, f.end, f.parent_sentence.unwrap())).collect();
    if got_s != os {
        return Err(format!("sentences of {text:?}: {got_s:?} vs {os:?}"));
    }
    if got_c != oc {
        return Err(format!("clauses of {text:?}: {got_c:?} vs {oc:?}"));
    }
    Ok(())
}

// ---- graph

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Key {
    QuestionNumber(usize),
    PassageNumber(usize),
    Sentence(usize),
    Clause(usize),
}

pub fn oracle_edges(doc: &Document, qa: &QAInstance) -> BTreeSet<(Key, Key, Relation)> {
    let numbers: Vec<(Key, f64)> = qa
        .question_numbers
        .iter()
        .map(|n| (Key::QuestionNumber(n.token_index), n.value))
        .chain(doc.numbers.iter().map(|n| (Key::PassageNumber(n.token_index), n.value)))
        .collect();
    let mut edges = BTreeSet::new();
    for (a, va) in &numbers {
        for (b, vb) in &numbers {
            if a != b {
                edges.insert((*a, *b, if va > vb { Relation::NumGreater } else { Relation::NumLessEqual }));
            }
        }
    }
    for (i, c) in doc.clauses.iter().enumerate() {
        // parent found by span containment, not by the stored field
        let parent = doc.sentences.iter().position(|s| s.start <= c.start && c.end <= s.end).unwrap();
        edges.insert((Key::Clause(i), Key::Sentence(parent), Relation::ClauseToSentence));
        edges.insert((Key::Sentence(parent), Key::Clause(i), Relation::SentenceToClause));
        for (j, d) in doc.clauses.iter().enumerate() {
            let same = doc.sentences[parent].start <= d.start && d.end <= doc.sentences[parent].end;
            if i != j && same {
                edges.insert((Key::Clause(i), Key::Clause(j), Relation::ClauseSameSentence));
            }
        }
        for n in &doc.numbers {
            if c.start <= n.token_index && n.token_index < c.end {
                edges.insert((Key::PassageNumber(n.token_index), Key::Clause(i), Relation::NumberToClause));
                edges.insert((Key::Clause(i), Key::PassageNumber(n.token_index), Relation::ClauseToNumber));
            }
        }
    }
    edges
}

pub fn random_instances(n: usize) -> Vec<(Document, QAInstance)> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut out = Vec::new();
    for (pid, passage, qs) in generate_split(3, "oracle", n / 2) {
        let (_, q, a) = &qs[0];
        out.push((Document::new(pid, passage), QAInstance::new("q", q.clone(), a.clone())));
    }
    while out.len() < n {
        let doc = Document::new(format!("r{}", out.len()), random_text(&mut rng));
        let question = match rng.gen_range(0..3) {
            0 => "How many parks ?".to_string(),
            1 => format!("Was it more than {} ?", rng.gen_range(0..100)),
            _ => format!("Between {} and {} ?", rng.gen_range(0..50), rng.gen_range(0..50)),
        };
        out.push((doc, QAInstance::new("q", question, AnswerSpec::Spans(vec!["city".into()]))));
    }
    out
}

/// Library graph against the oracle, plus the number-relation completeness
/// invariant.
pub fn check_graph(doc: &Document, qa: &QAInstance) -> Result<(), String> {
    let g = build_graph(doc, qa);
    let key = |i: usize| {
        let n = &g.nodes[i];
        match n.kind {
            NodeKind::Number if n.in_question => Key::QuestionNumber(n.start),
            NodeKind::Number => Key::PassageNumber(n.start),
            NodeKind::Sentence => Key::Sentence(n.source),
            NodeKind::Clause => Key::Clause(n.source),
        }
    };
    let got: BTreeSet<(Key, Key, Relation)> = g.edges.iter().map(|e| (key(e.src), key(e.dst), e.relation)).collect();
    if got.len() != g.edges.len() {
        return Err(format!("duplicate edges in {:?}", doc.text));
    }
    if got != oracle_edges(doc, qa) {
        return Err(format!("edge sets differ on {:?}", doc.text));
    }
    let numbers = g.nodes.iter().filter(|n| n.kind == NodeKind::Number).count();
    let mut pairs: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for e in g.edges.iter().filter(|e| matches!(e.relation, Relation::NumGreater | Relation::NumLessEqual)) {
        *pairs.entry((e.src, e.dst)).or_default() += 1;
    }
    if pairs.len() != numbers * numbers.saturating_sub(1) || pairs.values().any(|&c| c != 1) {
        return Err(format!("number relations incomplete on {:?}", doc.text));
    }
    Ok(())
}

// ---- supervision

fn words(tokens: &[Token]) -> Vec<String> {
    tokens.iter().map(|t| t.surface.to_lowercase()).collect()
}

fn contains_run(hay: &[String], needle: &[String], from: usize, to: usize) -> bool {
    !needle.is_empty() && to >= from + needle.len() && (from..=to - needle.len()).any(|s| hay[s..s + needle.len()] == *needle)
}

const STOP: &[&str] = &[
    "how", "many", "much", "what", "which", "who", "whom", "whose", "when", "where", "why", "did", "does", "do", "is",
    "was", "were", "are", "be", "been", "had", "has", "have", "the", "a", "an", "of", "in", "on", "at", "to", "for",
    "from", "by", "with", "and", "or", "than", "more", "less", "fewer", "between", "after", "before", "there", "it",
    "its", "as",
];

/// Maximal runs of capitalized question words, stop words removed.
fn oracle_entities(q: &[Token]) -> Vec<Vec<String>> {
    let mut runs = Vec::new();
    let mut cur: Vec<String> = Vec::new();
    for t in q {
        let cap = t.surface.chars().next().is_some_and(char::is_uppercase);
        if cap && !STOP.contains(&t.surface.to_lowercase().as_str()) {
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

/// Synthetic instances for the label oracle.
pub fn label_instances(n: usize) -> Vec<(Document, QAInstance)> {
    generate_split(11, "labels", n)
        .into_iter()
        .map(|(pid, passage, qs)| {
            let (qid, q, gold) = qs.into_iter().next().unwrap();
            (Document::new(pid, passage), QAInstance::new(qid, q, gold))
        })
        .collect()
}

pub fn check_labels(doc: &Document, qa: &QAInstance) -> Result<(), String> {
    let gold = &qa.gold;
    let got = label_evidence(doc, qa);
        let hay = words(&doc.tokens);
        let entities = oracle_entities(&qa.question_tokens);
        let answers: Vec<Vec<String>> = match gold {
            AnswerSpec::Spans(s) => s.iter().map(|x| words(&tokenize(x))).collect(),
            AnswerSpec::Number { .. } => Vec::new(),
            AnswerSpec::Date { day, month, year } => {
                let parts: Vec<&String> = [day, month, year].into_iter().filter(|p| !p.is_empty()).collect();
                let joined = words(&tokenize(&parts.iter().map(|p| p.as_str()).collect::<Vec<_>>().join(" ")));
                if contains_run(&hay, &joined, 0, hay.len()) {
                    vec![joined]
                } else {
                    parts.iter().map(|p| words(&tokenize(p))).collect()
                }
            }
        };
        let used_tokens: BTreeSet<usize> = match gold {
            AnswerSpec::Number { value, .. } => {
                let nums = instance_numbers(doc, qa);
                let offset = qa.question_numbers.len();
                enumerate_expressions(&nums, *value, 3, 64)
                    .list
                    .iter()
                    .flat_map(|a| a.terms())
                    .filter(|(i, _)| *i >= offset)
                    .map(|(i, _)| doc.numbers[i - offset].token_index)
                    .collect()
            }
            _ => BTreeSet::new(),
        };
        let rule = |s: usize, e: usize| {
            entities.iter().any(|n| contains_run(&hay, n, s, e))
                || answers.iter().any(|n| contains_run(&hay, n, s, e))
                || used_tokens.iter().any(|&t| s <= t && t < e)
        };
        let clauses: Vec<bool> = doc.clauses.iter().map(|c| rule(c.start, c.end)).collect();
        let sentences: Vec<bool> = doc
            .sentences
            .iter()
            .enumerate()
            .map(|(k, s)| rule(s.start, s.end) || doc.clauses.iter().zip(&clauses).any(|(c, &l)| l && c.parent_sentence == Some(k)))
            .collect();
        if got.clause_labels != clauses || got.sentence_labels != sentences {
        return Err(format!("{}: {}", qa.query_id, qa.question));
    }
    Ok(())
}

/// Every sign vector in {-1, 0, +1}^N with 1..=3 nonzeros hitting `target`.
pub fn exhaustive(numbers: &[f64], target: f64) -> BTreeSet<Vec<i8>> {
    let n = numbers.len();
    let mut out = BTreeSet::new();
    for code in 0..3usize.pow(n as u32) {
        let mut c = code;
        let signs: Vec<i8> = (0..n)
            .map(|_| {
                let s = [0i8, 1, -1][c % 3];
                c /= 3;
                s
            })
            .collect();
        let k = signs.iter().filter(|&&s| s != 0).count();
        let sum: f64 = signs.iter().zip(numbers).map(|(&s, &v)| f64::from(s) * v).sum();
        if (1..=3).contains(&k) && (sum - target).abs() <= 1e-5 {
            out.insert(signs);
        }
    }
    out
}

/// Random numbers and a target drawn from an achievable signed sum.
pub fn random_expression_case(rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
    let n = rng.gen_range(1..=8);
    let numbers: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..60)) / 2.0).collect();
    let mut signs = vec![0.0; n];
    for s in signs.iter_mut().take(rng.gen_range(1..=n.min(3))) {
        *s = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    }
    signs.shuffle(rng);
    let target = signs.iter().zip(&numbers).map(|(s, v)| s * v).sum();
    (numbers, target)
}

pub fn check_expressions(numbers: &[f64], target: f64) -> Result<(), String> {
    let got: BTreeSet<Vec<i8>> = enumerate_expressions(numbers, target, 3, usize::MAX).list.into_iter().map(|a| a.signs).collect();
    if got != exhaustive(numbers, target) {
        return Err(format!("{numbers:?} -> {target}"));
    }
    Ok(())
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
