//! DROP-style answer normalization and EM/F1 with exact multi-span alignment.

use crate::corpus::format_number;

const ARTICLES: [&str; 3] = ["a", "an", "the"];

fn is_number(s: &str) -> bool {
    let cleaned: String = s.chars().filter(|&c| c != ',').collect();
    cleaned.parse::<f64>().is_ok_and(f64::is_finite)
}

fn canonical_number(s: &str) -> Option<String> {
    let cleaned: String = s.chars().filter(|&c| c != ',').collect();
    cleaned.parse::<f64>().ok().filter(|v| v.is_finite()).map(format_number)
}

/// Normalized form of one answer string: lowercase, punctuation stripped
/// (except inside numbers), numbers canonicalized, articles dropped, split
/// on whitespace and hyphens, joined by single spaces.
pub fn normalize_answer(s: &str) -> String {
    let mut parts = Vec::new();
    for raw in s.split(|c: char| c.is_whitespace() || c == '-') {
        let lower = raw.to_lowercase();
        let token = if is_number(&lower) {
            canonical_number(&lower).unwrap_or(lower)
        } else {
            let stripped: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
            canonical_number(&stripped).unwrap_or(stripped)
        };
        for word in token.split_whitespace() {
            if !ARTICLES.contains(&word) {
                parts.push(word.to_string());
            }
        }
    }
    parts.join(" ")
}

/// Token bag (set semantics) of a normalized answer.
pub fn token_bag(s: &str) -> Vec<String> {
    let mut bag: Vec<String> = normalize_answer(s).split_whitespace().map(str::to_string).collect();
    bag.sort();
    bag.dedup();
    bag
}

fn bag_f1(pred: &[String], gold: &[String]) -> f64 {
    let inter = pred.iter().filter(|t| gold.contains(t)).count() as f64;
    let precision = if pred.is_empty() { 1.0 } else { inter / pred.len() as f64 };
    let recall = if gold.is_empty() { 1.0 } else { inter / gold.len() as f64 };
    if precision == 0.0 && recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) }
}

/// A gold bag containing numbers only matches predictions sharing one.
fn numbers_agree(pred: &[String], gold: &[String]) -> bool {
    let gold_numbers: Vec<&String> = gold.iter().filter(|t| is_number(t)).collect();
    gold_numbers.is_empty() || gold_numbers.iter().any(|g| pred.contains(g))
}

fn pair_score(pred: &[String], gold: &[String]) -> f64 {
    if numbers_agree(pred, gold) { bag_f1(pred, gold) } else { 0.0 }
}

/// Maximum total score of a one-to-one assignment between rows and columns.
fn best_alignment(scores: &[Vec<f64>], cols: usize) -> f64 {
    // dp over the set of used columns, rows consumed in order
    let full = 1usize << cols;
    let mut dp = vec![f64::NEG_INFINITY; full];
    dp[0] = 0.0;
    for row in scores {
        let mut next = dp.clone();
        for (mask, &base) in dp.iter().enumerate() {
            if base == f64::NEG_INFINITY {
                continue;
            }
            for (c, &s) in row.iter().enumerate() {
                if mask & (1 << c) == 0 {
                    let m = mask | (1 << c);
                    next[m] = next[m].max(base + s);
                }
            }
        }
        dp = next;
    }
    dp.into_iter().fold(0.0, f64::max)
}

/// EM (0 or 1) and F1 in [0, 1] of a predicted answer-string set against
/// one gold set.
pub fn em_f1(predicted: &[String], gold: &[String]) -> (f64, f64) {
    let mut p_norm: Vec<String> = predicted.iter().map(|s| normalize_answer(s)).collect();
    let mut g_norm: Vec<String> = gold.iter().map(|s| normalize_answer(s)).collect();
    p_norm.sort();
    g_norm.sort();
    let em = if p_norm == g_norm { 1.0 } else { 0.0 };
    let p_bags: Vec<Vec<String>> = predicted.iter().map(|s| token_bag(s)).collect();
    let g_bags: Vec<Vec<String>> = gold.iter().map(|s| token_bag(s)).collect();
    let scores: Vec<Vec<f64>> = p_bags.iter().map(|p| g_bags.iter().map(|g| pair_score(p, g)).collect()).collect();
    let total = best_alignment(&scores, g_bags.len());
    let denom = p_bags.len().max(g_bags.len()).max(1) as f64;
    (em, total / denom)
}

/// Best EM and F1 over several accepted gold answers.
pub fn em_f1_max<'a>(predicted: &[String], golds: impl IntoIterator<Item = &'a [String]>) -> (f64, f64) {
    golds.into_iter().map(|g| em_f1(predicted, g)).fold((0.0, 0.0), |(e, f), (e2, f2)| (e.max(e2), f.max(f2)))
}
