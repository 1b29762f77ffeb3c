//! Library behaviour against the brute-force oracles.

mod common;

use common::oracle::*;
use evidr::corpus::{extract_numbers, segment, tokenize};
use rand::Rng;

#[test]
fn segmentation_fixture_with_three_sentences_and_seven_commas() {
    let text = "In 2010, the city had 31,894 people, 13,324 households, and 8,303 families. \
                The mayor, who was elected in 2008, served two terms, and then retired to the coast. \
                Parks, rivers and lakes were common.";
    let tokens = tokenize(text);
    assert_eq!(tokens.iter().filter(|t| t.surface == ",").count(), 7);
    let (sentences, clauses) = segment(&tokens);
    assert_eq!(sentences.len(), 3);
    check_segmentation(text).unwrap();
    assert_eq!(clauses.len(), 11);
}

#[test]
fn segmentation_matches_rule_oracle_on_random_text() {
    let mut rng = rng(2024);
    for _ in 0..300 {
        check_segmentation(&random_text(&mut rng)).unwrap();
    }
}

fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

#[test]
fn number_extraction_matches_reference_parser() {
    let mut rng = rng(77);
    for _ in 0..100 {
        let int: u64 = rng.gen_range(0..5_000_000);
        let grouped = rng.gen_bool(0.5);
        let decimals = rng.gen_range(0..4);
        let frac: String = (0..decimals).map(|_| char::from(b'0' + rng.gen_range(0..10u8))).collect();
        let percent = rng.gen_bool(0.3);
        let mut surface = if grouped { group_thousands(int) } else { int.to_string() };
        if decimals > 0 {
            surface = format!("{surface}.{frac}");
        }
        if percent {
            surface.push('%');
        }
        let reference: f64 = surface.replace([',', '%'], "").parse().unwrap();
        let text = format!("about {surface} units");
        let found = extract_numbers(&tokenize(&text));
        assert_eq!(found.len(), 1, "{text}");
        assert_eq!(found[0].surface, surface);
        assert_eq!(found[0].value, reference, "{surface}");
    }
}

#[test]
fn graph_matches_brute_force_rules_on_random_documents() {
    for (doc, qa) in random_instances(100) {
        check_graph(&doc, &qa).unwrap();
    }
}

#[test]
fn labels_match_rule_by_rule_reimplementation() {
    for (doc, qa) in label_instances(50) {
        check_labels(&doc, &qa).unwrap();
    }
}

#[test]
fn expressions_equal_exhaustive_search_on_random_instances() {
    let mut rng = rng(5);
    for _ in 0..200 {
        let (numbers, target) = random_expression_case(&mut rng);
        check_expressions(&numbers, target).unwrap();
    }
}
