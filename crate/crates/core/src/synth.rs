//! Deterministic census-style synthetic corpus with questions of every
//! answer type, emitted in DROP layout.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{format_number, to_drop_json, AnswerSpec, Document, QAInstance};
use crate::supervision::{enumerate_expressions, instance_numbers, DEFAULT_EXPRESSION_CAP, DEFAULT_MAX_TERMS};

const GROUPS: [&str; 6] = ["White", "African American", "Native American", "Asian", "Pacific Islander", "Hispanic"];
const INDUSTRIES: [&str; 12] = [
    "tourism", "fishing", "mining", "farming", "logging", "manufacturing", "retail", "shipping", "banking",
    "education", "construction", "healthcare",
];
const FIRST_NAMES: [&str; 16] = [
    "John", "Mary", "Robert", "Linda", "James", "Susan", "David", "Karen", "Thomas", "Nancy", "Daniel", "Laura",
    "Peter", "Helen", "Walter", "Grace",
];
const LAST_NAMES: [&str; 16] = [
    "Smith", "Miller", "Jones", "Brown", "Davis", "Wilson", "Moore", "Taylor", "Clark", "Lewis", "Walker", "Young",
    "Allen", "Baker", "Carter", "Turner",
];

/// Generated passage with its single question, in DROP-serializable form.
pub type SynthPassage = crate::corpus::RawPassage;

struct Facts {
    year: u32,
    people: u32,
    households: u32,
    families: u32,
    density: Option<u32>,
    /// (group, percentage in tenths), in passage order.
    groups: Vec<(&'static str, u32)>,
    mayor: String,
    industries: Vec<&'static str>,
    order: Vec<usize>,
}

fn with_commas(n: u32) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn tenths(v: u32) -> String {
    format_number(f64::from(v) / 10.0)
}

/// Percentage in tenths with exactly one decimal, as census tables print it.
fn percent(v: u32) -> String {
    format!("{}.{}%", v / 10, v % 10)
}

fn list_phrase(items: &[String]) -> String {
    match items.len() {
        0 => String::new(),
        1 => items[0].clone(),
        2 => format!("{} and {}", items[0], items[1]),
        n => format!("{}, and {}", items[..n - 1].join(", "), items[n - 1]),
    }
}

fn sample_facts(rng: &mut ChaCha8Rng) -> Facts {
    let year = rng.gen_range(1990..=2020);
    let people = rng.gen_range(5_000..90_000);
    let households = people * rng.gen_range(36..46) / 100;
    let families = households * rng.gen_range(60..76) / 100;
    let density = rng.gen_bool(0.5).then(|| rng.gen_range(2_000..30_000));

    let k = rng.gen_range(3..=5);
    let mut names: Vec<&str> = GROUPS.to_vec();
    names.shuffle(rng);
    let mut values: Vec<u32> = Vec::with_capacity(k);
    values.push(rng.gen_range(400..960));
    while values.len() < k {
        let v = rng.gen_range(1..150);
        if !values.contains(&v) {
            values.push(v);
        }
    }
    values.shuffle(rng);
    let groups = names.into_iter().take(k).zip(values).collect();

    let mayor = format!("{} {}", FIRST_NAMES.choose(rng).unwrap(), LAST_NAMES.choose(rng).unwrap());
    let m = rng.gen_range(2..=5);
    let mut industries: Vec<&str> = INDUSTRIES.to_vec();
    industries.shuffle(rng);
    industries.truncate(m);
    let mut order = vec![0, 1, 2];
    order.shuffle(rng);
    Facts { year, people, households, families, density, groups, mayor, industries, order }
}

fn render_passage(f: &Facts) -> String {
    let mut sentences = vec![format!(
        "As of the census of {}, there were {} people, {} households, and {} families residing in the city.",
        f.year,
        with_commas(f.people),
        with_commas(f.households),
        with_commas(f.families)
    )];
    if let Some(d) = f.density {
        sentences.push(format!("The population density was {} inhabitants per square mile.", tenths(d)));
    }
    let groups: Vec<String> = f.groups.iter().map(|(g, v)| format!("{} {}", percent(*v), g)).collect();
    let body = [
        format!("The racial makeup of the city was {}.", list_phrase(&groups)),
        format!("The mayor of the city is {}.", f.mayor),
        format!(
            "The main industries of the city are {}.",
            list_phrase(&f.industries.iter().map(|s| s.to_string()).collect::<Vec<_>>())
        ),
    ];
    for &i in &f.order {
        sentences.push(body[i].clone());
    }
    sentences.join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Template {
    PercentDifference,
    PercentSum,
    CountDifference,
    IndustryCount,
    Mayor,
    Comparison,
    Industries,
    CensusYear,
}

fn pick_template(rng: &mut ChaCha8Rng) -> Template {
    let r: f64 = rng.gen();
    match r {
        r if r < 0.15 => Template::PercentDifference,
        r if r < 0.23 => Template::PercentSum,
        r if r < 0.35 => Template::CountDifference,
        r if r < 0.50 => Template::IndustryCount,
        r if r < 0.65 => Template::Mayor,
        r if r < 0.80 => Template::Comparison,
        r if r < 0.95 => Template::Industries,
        _ => Template::CensusYear,
    }
}

fn number_answer(t: u32) -> AnswerSpec {
    AnswerSpec::Number { value: f64::from(t) / 10.0, text: tenths(t) }
}

/// Question text, gold answer and (for arithmetic) the answer in tenths.
fn make_question(rng: &mut ChaCha8Rng, f: &Facts, t: Template) -> (String, AnswerSpec, Option<u32>) {
    let two_groups = |rng: &mut ChaCha8Rng| {
        let mut g: Vec<(&str, u32)> = f.groups.choose_multiple(rng, 2).cloned().collect();
        g.sort_by_key(|x| std::cmp::Reverse(x.1));
        (g[0], g[1])
    };
    match t {
        Template::PercentDifference => {
            let ((g1, v1), (g2, v2)) = two_groups(rng);
            let q = if rng.gen_bool(0.5) {
                format!("How many more percent of people were {g1} than {g2}?")
            } else {
                format!("How many more percentage of the population was {g1} than {g2}?")
            };
            (q, number_answer(v1 - v2), Some(v1 - v2))
        }
        Template::PercentSum => {
            let ((g1, v1), (g2, v2)) = two_groups(rng);
            let (a, b) = if rng.gen_bool(0.5) { (g1, g2) } else { (g2, g1) };
            (format!("How many percent of people were {a} or {b}?"), number_answer(v1 + v2), Some(v1 + v2))
        }
        Template::CountDifference => {
            let (q, big, small) = match rng.gen_range(0..3) {
                0 => ("How many more people were there than households?", f.people, f.households),
                1 => ("How many more households were there than families?", f.households, f.families),
                _ => ("How many more people were there than families?", f.people, f.families),
            };
            (q.to_string(), number_answer((big - small) * 10), Some((big - small) * 10))
        }
        Template::IndustryCount => {
            let m = f.industries.len() as u32;
            ("How many main industries does the city have?".to_string(), number_answer(m * 10), None)
        }
        Template::Mayor => ("Who is the mayor of the city?".to_string(), AnswerSpec::Spans(vec![f.mayor.clone()]), None),
        Template::Comparison => {
            let ((g1, _), (g2, _)) = two_groups(rng);
            let larger = rng.gen_bool(0.5);
            let (a, b) = if rng.gen_bool(0.5) { (g1, g2) } else { (g2, g1) };
            let q = format!("Which group was {}: {a} or {b}?", if larger { "larger" } else { "smaller" });
            let ans = if larger { g1 } else { g2 };
            (q, AnswerSpec::Spans(vec![ans.to_string()]), None)
        }
        Template::Industries => (
            "What are the main industries of the city?".to_string(),
            AnswerSpec::Spans(f.industries.iter().map(|s| s.to_string()).collect()),
            None,
        ),
        Template::CensusYear => (
            "In which year was the census taken?".to_string(),
            AnswerSpec::Date { day: String::new(), month: String::new(), year: f.year.to_string() },
            None,
        ),
    }
}

/// Accept only questions whose numeric supervision is unambiguous.
fn acceptable(passage: &str, question: &str, gold: &AnswerSpec, t: Template, exact: Option<u32>) -> bool {
    let AnswerSpec::Number { value, .. } = gold else { return true };
    let doc = Document::new("", passage);
    let qa = QAInstance::new("", question, gold.clone());
    let numbers = instance_numbers(&doc, &qa);
    let found = enumerate_expressions(&numbers, *value, DEFAULT_MAX_TERMS, DEFAULT_EXPRESSION_CAP).list;
    match t {
        Template::IndustryCount => found.is_empty(),
        _ => {
            let small_integer = value.fract() == 0.0 && *value <= 9.0;
            // the template's own expression must be the only solution
            found.len() == 1 && !small_integer && exact.is_some_and(|e| (found[0].evaluate(&numbers) - f64::from(e) / 10.0).abs() < 1e-9)
        }
    }
}

/// `n` passages for one split, each carrying a single question.
pub fn generate_split(seed: u64, split: &str, n: usize) -> Vec<SynthPassage> {
    let split_key = split.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(u64::from(b)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ split_key.rotate_left(17));
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let facts = sample_facts(&mut rng);
        let template = pick_template(&mut rng);
        let passage = render_passage(&facts);
        let (question, gold, exact) = make_question(&mut rng, &facts, template);
        if !acceptable(&passage, &question, &gold, template, exact) {
            continue;
        }
        let pid = format!("synth-{split}-{:04}", out.len());
        let qid = format!("{pid}-q");
        out.push((pid, passage, vec![(qid, question, gold)]));
    }
    out
}

/// Write `train.json` and `dev.json` under `dir`.
pub fn write_synthetic(seed: u64, n_train: usize, n_dev: usize, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("train.json"), to_drop_json(&generate_split(seed, "train", n_train)))?;
    std::fs::write(dir.join("dev.json"), to_drop_json(&generate_split(seed, "dev", n_dev)))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ingest_drop_str;
    use crate::supervision::{build_annotations, AnswerType};

    #[test]
    fn comma_grouping() {
        assert_eq!(with_commas(31894), "31,894");
        assert_eq!(with_commas(999), "999");
        assert_eq!(with_commas(1000), "1,000");
        assert_eq!(percent(939), "93.9%");
        assert_eq!(percent(8), "0.8%");
        assert_eq!(tenths(931), "93.1");
        assert_eq!(tenths(120), "12");
    }

    #[test]
    fn deterministic_and_split_independent() {
        let a = generate_split(7, "train", 10);
        let b = generate_split(7, "train", 10);
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert_ne!(generate_split(7, "dev", 3)[0], a[0]);
        assert_ne!(generate_split(8, "train", 1)[0], a[0]);
    }

    #[test]
    fn every_instance_is_trainable_and_roundtrips() {
        let data = generate_split(3, "train", 200);
        let report = ingest_drop_str(&to_drop_json(&data)).unwrap();
        assert_eq!(report.num_instances(), 200);
        let mut seen = std::collections::BTreeSet::new();
        for ((doc, qas), (pid, passage, _)) in report.data.iter().zip(&data) {
            assert_eq!(doc, &Document::new(pid.clone(), passage.clone()));
            let ann = build_annotations(doc, &qas[0]);
            assert!(ann.is_trainable(), "{}: {}", qas[0].query_id, qas[0].question);
            seen.extend(ann.feasible_types.iter().copied());
            if let AnswerSpec::Number { value, .. } = &qas[0].gold {
                for e in &ann.expressions {
                    assert!((e.evaluate(&instance_numbers(doc, &qas[0])) - value).abs() < 1e-9);
                }
            }
        }
        assert_eq!(seen.len(), AnswerType::ALL.len());
    }
}
