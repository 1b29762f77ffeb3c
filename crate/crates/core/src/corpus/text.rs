//! Tokenization, sentence/clause segmentation and number extraction.

use super::{Fragment, FragmentLevel, NumberMention, Token};

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Length in bytes of a numeric surface starting at `s` (digits, comma
/// digit-groups, one decimal part, optional trailing `%`), or 0.
fn numeric_prefix(s: &str) -> usize {
    let b = s.as_bytes();
    let digits = |from: usize| b[from..].iter().take_while(|c| c.is_ascii_digit()).count();
    let mut i = digits(0);
    if i == 0 {
        return 0;
    }
    // comma groups only directly after a leading run of 1-3 digits
    if i <= 3 {
        while i + 4 <= b.len() && b[i] == b',' && digits(i + 1) == 3 {
            i += 4;
        }
    }
    if i + 1 < b.len() && b[i] == b'.' && b[i + 1].is_ascii_digit() {
        i += 1 + digits(i + 1);
    }
    if i < b.len() && b[i] == b'%' {
        i += 1;
    }
    i
}

/// Length of a dotted abbreviation such as `U.S.` (two or more single letters
/// each followed by a period), or 0.
fn abbreviation_prefix(s: &str) -> usize {
    let mut chars = s.char_indices().peekable();
    let mut groups = 0;
    let mut end = 0;
    loop {
        match (chars.next(), chars.next()) {
            (Some((_, l)), Some((i, '.'))) if l.is_alphabetic() => {
                groups += 1;
                end = i + 1;
            }
            _ => break,
        }
    }
    if groups >= 2 {
        // the letter after the last period must not continue a word
        match s[end..].chars().next() {
            Some(c) if is_word_char(c) => 0,
            _ => end,
        }
    } else {
        0
    }
}

/// Split text into tokens with exact byte offsets.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        let c = rest.chars().next().unwrap();
        if c.is_whitespace() {
            i += c.len_utf8();
            continue;
        }
        let mut len = if c.is_ascii_digit() { numeric_prefix(rest) } else { 0 };
        if len > 0 && rest[len..].chars().next().is_some_and(|n| n.is_alphabetic()) {
            // "10th", "2010s": fall through to a plain word
            len = 0;
        }
        if len == 0 && c.is_alphabetic() {
            len = abbreviation_prefix(rest);
        }
        if len == 0 && is_word_char(c) {
            len = rest.char_indices().find(|(_, ch)| !is_word_char(*ch)).map_or(rest.len(), |(j, _)| j);
        }
        if len == 0 {
            len = c.len_utf8();
        }
        tokens.push(Token {
            surface: rest[..len].to_string(),
            char_start: i,
            char_end: i + len,
            seq_index: tokens.len(),
        });
        i += len;
    }
    tokens
}

fn is_terminal(s: &str) -> bool {
    matches!(s, "." | "!" | "?")
}

fn is_closer(s: &str) -> bool {
    matches!(s, "\"" | "'" | ")" | "]" | "”" | "’")
}

pub fn is_punctuation(s: &str) -> bool {
    !s.chars().any(char::is_alphanumeric)
}

const CONJUNCTIONS: [&str; 3] = ["and", "but", "or"];

/// Sentence and clause fragments over a passage's tokens.
///
/// Sentences end at `.`, `!` or `?` tokens (plus trailing terminals and
/// closing quotes/brackets). Clauses split a sentence after `,`/`;` and
/// before `and`/`but`/`or` when at least three word tokens follow in the
/// sentence; every clause is non-empty and contains a word token after a
/// split point.
pub fn segment(tokens: &[Token]) -> (Vec<Fragment>, Vec<Fragment>) {
    let mut sentence_spans = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < tokens.len() {
        if is_terminal(&tokens[i].surface) {
            let mut end = i + 1;
            while end < tokens.len() && (is_terminal(&tokens[end].surface) || is_closer(&tokens[end].surface)) {
                end += 1;
            }
            sentence_spans.push((start, end));
            start = end;
            i = end;
        } else {
            i += 1;
        }
    }
    if start < tokens.len() {
        sentence_spans.push((start, tokens.len()));
    }

    let mut sentences = Vec::new();
    let mut clauses = Vec::new();
    for (sid, &(s, e)) in sentence_spans.iter().enumerate() {
        sentences.push(Fragment { frag_id: sid, level: FragmentLevel::Sentence, start: s, end: e, parent_sentence: None });
        // words remaining strictly after position j within the sentence
        let mut words_after = vec![0usize; e - s + 1];
        for j in (s..e).rev() {
            words_after[j - s] = words_after[j - s + 1] + usize::from(!is_punctuation(&tokens[j].surface));
        }
        let words_after = |j: usize| words_after[j + 1 - s];
        let mut cs = s;
        for (j, tok) in tokens.iter().enumerate().take(e).skip(s) {
            let surf = tok.surface.as_str();
            let lower = surf.to_ascii_lowercase();
            if CONJUNCTIONS.contains(&lower.as_str()) && j > cs && words_after(j) >= 3 {
                clauses.push((cs, j, sid));
                cs = j;
            }
            if (surf == "," || surf == ";") && words_after(j) >= 1 {
                clauses.push((cs, j + 1, sid));
                cs = j + 1;
            }
        }
        if cs < e {
            clauses.push((cs, e, sid));
        }
    }
    let clauses = clauses
        .into_iter()
        .enumerate()
        .map(|(cid, (s, e, sid))| Fragment {
            frag_id: cid,
            level: FragmentLevel::Clause,
            start: s,
            end: e,
            parent_sentence: Some(sid),
        })
        .collect();
    (sentences, clauses)
}

const NUMBER_WORDS: [&str; 11] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];

/// Parse a token surface under the number grammar: integers, decimals,
/// comma-grouped numbers, percentages (magnitude kept, `93.9%` is 93.9)
/// and the cardinals zero to ten.
pub fn parse_number(surface: &str) -> Option<f64> {
    let lower = surface.to_ascii_lowercase();
    if let Some(v) = NUMBER_WORDS.iter().position(|w| *w == lower) {
        return Some(v as f64);
    }
    if surface.is_empty() || numeric_prefix(surface) != surface.len() {
        return None;
    }
    let cleaned: String = surface.chars().filter(|&c| c != ',' && c != '%').collect();
    cleaned.parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn extract_numbers(tokens: &[Token]) -> Vec<NumberMention> {
    tokens
        .iter()
        .enumerate()
        .filter_map(|(i, t)| {
            parse_number(&t.surface).map(|value| NumberMention { token_index: i, value, surface: t.surface.clone() })
        })
        .collect()
}
