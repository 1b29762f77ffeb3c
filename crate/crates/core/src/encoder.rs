//! Contextual token encoding of `[CLS] question [SEP] passage [SEP]` with a
//! small trainable reference encoder.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Token;
use crate::nn::{bigru, bigru_spec, ParamSpec};
use crate::numerics::{Matrix, NumericsError, ParameterStore, Real, Tape, Var};

pub const UNK: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(
        "input of {len} positions exceeds the maximum of {max}; truncate the passage tail (the question is never truncated)"
    )]
    TooLong { len: usize, max: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

fn is_numeral(surface: &str) -> bool {
    surface.chars().any(|c| c.is_ascii_digit())
}

/// Lowercased word vocabulary. Tokens containing digits always map to the
/// unknown id and are flagged for the number-marker embedding instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a [Token]>, min_count: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for tokens in texts {
            for t in tokens {
                if !is_numeral(&t.surface) {
                    *counts.entry(t.surface.to_lowercase()).or_default() += 1;
                }
            }
        }
        let mut words = vec!["[UNK]".to_string(), "[CLS]".to_string(), "[SEP]".to_string()];
        words.extend(counts.into_iter().filter(|(_, c)| *c >= min_count).map(|(w, _)| w));
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    /// Restore the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, surface: &str) -> usize {
        if is_numeral(surface) {
            return UNK;
        }
        self.index.get(&surface.to_lowercase()).copied().unwrap_or(UNK)
    }
}

/// Position bookkeeping for one encoded `[CLS] Q [SEP] P [SEP]` sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub question: Range<usize>,
    pub passage: Range<usize>,
    pub len: usize,
}

impl Layout {
    pub fn new(question_len: usize, passage_len: usize) -> Self {
        let question = 1..1 + question_len;
        let passage = question.end + 1..question.end + 1 + passage_len;
        Self { len: passage.end + 1, question, passage }
    }

    pub fn separator(&self) -> usize {
        self.question.end
    }

    pub fn last(&self) -> usize {
        self.len - 1
    }

    /// Token ids and number-marker flags for the full sequence.
    pub fn inputs(&self, vocab: &Vocab, question: &[Token], passage: &[Token]) -> (Vec<usize>, Vec<bool>) {
        let mut ids = Vec::with_capacity(self.len);
        let mut numeral = Vec::with_capacity(self.len);
        ids.push(CLS);
        numeral.push(false);
        for t in question {
            ids.push(vocab.id(&t.surface));
            numeral.push(is_numeral(&t.surface));
        }
        ids.push(SEP);
        numeral.push(false);
        for t in passage {
            ids.push(vocab.id(&t.surface));
            numeral.push(is_numeral(&t.surface));
        }
        ids.push(SEP);
        numeral.push(false);
        (ids, numeral)
    }
}

/// Contextual representations with their layout.
#[derive(Clone, Debug)]
pub struct EncodedSequence {
    /// L×d_h with L = |Q| + |P| + 3.
    pub h: Var,
    pub layout: Layout,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.layout.len
    }

    pub fn is_empty(&self) -> bool {
        self.layout.len == 0
    }
}

/// Anything that maps token ids to contextual rows of width `hidden()`.
pub trait SequenceEncoder {
    fn hidden(&self) -> usize;

    fn param_spec(&self) -> ParamSpec;

    fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        layout: &Layout,
        ids: &[usize],
        numeral: &[bool],
    ) -> Result<EncodedSequence, EncoderError>;
}

/// Token + learned position embeddings (plus a shared marker on numerals)
/// followed by `layers` bidirectional GRU layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruEncoder {
    pub vocab_size: usize,
    pub hidden: usize,
    pub max_len: usize,
    pub layers: usize,
}

impl SequenceEncoder for GruEncoder {
    fn hidden(&self) -> usize {
        self.hidden
    }

    fn param_spec(&self) -> ParamSpec {
        let d = self.hidden;
        let mut spec = vec![
            ("encoder.embed".to_string(), vec![self.vocab_size, d]),
            ("encoder.position".to_string(), vec![self.max_len, d]),
            ("encoder.number_marker".to_string(), vec![1, d]),
        ];
        for l in 0..self.layers {
            bigru_spec(&mut spec, &format!("encoder.layer{l}"), d, d / 2);
        }
        spec
    }

    fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParameterStore<T>,
        layout: &Layout,
        ids: &[usize],
        numeral: &[bool],
    ) -> Result<EncodedSequence, EncoderError> {
        let len = ids.len();
        if len > self.max_len {
            return Err(EncoderError::TooLong { len, max: self.max_len });
        }
        let embed = tape.param(store, "encoder.embed")?;
        let position = tape.param(store, "encoder.position")?;
        let marker = tape.param(store, "encoder.number_marker")?;
        let words = tape.gather_rows(embed, ids.to_vec())?;
        let pos = tape.gather_rows(position, (0..len).collect())?;
        let mut x = tape.add(words, pos)?;
        if numeral.iter().any(|&n| n) {
            let flags = tape.constant(Matrix::column_vector(
                numeral.iter().map(|&n| if n { T::one() } else { T::zero() }).collect(),
            ));
            let marks = tape.matmul(flags, marker)?;
            x = tape.add(x, marks)?;
        }
        for l in 0..self.layers {
            x = bigru(tape, store, &format!("encoder.layer{l}"), x)?;
        }
        Ok(EncodedSequence { h: x, layout: layout.clone() })
    }
}
