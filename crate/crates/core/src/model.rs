//! Full model: encoder, evidence detection and fusion, graph reasoning and
//! the answer heads, plus per-instance example preparation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, FragmentLevel, QAInstance};
use crate::encoder::{EncoderError, GruEncoder, Layout, SequenceEncoder, Vocab};
use crate::evidence::{detect, detector_spec, fuse, question_summary, token_distribution, Combiner, EvidenceError};
use crate::graph::{build_graph, graph_spec, node_weights, reason_and_fuse, HeteroGraph};
use crate::nn::{ones, ParamSpec};
use crate::numerics::{Matrix, NumericsError, ParameterStore, Real, Tape, Var};
use crate::predictors::{predictor_spec, run_heads, HeadOutputs, SignGating};
use crate::supervision::{instance_numbers, supervise_with, SupervisionBundle};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{query_id}: question of {question} tokens leaves no room for the passage within {max} positions")]
    QuestionTooLong { query_id: String, question: usize, max: usize },
    #[error("{0}: empty passage")]
    EmptyPassage(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Architecture and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub max_len: usize,
    pub encoder_layers: usize,
    pub reasoning_steps: usize,
    pub combiner: Combiner,
    pub use_graph: bool,
    pub use_evidence: bool,
    pub sign_gating: SignGating,
}

impl ModelConfig {
    pub fn encoder(&self) -> GruEncoder {
        GruEncoder { vocab_size: self.vocab_size, hidden: self.hidden_size, max_len: self.max_len, layers: self.encoder_layers }
    }

    pub fn param_spec(&self) -> ParamSpec {
        let d = self.hidden_size;
        let mut spec = self.encoder().param_spec();
        detector_spec(&mut spec, d);
        graph_spec(&mut spec, d);
        predictor_spec(&mut spec, d);
        spec
    }

    pub fn init_store<T: Real>(&self, seed: u64) -> Result<ParameterStore<T>, NumericsError> {
        let mut store = ParameterStore::new(seed);
        store.init_parameters(&self.param_spec())?;
        Ok(store)
    }
}

/// An instance with everything the forward pass and the losses need.
#[derive(Clone, Debug)]
pub struct Example {
    /// Passage truncated to fit the sequence budget.
    pub doc: Document,
    pub qa: QAInstance,
    pub layout: Layout,
    pub ids: Vec<usize>,
    pub numeral: Vec<bool>,
    pub graph: HeteroGraph,
    pub supervision: SupervisionBundle,
    /// Question numbers then passage numbers.
    pub numbers: Vec<f64>,
    /// Sequence position of each entry of `numbers`.
    pub number_positions: Vec<usize>,
}

impl Example {
    pub fn prepare(
        doc: &Document,
        qa: &QAInstance,
        vocab: &Vocab,
        max_len: usize,
        max_terms: usize,
        cap: usize,
    ) -> Result<Self, ModelError> {
        let q = qa.question_tokens.len();
        if q + 4 > max_len {
            return Err(ModelError::QuestionTooLong { query_id: qa.query_id.clone(), question: q, max: max_len });
        }
        let doc = doc.truncated(max_len - q - 3);
        if doc.tokens.is_empty() {
            return Err(ModelError::EmptyPassage(qa.query_id.clone()));
        }
        let layout = Layout::new(q, doc.tokens.len());
        let (ids, numeral) = layout.inputs(vocab, &qa.question_tokens, &doc.tokens);
        let graph = build_graph(&doc, qa);
        let supervision = supervise_with(&doc, qa, max_terms, cap);
        let numbers = instance_numbers(&doc, qa);
        let number_positions = qa
            .question_numbers
            .iter()
            .map(|n| layout.question.start + n.token_index)
            .chain(doc.numbers.iter().map(|n| layout.passage.start + n.token_index))
            .collect();
        Ok(Self { doc, qa: qa.clone(), layout, ids, numeral, graph, supervision, numbers, number_positions })
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub p_sentence: Var,
    pub p_clause: Var,
    /// Token evidence distribution from the detectors.
    pub p_seq: Var,
    /// Distribution actually used for gating (ones when evidence is off).
    pub p_gate: Var,
    pub heads: HeadOutputs,
}

fn label_column<T: Real>(tape: &mut Tape<T>, labels: &[bool]) -> Var {
    tape.constant(Matrix::column_vector(labels.iter().map(|&l| if l { T::one() } else { T::zero() }).collect()))
}

/// Run the model on one example. With `gold_gate` the distant labels
/// replace the detector outputs in the gating distribution.
pub fn forward<T: Real>(
    cfg: &ModelConfig,
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    ex: &Example,
    gold_gate: bool,
) -> Result<Forward, ModelError> {
    let layout = &ex.layout;
    let enc = cfg.encoder().encode(tape, store, layout, &ex.ids, &ex.numeral)?;
    let s_q = question_summary(tape, store, enc.h, layout)?;
    let p_sentence = detect(tape, store, FragmentLevel::Sentence, enc.h, layout, &ex.doc.sentences, s_q)?;
    let p_clause = detect(tape, store, FragmentLevel::Clause, enc.h, layout, &ex.doc.clauses, s_q)?;
    let p_seq = token_distribution(tape, p_sentence, p_clause, &ex.doc, layout, cfg.combiner)?;
    let p_gate = if !cfg.use_evidence {
        ones(tape, layout.len, 1)
    } else if gold_gate {
        let ls = label_column(tape, &ex.supervision.labels.sentence_labels);
        let lc = label_column(tape, &ex.supervision.labels.clause_labels);
        token_distribution(tape, ls, lc, &ex.doc, layout, cfg.combiner)?
    } else {
        p_seq
    };
    let h_ed = fuse(tape, store, enc.h, p_gate)?;
    let weights = node_weights(tape, &ex.graph, layout, p_gate, p_sentence, p_clause)?;
    let h_erg = reason_and_fuse(tape, store, &ex.graph, layout, h_ed, weights, cfg.reasoning_steps, cfg.use_graph)?;
    let heads = run_heads(tape, store, h_erg, p_gate, layout, &ex.number_positions, cfg.sign_gating)?;
    Ok(Forward { p_sentence, p_clause, p_seq, p_gate, heads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AnswerSpec;
    use crate::predictors::PredictionResult;
    use crate::test_support::{CENSUS_PASSAGE, CENSUS_QUESTION};

    fn config(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            hidden_size: 8,
            max_len: 400,
            encoder_layers: 1,
            reasoning_steps: 2,
            combiner: Combiner::Mean,
            use_graph: true,
            use_evidence: true,
            sign_gating: SignGating::Multiply,
        }
    }

    fn census() -> (Document, QAInstance, Vocab) {
        let doc = Document::new("p", CENSUS_PASSAGE);
        let qa = QAInstance::new("q", CENSUS_QUESTION, AnswerSpec::Number { value: 93.1, text: "93.1".into() });
        let vocab = Vocab::build([doc.tokens.as_slice(), qa.question_tokens.as_slice()], 1);
        (doc, qa, vocab)
    }

    #[test]
    fn prepared_positions_point_at_numbers() {
        let (doc, qa, vocab) = census();
        let ex = Example::prepare(&doc, &qa, &vocab, 400, 3, 64).unwrap();
        assert_eq!(ex.numbers.len(), ex.number_positions.len());
        for (&pos, &v) in ex.number_positions.iter().zip(&ex.numbers) {
            let tok = &ex.doc.tokens[pos - ex.layout.passage.start];
            assert_eq!(crate::corpus::parse_number(&tok.surface), Some(v));
        }
        assert!(ex.supervision.annotations.is_trainable());
    }

    #[test]
    fn truncation_keeps_the_question() {
        let (doc, qa, vocab) = census();
        let ex = Example::prepare(&doc, &qa, &vocab, 60, 3, 64).unwrap();
        assert_eq!(ex.layout.len, 60);
        assert_eq!(ex.layout.question.len(), qa.question_tokens.len());
        assert!(Example::prepare(&doc, &qa, &vocab, qa.question_tokens.len() + 3, 3, 64).is_err());
    }

    #[test]
    fn forward_produces_valid_distributions() {
        let (doc, qa, vocab) = census();
        let cfg = config(vocab.len());
        let ex = Example::prepare(&doc, &qa, &vocab, cfg.max_len, 3, 64).unwrap();
        let store = cfg.init_store::<f64>(3).unwrap();
        for (use_graph, use_evidence) in [(true, true), (false, true), (true, false)] {
            let cfg = ModelConfig { use_graph, use_evidence, ..cfg.clone() };
            let mut tape = Tape::new();
            let f = forward(&cfg, &mut tape, &store, &ex, false).unwrap();
            let pred = PredictionResult::read(&tape, &f.heads, &ex.layout);
            assert!((pred.type_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(pred.sign_probs.len(), ex.numbers.len());
            assert_eq!(pred.bio_probs.len(), ex.layout.len);
            assert_eq!(tape.value(f.p_sentence).rows(), ex.doc.sentences.len());
            let gate = tape.value(f.p_gate).data().to_vec();
            if !use_evidence {
                assert!(gate.iter().all(|&g| g == 1.0));
            }
        }
    }
}
