//! Finite-difference check of the full composed training loss.

use crate::corpus::{AnswerSpec, Document, QAInstance};
use crate::encoder::Vocab;
use crate::evidence::Combiner;
use crate::model::{Example, ModelConfig, ModelError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{finite_difference_check, GradCheckReport, Matrix, NumericsError, ParameterStore, Primitive, Tape, Var};
use crate::predictors::SignGating;
use crate::training::{instance_loss, TrainConfig};

pub const FIXTURE_PASSAGE: &str = "The city had 5 parks and 2 lakes . Later , 3 new schools opened .";

/// Instances over the fixture passage that between them exercise every
/// answer head.
pub fn fixture_instances() -> (Document, Vec<QAInstance>) {
    let doc = Document::new("fixture", FIXTURE_PASSAGE);
    let qs = vec![
        QAInstance::new("fixture-arith", "How many more parks than lakes ?", AnswerSpec::Number { value: 3.0, text: "3".into() }),
        QAInstance::new("fixture-multi", "Which places did the city have ?", AnswerSpec::Spans(vec!["parks".into(), "lakes".into()])),
        QAInstance::new("fixture-question", "Parks or schools ?", AnswerSpec::Spans(vec!["schools".into()])),
    ];
    (doc, qs)
}

pub fn fixture_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        hidden_size: 4,
        max_len: 32,
        encoder_layers: 1,
        reasoning_steps: 3,
        combiner: Combiner::Mean,
        use_graph: true,
        use_evidence: true,
        sign_gating: SignGating::Multiply,
    }
}

pub struct FullGradCheck {
    pub report: GradCheckReport,
    pub parameters: usize,
    pub tokens: usize,
}

/// Gradient check of the summed training loss over the fixture instances
/// at 64-bit precision.
pub fn full_model_gradcheck(seed: u64, eps: f64) -> Result<FullGradCheck, ModelError> {
    let (doc, qs) = fixture_instances();
    let vocab = Vocab::build(std::iter::once(doc.tokens.as_slice()).chain(qs.iter().map(|q| q.question_tokens.as_slice())), 1);
    let model = fixture_config(vocab.len());
    let cfg = TrainConfig { hidden_size: model.hidden_size, max_len: model.max_len, ..TrainConfig::default() };
    let examples: Vec<Example> = qs
        .iter()
        .map(|q| Example::prepare(&doc, q, &vocab, model.max_len, cfg.max_expr_terms, cfg.expression_cap))
        .collect::<Result<_, _>>()?;
    let store: ParameterStore<f64> = model.init_store(seed)?;
    let report = finite_difference_check(
        |tape, s| {
            let mut parts = Vec::new();
            for ex in &examples {
                let (l, _) = instance_loss(&model, &cfg, tape, s, ex).map_err(|e| match e {
                    ModelError::Numerics(n) => n,
                    other => NumericsError::Shape { op: "model", detail: other.to_string() },
                })?;
                parts.push(l);
            }
            let all = tape.concat_rows(&parts)?;
            tape.sum(all)
        },
        &store,
        eps,
    )?;
    Ok(FullGradCheck { report, parameters: store.num_scalars(), tokens: doc.tokens.len() + qs[0].question_tokens.len() })
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Check one primitive: inputs become parameters, the loss is a fixed random
/// projection of the output.
fn check_primitive(prim: &Primitive, inputs: &[Matrix<f64>], rng: &mut ChaCha8Rng) -> Result<f64, NumericsError> {
    let mut store = ParameterStore::new(0);
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("in{i}")).collect();
    for (n, m) in names.iter().zip(inputs) {
        store.insert(n, vec![m.rows(), m.cols()], m.clone())?;
    }
    let probe = {
        let mut t = Tape::new();
        let vars: Vec<Var> = names.iter().map(|n| t.param(&store, n)).collect::<Result<_, _>>()?;
        let out = t.apply(prim.clone(), &vars)?;
        let (r, c) = t.value(out).shape();
        random(rng, r, c)
    };
    let report = finite_difference_check(
        |t, s| {
            let vars: Vec<Var> = names.iter().map(|n| t.param(s, n)).collect::<Result<_, _>>()?;
            let out = t.apply(prim.clone(), &vars)?;
            let w = t.constant(probe.clone());
            let prod = t.mul(out, w)?;
            t.sum(prod)
        },
        &store,
        1e-5,
    )?;
    Ok(report.max_relative_error)
}

/// Max relative finite-difference error of every primitive on random inputs.
pub fn primitive_gradchecks(seed: u64) -> Result<Vec<(&'static str, f64)>, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |rows, cols| random(&mut rng, rows, cols);
    let positive = Matrix::from_f64(2, 3, &[0.2, 0.5, 0.9, 0.3, 0.7, 0.1]);
    let cases: Vec<(Primitive, Vec<Matrix<f64>>)> = vec![
        (Primitive::MatMul, vec![r(3, 4), r(4, 2)]),
        (Primitive::Add, vec![r(3, 4), r(3, 4)]),
        (Primitive::Add, vec![r(3, 4), r(1, 4)]),
        (Primitive::Multiply, vec![r(3, 4), r(3, 4)]),
        (Primitive::Multiply, vec![r(3, 4), r(1, 4)]),
        (Primitive::Multiply, vec![r(3, 4), r(3, 1)]),
        (Primitive::ConcatRows, vec![r(2, 3), r(1, 3), r(3, 3)]),
        (Primitive::ConcatCols, vec![r(2, 3), r(2, 1)]),
        (Primitive::Relu, vec![Matrix::from_f64(2, 2, &[0.5, -0.3, 1.2, -2.0])]),
        (Primitive::Sigmoid, vec![r(2, 3)]),
        (Primitive::Tanh, vec![r(2, 3)]),
        (Primitive::Softmax, vec![r(3, 4)]),
        (Primitive::SoftmaxColumns, vec![r(3, 4)]),
        (Primitive::MaskedSoftmax(vec![true, false, true, true]), vec![r(2, 4)]),
        (Primitive::LayerNorm, vec![r(3, 5), r(1, 5), r(1, 5)]),
        (Primitive::GruCell, vec![r(2, 9), r(2, 3), r(3, 9), r(1, 9)]),
        (Primitive::WeightedSum, vec![r(3, 4), r(3, 4)]),
        (Primitive::WeightedSum, vec![r(3, 1), r(3, 4)]),
        (Primitive::GatherRows(vec![2, 0, 2]), vec![r(3, 2)]),
        (Primitive::ScatterRows { index: vec![1, 1, 0], rows: 3 }, vec![r(3, 2)]),
        (Primitive::Mean, vec![r(2, 3)]),
        (Primitive::Sum, vec![r(2, 3)]),
        (Primitive::CrossEntropy { targets: vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0] }, vec![positive.clone()]),
        (Primitive::LogSumExp(None), vec![r(3, 4)]),
        (Primitive::LogSumExp(Some(vec![false, true, true, false])), vec![r(3, 4)]),
        (Primitive::Pick(vec![(0, 1), (2, 3), (0, 1)]), vec![r(3, 4)]),
        (Primitive::Affine { scale: -1.5, shift: 0.25 }, vec![r(2, 2)]),
        (Primitive::Maximum, vec![Matrix::from_f64(1, 3, &[0.1, 2.0, -1.0]), Matrix::from_f64(1, 3, &[0.5, 1.0, -3.0])]),
        (Primitive::LogClamped { floor: 1e-7 }, vec![positive]),
        (Primitive::Transpose, vec![r(2, 5)]),
    ];
    cases.iter().map(|(p, inputs)| Ok((p.name(), check_primitive(p, inputs, &mut rng)?))).collect()
}
