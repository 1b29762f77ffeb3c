//! Layer building blocks shared by the model modules.

use crate::numerics::{Matrix, NumericsError, ParameterStore, Real, Tape, Var};

pub type ParamSpec = Vec<(String, Vec<usize>)>;

/// `x · W + b` with parameters `{name}.w` (in×out) and `{name}.b`.
pub fn linear<T: Real>(tape: &mut Tape<T>, store: &ParameterStore<T>, name: &str, x: Var) -> Result<Var, NumericsError> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

pub fn linear_spec(spec: &mut ParamSpec, name: &str, input: usize, output: usize) {
    spec.push((format!("{name}.w"), vec![input, output]));
    spec.push((format!("{name}.b"), vec![output]));
}

/// Two affine layers with a ReLU between them.
pub fn ffn<T: Real>(tape: &mut Tape<T>, store: &ParameterStore<T>, name: &str, x: Var) -> Result<Var, NumericsError> {
    let h = linear(tape, store, &format!("{name}.l1"), x)?;
    let h = tape.relu(h)?;
    linear(tape, store, &format!("{name}.l2"), h)
}

pub fn ffn_spec(spec: &mut ParamSpec, name: &str, input: usize, hidden: usize, output: usize) {
    linear_spec(spec, &format!("{name}.l1"), input, hidden);
    linear_spec(spec, &format!("{name}.l2"), hidden, output);
}

pub fn layer_norm<T: Real>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    name: &str,
    x: Var,
) -> Result<Var, NumericsError> {
    let g = tape.param(store, &format!("{name}.gain"))?;
    let b = tape.param(store, &format!("{name}.bias"))?;
    tape.layer_norm(x, g, b)
}

pub fn layer_norm_spec(spec: &mut ParamSpec, name: &str, dim: usize) {
    spec.push((format!("{name}.gain"), vec![dim]));
    spec.push((format!("{name}.bias"), vec![dim]));
}

/// One GRU direction over the rows of `x` (L×in), returning L×hidden.
fn gru_pass<T: Real>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    name: &str,
    x: Var,
    reverse: bool,
) -> Result<Var, NumericsError> {
    let len = tape.value(x).rows();
    let gx = linear(tape, store, &format!("{name}.input"), x)?;
    let w_h = tape.param(store, &format!("{name}.w_h"))?;
    let b_h = tape.param(store, &format!("{name}.b_h"))?;
    let hidden = tape.value(w_h).rows();
    let mut h = tape.constant(Matrix::zeros(1, hidden));
    let mut outs = vec![h; len];
    let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
    for t in order {
        let g = tape.gather_rows(gx, vec![t])?;
        h = tape.gru_cell(g, h, w_h, b_h)?;
        outs[t] = h;
    }
    tape.concat_rows(&outs)
}

/// Bidirectional GRU; output width is twice `hidden`.
pub fn bigru<T: Real>(tape: &mut Tape<T>, store: &ParameterStore<T>, name: &str, x: Var) -> Result<Var, NumericsError> {
    let f = gru_pass(tape, store, &format!("{name}.fwd"), x, false)?;
    let b = gru_pass(tape, store, &format!("{name}.bwd"), x, true)?;
    tape.concat_cols(&[f, b])
}

pub fn bigru_spec(spec: &mut ParamSpec, name: &str, input: usize, hidden: usize) {
    for dir in ["fwd", "bwd"] {
        linear_spec(spec, &format!("{name}.{dir}.input"), input, 3 * hidden);
        spec.push((format!("{name}.{dir}.w_h"), vec![hidden, 3 * hidden]));
        spec.push((format!("{name}.{dir}.b_h"), vec![3 * hidden]));
    }
}

/// k×1 column holding `s` (1×1) in every row.
pub fn repeat_scalar<T: Real>(tape: &mut Tape<T>, s: Var, k: usize) -> Result<Var, NumericsError> {
    tape.gather_rows(s, vec![0; k])
}

pub fn ones<T: Real>(tape: &mut Tape<T>, rows: usize, cols: usize) -> Var {
    tape.constant(Matrix::filled(rows, cols, T::one()))
}
