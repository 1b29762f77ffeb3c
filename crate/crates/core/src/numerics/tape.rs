//! Reverse-mode differentiation over a linear record of primitive
//! applications.
//!
//! Every forward computation appends a node to a [`Tape`]. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! accumulates exact gradients for every node that depends on a bound
//! parameter. Nodes that only depend on constants are skipped.

use std::collections::{BTreeMap, HashMap};

use super::matrix::{Matrix, Real};
use super::params::ParameterStore;
use super::NumericsError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive inventory. Attributes travel with the variant.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `a (n×k) · b (k×m)`.
    MatMul,
    /// `a + b`; `b` is either the same shape as `a` or a `1×cols` row broadcast.
    Add,
    /// Elementwise `a ⊙ b`; `b` same shape, `1×cols` row broadcast or `rows×1` column broadcast.
    Multiply,
    /// Stack inputs vertically (all inputs share `cols`).
    ConcatRows,
    /// Join inputs horizontally (all inputs share `rows`).
    ConcatCols,
    Relu,
    Sigmoid,
    Tanh,
    /// Softmax within each row.
    Softmax,
    /// Softmax within each column (attention over rows, one distribution per feature).
    SoftmaxColumns,
    /// Row-wise softmax restricted to columns with `mask[c] == true`; masked entries are exactly 0.
    MaskedSoftmax(Vec<bool>),
    /// Row-wise layer normalization with learned gain and bias (inputs `x`, `gain`, `bias`), ε = 1e-5.
    LayerNorm,
    /// One GRU step (inputs `gx` n×3h input projection, `h` n×h, `w_h` h×3h, `b_h` 1×3h).
    GruCell,
    /// `Σ_i w_i ⊙ x_i` over rows; `w` is n×d (per-feature weights) or n×1.
    WeightedSum,
    GatherRows(Vec<usize>),
    /// Sum rows of the input into `rows` output rows at the given indices.
    ScatterRows { index: Vec<usize>, rows: usize },
    /// Mean of all entries, as a 1×1.
    Mean,
    /// Sum of all entries, as a 1×1.
    Sum,
    /// Mean binary cross-entropy of probabilities against fixed targets,
    /// probabilities clamped to `[1e-7, 1 - 1e-7]`.
    CrossEntropy { targets: Vec<f64> },
    /// Row-wise log-sum-exp (n×1), optionally restricted to masked-in columns.
    LogSumExp(Option<Vec<bool>>),
    /// Collect the listed `(row, col)` entries into a k×1 column.
    Pick(Vec<(usize, usize)>),
    /// `scale · x + shift`.
    Affine { scale: f64, shift: f64 },
    /// Elementwise maximum of two same-shape inputs.
    Maximum,
    /// `ln(max(x, floor))`.
    LogClamped { floor: f64 },
    Transpose,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Multiply => "multiply",
            Primitive::ConcatRows => "concat_rows",
            Primitive::ConcatCols => "concat_cols",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Softmax => "softmax",
            Primitive::SoftmaxColumns => "softmax_columns",
            Primitive::MaskedSoftmax(_) => "masked_softmax",
            Primitive::LayerNorm => "layer_norm",
            Primitive::GruCell => "gru_cell",
            Primitive::WeightedSum => "weighted_sum",
            Primitive::GatherRows(_) => "gather_rows",
            Primitive::ScatterRows { .. } => "scatter_rows",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::CrossEntropy { .. } => "cross_entropy",
            Primitive::LogSumExp(_) => "logsumexp",
            Primitive::Pick(_) => "pick",
            Primitive::Affine { .. } => "affine",
            Primitive::Maximum => "maximum",
            Primitive::LogClamped { .. } => "log_clamped",
            Primitive::Transpose => "transpose",
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const PROB_CLAMP: f64 = 1e-7;

struct Node<T> {
    value: Matrix<T>,
    prim: Option<Primitive>,
    inputs: Vec<Var>,
    aux: Vec<T>,
    needs_grad: bool,
    param: Option<String>,
}

/// Single-writer computation record.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    bound: HashMap<String, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.get(0, 0)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, None, Vec::new(), Vec::new(), false, None)
    }

    /// A free leaf that receives a gradient (used by gradient checks on single primitives).
    pub fn variable(&mut self, value: Matrix<T>) -> Var {
        self.push(value, None, Vec::new(), Vec::new(), true, None)
    }

    /// Bind a named parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var, NumericsError> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))?
            .clone();
        let v = self.push(value, None, Vec::new(), Vec::new(), true, Some(name.to_string()));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn push(
        &mut self,
        value: Matrix<T>,
        prim: Option<Primitive>,
        inputs: Vec<Var>,
        aux: Vec<T>,
        needs_grad: bool,
        param: Option<String>,
    ) -> Var {
        self.nodes.push(Node { value, prim, inputs, aux, needs_grad, param });
        Var(self.nodes.len() - 1)
    }

    /// Apply a primitive, recording it for the backward pass.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var, NumericsError> {
        let values: Vec<&Matrix<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (out, aux) = forward(&prim, &values)?;
        if !out.all_finite() {
            return Err(NumericsError::NonFinite { op: prim.name() });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(out, Some(prim), inputs.to_vec(), aux, needs_grad, None))
    }

    // Typed conveniences over `apply`.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::Multiply, &[a, b])
    }
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        self.apply(Primitive::ConcatRows, parts)
    }
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        self.apply(Primitive::ConcatCols, parts)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::Relu, &[x])
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::Sigmoid, &[x])
    }
    pub fn tanh(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::Tanh, &[x])
    }
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::Softmax, &[x])
    }
    pub fn softmax_columns(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::SoftmaxColumns, &[x])
    }
    pub fn masked_softmax(&mut self, x: Var, mask: Vec<bool>) -> Result<Var, NumericsError> {
        self.apply(Primitive::MaskedSoftmax(mask), &[x])
    }
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::LayerNorm, &[x, gain, bias])
    }
    pub fn gru_cell(&mut self, gx: Var, h: Var, w_h: Var, b_h: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::GruCell, &[gx, h, w_h, b_h])
    }
    pub fn weighted_sum(&mut self, w: Var, x: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::WeightedSum, &[w, x])
    }
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var, NumericsError> {
        self.apply(Primitive::GatherRows(index), &[x])
    }
    pub fn scatter_rows(&mut self, x: Var, index: Vec<usize>, rows: usize) -> Result<Var, NumericsError> {
        self.apply(Primitive::ScatterRows { index, rows }, &[x])
    }
    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::Mean, &[x])
    }
    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::Sum, &[x])
    }
    pub fn cross_entropy(&mut self, p: Var, targets: Vec<f64>) -> Result<Var, NumericsError> {
        self.apply(Primitive::CrossEntropy { targets }, &[p])
    }
    pub fn logsumexp(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var, NumericsError> {
        self.apply(Primitive::LogSumExp(mask), &[x])
    }
    pub fn pick(&mut self, x: Var, entries: Vec<(usize, usize)>) -> Result<Var, NumericsError> {
        self.apply(Primitive::Pick(entries), &[x])
    }
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var, NumericsError> {
        self.apply(Primitive::Affine { scale, shift }, &[x])
    }
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::Maximum, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.apply(Primitive::Transpose, &[x])
    }

    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Result<Var, NumericsError> {
        self.apply(Primitive::LogClamped { floor }, &[x])
    }

    /// Accumulate gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, NumericsError> {
        let shape = self.nodes[root.0].value.shape();
        if shape != (1, 1) {
            return Err(NumericsError::Shape {
                op: "backward",
                detail: format!("root must be 1x1, got {}x{}", shape.0, shape.1),
            });
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Matrix::scalar(T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(prim) = &node.prim else { continue };
            let Some(dout) = grads[i].take() else { continue };
            let inputs: Vec<&Matrix<T>> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let wanted: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].needs_grad).collect();
            let local = backward(prim, &inputs, &node.value, &node.aux, &dout, &wanted);
            for ((input, g), want) in node.inputs.iter().zip(local).zip(wanted) {
                if !want {
                    continue;
                }
                if let Some(g) = g {
                    match &mut grads[input.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[i] = Some(dout);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of all bound parameters, keyed (and therefore ordered) by name.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Matrix<T>> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            let g = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(self.nodes[v.0].value.rows(), self.nodes[v.0].value.cols()));
            out.insert(name.clone(), g);
        }
        out
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.as_deref().map(|name| (name, Var(i))))
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn transposed<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(m.cols(), m.rows());
    for r in 0..m.rows() {
        for (c, &v) in m.row(r).iter().enumerate() {
            out.set(c, r, v);
        }
    }
    out
}

fn shape_err<T: Real>(prim: &Primitive, inputs: &[&Matrix<T>], detail: &str) -> NumericsError {
    let shapes: Vec<String> = inputs.iter().map(|m| format!("{}x{}", m.rows(), m.cols())).collect();
    NumericsError::Shape { op: prim.name(), detail: format!("{detail}; input shapes [{}]", shapes.join(", ")) }
}

fn arity<T: Real>(prim: &Primitive, inputs: &[&Matrix<T>], n: usize) -> Result<(), NumericsError> {
    if inputs.len() != n {
        return Err(shape_err(prim, inputs, &format!("expected {n} inputs")));
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum Bcast {
    Same,
    Row,
    Col,
}

fn broadcast_kind(a: &Matrix<impl Real>, b: &Matrix<impl Real>, allow_col: bool) -> Option<Bcast> {
    if a.shape() == b.shape() {
        Some(Bcast::Same)
    } else if b.rows() == 1 && b.cols() == a.cols() {
        Some(Bcast::Row)
    } else if allow_col && b.cols() == 1 && b.rows() == a.rows() {
        Some(Bcast::Col)
    } else {
        None
    }
}

#[inline]
fn bval<T: Real>(b: &Matrix<T>, kind: Bcast, r: usize, c: usize) -> T {
    match kind {
        Bcast::Same => b.get(r, c),
        Bcast::Row => b.get(0, c),
        Bcast::Col => b.get(r, 0),
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn forward<T: Real>(prim: &Primitive, inputs: &[&Matrix<T>]) -> Result<(Matrix<T>, Vec<T>), NumericsError> {
    let none = Vec::new;
    match prim {
        Primitive::MatMul => {
            arity(prim, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.cols() != b.rows() {
                return Err(shape_err(prim, inputs, "inner dimensions differ"));
            }
            Ok((a.matmul(b), none()))
        }
        Primitive::Add | Primitive::Multiply => {
            arity(prim, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let is_mul = matches!(prim, Primitive::Multiply);
            let kind = broadcast_kind(a, b, is_mul).ok_or_else(|| shape_err(prim, inputs, "incompatible shapes"))?;
            let mut out = Matrix::zeros(a.rows(), a.cols());
            for r in 0..a.rows() {
                for c in 0..a.cols() {
                    let y = if is_mul { a.get(r, c) * bval(b, kind, r, c) } else { a.get(r, c) + bval(b, kind, r, c) };
                    out.set(r, c, y);
                }
            }
            Ok((out, none()))
        }
        Primitive::ConcatRows => {
            if inputs.is_empty() {
                return Err(shape_err(prim, inputs, "no inputs"));
            }
            let cols = inputs[0].cols();
            if inputs.iter().any(|m| m.cols() != cols) {
                return Err(shape_err(prim, inputs, "column counts differ"));
            }
            let rows: usize = inputs.iter().map(|m| m.rows()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for m in inputs {
                data.extend_from_slice(m.data());
            }
            Ok((Matrix::from_vec(rows, cols, data), none()))
        }
        Primitive::ConcatCols => {
            if inputs.is_empty() {
                return Err(shape_err(prim, inputs, "no inputs"));
            }
            let rows = inputs[0].rows();
            if inputs.iter().any(|m| m.rows() != rows) {
                return Err(shape_err(prim, inputs, "row counts differ"));
            }
            let cols: usize = inputs.iter().map(|m| m.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for m in inputs {
                    data.extend_from_slice(m.row(r));
                }
            }
            Ok((Matrix::from_vec(rows, cols, data), none()))
        }
        Primitive::Relu | Primitive::Sigmoid | Primitive::Tanh => {
            arity(prim, inputs, 1)?;
            let f: fn(T) -> T = match prim {
                Primitive::Relu => |x: T| if x > T::zero() { x } else { T::zero() },
                Primitive::Sigmoid => sigmoid,
                _ => |x: T| x.tanh(),
            };
            Ok((inputs[0].map(f), none()))
        }
        Primitive::Softmax | Primitive::MaskedSoftmax(_) => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            let mask = match prim {
                Primitive::MaskedSoftmax(m) => {
                    if m.len() != x.cols() {
                        return Err(shape_err(prim, inputs, &format!("mask length {} != cols", m.len())));
                    }
                    if !m.iter().any(|&b| b) {
                        return Err(shape_err(prim, inputs, "mask excludes every entry"));
                    }
                    Some(m.as_slice())
                }
                _ => None,
            };
            let mut out = Matrix::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                softmax_slice(x.row(r), mask, out.row_mut(r));
            }
            Ok((out, none()))
        }
        Primitive::SoftmaxColumns => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            if x.rows() == 0 {
                return Err(shape_err(prim, inputs, "empty input"));
            }
            let mut out = Matrix::zeros(x.rows(), x.cols());
            for c in 0..x.cols() {
                let mut m = T::neg_infinity();
                for r in 0..x.rows() {
                    m = m.max(x.get(r, c));
                }
                let mut s = T::zero();
                for r in 0..x.rows() {
                    let e = (x.get(r, c) - m).exp();
                    out.set(r, c, e);
                    s += e;
                }
                for r in 0..x.rows() {
                    out.set(r, c, out.get(r, c) / s);
                }
            }
            Ok((out, none()))
        }
        Primitive::LayerNorm => {
            arity(prim, inputs, 3)?;
            let (x, g, b) = (inputs[0], inputs[1], inputs[2]);
            if g.shape() != (1, x.cols()) || b.shape() != (1, x.cols()) {
                return Err(shape_err(prim, inputs, "gain and bias must be 1 x cols"));
            }
            let d = T::from_usize(x.cols()).unwrap();
            let eps = T::of(LAYER_NORM_EPS);
            let mut out = Matrix::zeros(x.rows(), x.cols());
            // aux: per row [rstd], then xhat row-major
            let mut aux = Vec::with_capacity(x.rows() * (x.cols() + 1));
            let mut xhat_all = Vec::with_capacity(x.len());
            for r in 0..x.rows() {
                let row = x.row(r);
                let mean = row.iter().copied().sum::<T>() / d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
                let rstd = T::one() / (var + eps).sqrt();
                aux.push(rstd);
                for (c, &v) in row.iter().enumerate() {
                    let xh = (v - mean) * rstd;
                    xhat_all.push(xh);
                    out.set(r, c, xh * g.get(0, c) + b.get(0, c));
                }
            }
            aux.extend(xhat_all);
            Ok((out, aux))
        }
        Primitive::GruCell => {
            arity(prim, inputs, 4)?;
            let (gx, h, wh, bh) = (inputs[0], inputs[1], inputs[2], inputs[3]);
            let hid = h.cols();
            let n = h.rows();
            if gx.shape() != (n, 3 * hid) || wh.shape() != (hid, 3 * hid) || bh.shape() != (1, 3 * hid) {
                return Err(shape_err(prim, inputs, "expected gx n x 3h, h n x h, w_h h x 3h, b_h 1 x 3h"));
            }
            let mut gh = h.matmul(wh);
            for r in 0..n {
                for (v, &b) in gh.row_mut(r).iter_mut().zip(bh.row(0)) {
                    *v += b;
                }
            }
            let mut out = Matrix::zeros(n, hid);
            // aux per row: r, z, c, gh_n (4h values)
            let mut aux = Vec::with_capacity(n * 4 * hid);
            for row in 0..n {
                let gxr = gx.row(row);
                let ghr = gh.row(row);
                let hr = h.row(row);
                let mut rs = Vec::with_capacity(hid);
                let mut zs = Vec::with_capacity(hid);
                let mut cs = Vec::with_capacity(hid);
                for j in 0..hid {
                    let r = sigmoid(gxr[j] + ghr[j]);
                    let z = sigmoid(gxr[hid + j] + ghr[hid + j]);
                    let c = (gxr[2 * hid + j] + r * ghr[2 * hid + j]).tanh();
                    out.set(row, j, (T::one() - z) * c + z * hr[j]);
                    rs.push(r);
                    zs.push(z);
                    cs.push(c);
                }
                aux.extend(rs);
                aux.extend(zs);
                aux.extend(cs);
                aux.extend_from_slice(&ghr[2 * hid..]);
            }
            Ok((out, aux))
        }
        Primitive::WeightedSum => {
            arity(prim, inputs, 2)?;
            let (w, x) = (inputs[0], inputs[1]);
            let per_feature = w.shape() == x.shape();
            if !per_feature && w.shape() != (x.rows(), 1) {
                return Err(shape_err(prim, inputs, "weights must be n x d or n x 1"));
            }
            let mut out = Matrix::zeros(1, x.cols());
            for r in 0..x.rows() {
                for c in 0..x.cols() {
                    let wv = if per_feature { w.get(r, c) } else { w.get(r, 0) };
                    let acc = out.get(0, c) + wv * x.get(r, c);
                    out.set(0, c, acc);
                }
            }
            Ok((out, none()))
        }
        Primitive::GatherRows(index) => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            if let Some(&bad) = index.iter().find(|&&i| i >= x.rows()) {
                return Err(shape_err(prim, inputs, &format!("row index {bad} out of range")));
            }
            let mut data = Vec::with_capacity(index.len() * x.cols());
            for &i in index {
                data.extend_from_slice(x.row(i));
            }
            Ok((Matrix::from_vec(index.len(), x.cols(), data), none()))
        }
        Primitive::ScatterRows { index, rows } => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            if index.len() != x.rows() {
                return Err(shape_err(prim, inputs, "index length must equal input rows"));
            }
            if let Some(&bad) = index.iter().find(|&&i| i >= *rows) {
                return Err(shape_err(prim, inputs, &format!("target row {bad} out of range")));
            }
            let mut out = Matrix::zeros(*rows, x.cols());
            for (e, &i) in index.iter().enumerate() {
                for (o, &v) in out.row_mut(i).iter_mut().zip(x.row(e)) {
                    *o += v;
                }
            }
            Ok((out, none()))
        }
        Primitive::Mean | Primitive::Sum => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            if x.is_empty() {
                return Err(shape_err(prim, inputs, "empty input"));
            }
            let s = x.sum();
            let v = if matches!(prim, Primitive::Mean) { s / T::from_usize(x.len()).unwrap() } else { s };
            Ok((Matrix::scalar(v), none()))
        }
        Primitive::CrossEntropy { targets } => {
            arity(prim, inputs, 1)?;
            let p = inputs[0];
            if targets.len() != p.len() || p.is_empty() {
                return Err(shape_err(prim, inputs, &format!("{} targets for {} probabilities", targets.len(), p.len())));
            }
            let lo = T::of(PROB_CLAMP);
            let hi = T::one() - lo;
            let mut s = T::zero();
            for (&pv, &y) in p.data().iter().zip(targets) {
                let pc = pv.max(lo).min(hi);
                let y = T::of(y);
                s += -(y * pc.ln() + (T::one() - y) * (T::one() - pc).ln());
            }
            Ok((Matrix::scalar(s / T::from_usize(p.len()).unwrap()), none()))
        }
        Primitive::LogSumExp(mask) => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            if let Some(m) = mask {
                if m.len() != x.cols() || !m.iter().any(|&b| b) {
                    return Err(shape_err(prim, inputs, "mask must match cols and keep an entry"));
                }
            }
            let mut out = Matrix::zeros(x.rows(), 1);
            for r in 0..x.rows() {
                let row = x.row(r);
                let keep = |c: usize| mask.as_ref().is_none_or(|m| m[c]);
                let mut mx = T::neg_infinity();
                for (c, &v) in row.iter().enumerate() {
                    if keep(c) {
                        mx = mx.max(v);
                    }
                }
                let mut s = T::zero();
                for (c, &v) in row.iter().enumerate() {
                    if keep(c) {
                        s += (v - mx).exp();
                    }
                }
                out.set(r, 0, mx + s.ln());
            }
            Ok((out, none()))
        }
        Primitive::Pick(entries) => {
            arity(prim, inputs, 1)?;
            let x = inputs[0];
            let mut data = Vec::with_capacity(entries.len());
            for &(r, c) in entries {
                if r >= x.rows() || c >= x.cols() {
                    return Err(shape_err(prim, inputs, &format!("entry ({r},{c}) out of range")));
                }
                data.push(x.get(r, c));
            }
            Ok((Matrix::column_vector(data), none()))
        }
        Primitive::Transpose => {
            arity(prim, inputs, 1)?;
            Ok((transposed(inputs[0]), none()))
        }
        Primitive::Affine { scale, shift } => {
            arity(prim, inputs, 1)?;
            let (a, b) = (T::of(*scale), T::of(*shift));
            Ok((inputs[0].map(|x| a * x + b), none()))
        }
        Primitive::Maximum => {
            arity(prim, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(shape_err(prim, inputs, "shapes differ"));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| if x >= y { x } else { y }).collect();
            Ok((Matrix::from_vec(a.rows(), a.cols(), data), none()))
        }
        Primitive::LogClamped { floor } => {
            arity(prim, inputs, 1)?;
            let f = T::of(*floor);
            Ok((inputs[0].map(|x| x.max(f).ln()), none()))
        }
    }
}

fn softmax_slice<T: Real>(x: &[T], mask: Option<&[bool]>, out: &mut [T]) {
    let keep = |c: usize| mask.is_none_or(|m| m[c]);
    let mut mx = T::neg_infinity();
    for (c, &v) in x.iter().enumerate() {
        if keep(c) {
            mx = mx.max(v);
        }
    }
    let mut s = T::zero();
    for (c, &v) in x.iter().enumerate() {
        out[c] = if keep(c) { (v - mx).exp() } else { T::zero() };
        s += out[c];
    }
    for o in out.iter_mut() {
        *o = *o / s;
    }
}

fn backward<T: Real>(
    prim: &Primitive,
    inputs: &[&Matrix<T>],
    out: &Matrix<T>,
    aux: &[T],
    dout: &Matrix<T>,
    wanted: &[bool],
) -> Vec<Option<Matrix<T>>> {
    match prim {
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let da = wanted[0].then(|| {
                let mut g = Matrix::zeros(a.rows(), a.cols());
                dout.matmul_t_into(b, &mut g);
                g
            });
            let db = wanted[1].then(|| {
                let mut g = Matrix::zeros(b.rows(), b.cols());
                a.t_matmul_into(dout, &mut g);
                g
            });
            vec![da, db]
        }
        Primitive::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            let kind = broadcast_kind(a, b, false).unwrap();
            let db = wanted[1].then(|| reduce_broadcast(dout, kind, b));
            vec![Some(dout.clone()), db]
        }
        Primitive::Multiply => {
            let (a, b) = (inputs[0], inputs[1]);
            let kind = broadcast_kind(a, b, true).unwrap();
            let da = wanted[0].then(|| {
                let mut g = Matrix::zeros(a.rows(), a.cols());
                for r in 0..a.rows() {
                    for c in 0..a.cols() {
                        g.set(r, c, dout.get(r, c) * bval(b, kind, r, c));
                    }
                }
                g
            });
            let db = wanted[1].then(|| {
                let mut prod = Matrix::zeros(a.rows(), a.cols());
                for r in 0..a.rows() {
                    for c in 0..a.cols() {
                        prod.set(r, c, dout.get(r, c) * a.get(r, c));
                    }
                }
                reduce_broadcast(&prod, kind, b)
            });
            vec![da, db]
        }
        Primitive::ConcatRows => {
            let mut offset = 0;
            inputs
                .iter()
                .zip(wanted)
                .map(|(m, &w)| {
                    let n = m.len();
                    let g = w.then(|| Matrix::from_vec(m.rows(), m.cols(), dout.data()[offset..offset + n].to_vec()));
                    offset += n;
                    g
                })
                .collect()
        }
        Primitive::ConcatCols => {
            let mut offset = 0;
            inputs
                .iter()
                .zip(wanted)
                .map(|(m, &w)| {
                    let g = w.then(|| {
                        let mut g = Matrix::zeros(m.rows(), m.cols());
                        for r in 0..m.rows() {
                            g.row_mut(r).copy_from_slice(&dout.row(r)[offset..offset + m.cols()]);
                        }
                        g
                    });
                    offset += m.cols();
                    g
                })
                .collect()
        }
        Primitive::Relu => {
            let x = inputs[0];
            let data = x.data().iter().zip(dout.data()).map(|(&v, &d)| if v > T::zero() { d } else { T::zero() }).collect();
            vec![Some(Matrix::from_vec(x.rows(), x.cols(), data))]
        }
        Primitive::Sigmoid => {
            let data = out.data().iter().zip(dout.data()).map(|(&y, &d)| d * y * (T::one() - y)).collect();
            vec![Some(Matrix::from_vec(out.rows(), out.cols(), data))]
        }
        Primitive::Tanh => {
            let data = out.data().iter().zip(dout.data()).map(|(&y, &d)| d * (T::one() - y * y)).collect();
            vec![Some(Matrix::from_vec(out.rows(), out.cols(), data))]
        }
        Primitive::Softmax | Primitive::MaskedSoftmax(_) => {
            let mut g = Matrix::zeros(out.rows(), out.cols());
            for r in 0..out.rows() {
                let y = out.row(r);
                let d = dout.row(r);
                let dot: T = y.iter().zip(d).map(|(&a, &b)| a * b).sum();
                for (c, gv) in g.row_mut(r).iter_mut().enumerate() {
                    *gv = y[c] * (d[c] - dot);
                }
            }
            vec![Some(g)]
        }
        Primitive::SoftmaxColumns => {
            let mut g = Matrix::zeros(out.rows(), out.cols());
            for c in 0..out.cols() {
                let mut dot = T::zero();
                for r in 0..out.rows() {
                    dot += out.get(r, c) * dout.get(r, c);
                }
                for r in 0..out.rows() {
                    g.set(r, c, out.get(r, c) * (dout.get(r, c) - dot));
                }
            }
            vec![Some(g)]
        }
        Primitive::LayerNorm => {
            let (x, gain) = (inputs[0], inputs[1]);
            let (n, d) = x.shape();
            let rstd = &aux[..n];
            let xhat = &aux[n..];
            let dn = T::from_usize(d).unwrap();
            let mut dx = Matrix::zeros(n, d);
            let mut dg = Matrix::zeros(1, d);
            let mut db = Matrix::zeros(1, d);
            for r in 0..n {
                let xh = &xhat[r * d..(r + 1) * d];
                let dy = dout.row(r);
                let mut mean_dxh = T::zero();
                let mut mean_dxh_xh = T::zero();
                for c in 0..d {
                    let dxh = dy[c] * gain.get(0, c);
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh[c];
                    dg.set(0, c, dg.get(0, c) + dy[c] * xh[c]);
                    db.set(0, c, db.get(0, c) + dy[c]);
                }
                mean_dxh = mean_dxh / dn;
                mean_dxh_xh = mean_dxh_xh / dn;
                for c in 0..d {
                    let dxh = dy[c] * gain.get(0, c);
                    dx.set(r, c, rstd[r] * (dxh - mean_dxh - xh[c] * mean_dxh_xh));
                }
            }
            vec![Some(dx), wanted[1].then_some(dg), wanted[2].then_some(db)]
        }
        Primitive::GruCell => {
            let (h, wh) = (inputs[1], inputs[2]);
            let (n, hid) = h.shape();
            let mut dgx = Matrix::zeros(n, 3 * hid);
            let mut dgh = Matrix::zeros(n, 3 * hid);
            let mut dh = Matrix::zeros(n, hid);
            for row in 0..n {
                let a = &aux[row * 4 * hid..(row + 1) * 4 * hid];
                let (rs, zs, cs, ghn) = (&a[..hid], &a[hid..2 * hid], &a[2 * hid..3 * hid], &a[3 * hid..]);
                let hr = h.row(row);
                for j in 0..hid {
                    let d = dout.get(row, j);
                    let (r, z, c) = (rs[j], zs[j], cs[j]);
                    let dz = d * (hr[j] - c);
                    let dc = d * (T::one() - z);
                    let dpre_c = dc * (T::one() - c * c);
                    let dr = dpre_c * ghn[j];
                    let dpre_r = dr * r * (T::one() - r);
                    let dpre_z = dz * z * (T::one() - z);
                    dgx.set(row, j, dpre_r);
                    dgx.set(row, hid + j, dpre_z);
                    dgx.set(row, 2 * hid + j, dpre_c);
                    dgh.set(row, j, dpre_r);
                    dgh.set(row, hid + j, dpre_z);
                    dgh.set(row, 2 * hid + j, dpre_c * r);
                    dh.set(row, j, d * z);
                }
            }
            dgh.matmul_t_into(wh, &mut dh);
            let dwh = wanted[2].then(|| {
                let mut g = Matrix::zeros(hid, 3 * hid);
                h.t_matmul_into(&dgh, &mut g);
                g
            });
            let dbh = wanted[3].then(|| {
                let mut g = Matrix::zeros(1, 3 * hid);
                for row in 0..n {
                    for (acc, &v) in g.row_mut(0).iter_mut().zip(dgh.row(row)) {
                        *acc += v;
                    }
                }
                g
            });
            vec![wanted[0].then_some(dgx), wanted[1].then_some(dh), dwh, dbh]
        }
        Primitive::WeightedSum => {
            let (w, x) = (inputs[0], inputs[1]);
            let per_feature = w.shape() == x.shape();
            let mut dw = Matrix::zeros(w.rows(), w.cols());
            let mut dx = Matrix::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                for c in 0..x.cols() {
                    let d = dout.get(0, c);
                    if per_feature {
                        dw.set(r, c, d * x.get(r, c));
                        dx.set(r, c, d * w.get(r, c));
                    } else {
                        dw.set(r, 0, dw.get(r, 0) + d * x.get(r, c));
                        dx.set(r, c, d * w.get(r, 0));
                    }
                }
            }
            vec![Some(dw), Some(dx)]
        }
        Primitive::GatherRows(index) => {
            let x = inputs[0];
            let mut g = Matrix::zeros(x.rows(), x.cols());
            for (e, &i) in index.iter().enumerate() {
                for (acc, &v) in g.row_mut(i).iter_mut().zip(dout.row(e)) {
                    *acc += v;
                }
            }
            vec![Some(g)]
        }
        Primitive::ScatterRows { index, .. } => {
            let x = inputs[0];
            let mut data = Vec::with_capacity(x.len());
            for &i in index {
                data.extend_from_slice(dout.row(i));
            }
            vec![Some(Matrix::from_vec(x.rows(), x.cols(), data))]
        }
        Primitive::Mean | Primitive::Sum => {
            let x = inputs[0];
            let mut d = dout.get(0, 0);
            if matches!(prim, Primitive::Mean) {
                d = d / T::from_usize(x.len()).unwrap();
            }
            vec![Some(Matrix::filled(x.rows(), x.cols(), d))]
        }
        Primitive::CrossEntropy { targets } => {
            let p = inputs[0];
            let lo = T::of(PROB_CLAMP);
            let hi = T::one() - lo;
            let scale = dout.get(0, 0) / T::from_usize(p.len()).unwrap();
            let data = p
                .data()
                .iter()
                .zip(targets)
                .map(|(&pv, &y)| {
                    if pv < lo || pv > hi {
                        T::zero()
                    } else {
                        let y = T::of(y);
                        scale * (-y / pv + (T::one() - y) / (T::one() - pv))
                    }
                })
                .collect();
            vec![Some(Matrix::from_vec(p.rows(), p.cols(), data))]
        }
        Primitive::LogSumExp(mask) => {
            let x = inputs[0];
            let mut g = Matrix::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                let lse = out.get(r, 0);
                let d = dout.get(r, 0);
                for c in 0..x.cols() {
                    if mask.as_ref().is_none_or(|m| m[c]) {
                        g.set(r, c, d * (x.get(r, c) - lse).exp());
                    }
                }
            }
            vec![Some(g)]
        }
        Primitive::Pick(entries) => {
            let x = inputs[0];
            let mut g = Matrix::zeros(x.rows(), x.cols());
            for (k, &(r, c)) in entries.iter().enumerate() {
                g.set(r, c, g.get(r, c) + dout.get(k, 0));
            }
            vec![Some(g)]
        }
        Primitive::Transpose => vec![Some(transposed(dout))],
        Primitive::Affine { scale, .. } => {
            let s = T::of(*scale);
            vec![Some(dout.map(|d| d * s))]
        }
        Primitive::Maximum => {
            let (a, b) = (inputs[0], inputs[1]);
            let mut ga = Matrix::zeros(a.rows(), a.cols());
            let mut gb = Matrix::zeros(a.rows(), a.cols());
            for i in 0..a.len() {
                if a.data()[i] >= b.data()[i] {
                    ga.data_mut()[i] = dout.data()[i];
                } else {
                    gb.data_mut()[i] = dout.data()[i];
                }
            }
            vec![Some(ga), Some(gb)]
        }
        Primitive::LogClamped { floor } => {
            let x = inputs[0];
            let f = T::of(*floor);
            let data = x.data().iter().zip(dout.data()).map(|(&v, &d)| if v > f { d / v } else { T::zero() }).collect();
            vec![Some(Matrix::from_vec(x.rows(), x.cols(), data))]
        }
    }
}

fn reduce_broadcast<T: Real>(g: &Matrix<T>, kind: Bcast, like: &Matrix<T>) -> Matrix<T> {
    match kind {
        Bcast::Same => g.clone(),
        Bcast::Row => {
            let mut out = Matrix::zeros(1, like.cols());
            for r in 0..g.rows() {
                for (acc, &v) in out.row_mut(0).iter_mut().zip(g.row(r)) {
                    *acc += v;
                }
            }
            out
        }
        Bcast::Col => {
            let mut out = Matrix::zeros(like.rows(), 1);
            for r in 0..g.rows() {
                out.set(r, 0, g.row(r).iter().copied().sum());
            }
            out
        }
    }
}
