//! Heterogeneous graph of number, sentence and clause nodes with
//! evidence-weighted relational message passing.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Fragment, FragmentLevel, QAInstance};
use crate::encoder::Layout;
use crate::evidence::pool_fragments;
use crate::nn::{bigru, bigru_spec, layer_norm, layer_norm_spec, ParamSpec};
use crate::numerics::{Matrix, NumericsError, ParameterStore, Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    NumGreater,
    NumLessEqual,
    ClauseSameSentence,
    ClauseToSentence,
    SentenceToClause,
    NumberToClause,
    ClauseToNumber,
}

impl Relation {
    pub const ALL: [Relation; 7] = [
        Relation::NumGreater,
        Relation::NumLessEqual,
        Relation::ClauseSameSentence,
        Relation::ClauseToSentence,
        Relation::SentenceToClause,
        Relation::NumberToClause,
        Relation::ClauseToNumber,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Relation::NumGreater => "num_greater",
            Relation::NumLessEqual => "num_less_equal",
            Relation::ClauseSameSentence => "clause_same_sentence",
            Relation::ClauseToSentence => "clause_to_sentence",
            Relation::SentenceToClause => "sentence_to_clause",
            Relation::NumberToClause => "number_to_clause",
            Relation::ClauseToNumber => "clause_to_number",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Number,
    Sentence,
    Clause,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub node_id: usize,
    pub kind: NodeKind,
    /// Number from the question rather than the passage.
    pub in_question: bool,
    /// Token span `[start, end)` on the node's side; one token for numbers.
    pub start: usize,
    pub end: usize,
    /// Index into the instance's numbers (question first) or fragment list.
    pub source: usize,
    pub value: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TypedEdge {
    pub src: usize,
    pub dst: usize,
    pub relation: Relation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeteroGraph {
    pub nodes: Vec<GraphNode>,
    /// Sorted by `(src, relation, dst)`.
    pub edges: Vec<TypedEdge>,
    /// Per destination, incoming `(src, relation)` pairs in sorted order.
    pub incoming: Vec<Vec<(usize, Relation)>>,
}

impl HeteroGraph {
    pub fn from_parts(nodes: Vec<GraphNode>, mut edges: Vec<TypedEdge>) -> Self {
        edges.sort_by_key(|e| (e.src, e.relation, e.dst));
        let mut incoming = vec![Vec::new(); nodes.len()];
        for e in &edges {
            incoming[e.dst].push((e.src, e.relation));
        }
        for list in &mut incoming {
            list.sort();
        }
        Self { nodes, edges, incoming }
    }

    /// Relabel nodes: node `i` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut nodes = self.nodes.clone();
        for (i, n) in self.nodes.iter().enumerate() {
            nodes[perm[i]] = GraphNode { node_id: perm[i], ..n.clone() };
        }
        let edges = self.edges.iter().map(|e| TypedEdge { src: perm[e.src], dst: perm[e.dst], ..*e }).collect();
        Self::from_parts(nodes, edges)
    }

    pub fn count(&self, kind: NodeKind) -> usize {
        self.nodes.iter().filter(|n| n.kind == kind).count()
    }
}

/// Nodes for every number (question first) and passage fragment, with
/// comparison edges between all numbers and containment edges elsewhere.
pub fn build_graph(doc: &Document, qa: &QAInstance) -> HeteroGraph {
    let mut nodes = Vec::new();
    let mut push = |kind, in_question, start, end, source, value| {
        let node_id = nodes.len();
        nodes.push(GraphNode { node_id, kind, in_question, start, end, source, value });
        node_id
    };
    let mut number_nodes = Vec::new();
    for (i, n) in qa.question_numbers.iter().enumerate() {
        number_nodes.push(push(NodeKind::Number, true, n.token_index, n.token_index + 1, i, Some(n.value)));
    }
    let offset = qa.question_numbers.len();
    for (i, n) in doc.numbers.iter().enumerate() {
        number_nodes.push(push(NodeKind::Number, false, n.token_index, n.token_index + 1, offset + i, Some(n.value)));
    }
    let sentence_nodes: Vec<usize> =
        doc.sentences.iter().enumerate().map(|(k, s)| push(NodeKind::Sentence, false, s.start, s.end, k, None)).collect();
    let clause_nodes: Vec<usize> =
        doc.clauses.iter().enumerate().map(|(k, c)| push(NodeKind::Clause, false, c.start, c.end, k, None)).collect();

    let mut edges = Vec::new();
    for &u in &number_nodes {
        for &v in &number_nodes {
            if u == v {
                continue;
            }
            let relation =
                if nodes[u].value > nodes[v].value { Relation::NumGreater } else { Relation::NumLessEqual };
            edges.push(TypedEdge { src: u, dst: v, relation });
        }
    }
    for (a, ca) in doc.clauses.iter().enumerate() {
        for (b, cb) in doc.clauses.iter().enumerate() {
            if a != b && ca.parent_sentence == cb.parent_sentence {
                edges.push(TypedEdge { src: clause_nodes[a], dst: clause_nodes[b], relation: Relation::ClauseSameSentence });
            }
        }
        if let Some(p) = ca.parent_sentence {
            edges.push(TypedEdge { src: clause_nodes[a], dst: sentence_nodes[p], relation: Relation::ClauseToSentence });
            edges.push(TypedEdge { src: sentence_nodes[p], dst: clause_nodes[a], relation: Relation::SentenceToClause });
        }
    }
    let clause_of = doc.clause_of_token();
    for (i, n) in doc.numbers.iter().enumerate() {
        let c = clause_of[n.token_index];
        if c != usize::MAX {
            let num = number_nodes[offset + i];
            edges.push(TypedEdge { src: num, dst: clause_nodes[c], relation: Relation::NumberToClause });
            edges.push(TypedEdge { src: clause_nodes[c], dst: num, relation: Relation::ClauseToNumber });
        }
    }
    HeteroGraph::from_parts(nodes, edges)
}

fn seq_position(node: &GraphNode, layout: &Layout, token: usize) -> usize {
    if node.in_question { layout.question.start + token } else { layout.passage.start + token }
}

/// Evidence weight per node (N×1): numbers read `p_seq` at their token,
/// fragments their own detector probability.
pub fn node_weights<T: Real>(
    tape: &mut Tape<T>,
    graph: &HeteroGraph,
    layout: &Layout,
    p_seq: Var,
    p_sentence: Var,
    p_clause: Var,
) -> Result<Var, NumericsError> {
    let s = tape.value(p_sentence).rows();
    let all = tape.concat_rows(&[p_seq, p_sentence, p_clause])?;
    let index = graph
        .nodes
        .iter()
        .map(|n| match n.kind {
            NodeKind::Number => seq_position(n, layout, n.start),
            NodeKind::Sentence => layout.len + n.source,
            NodeKind::Clause => layout.len + s + n.source,
        })
        .collect();
    tape.gather_rows(all, index)
}

/// Initial node states (N×d): number rows are copied, fragments pooled.
pub fn init_nodes<T: Real>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    graph: &HeteroGraph,
    h_ed: Var,
    layout: &Layout,
) -> Result<Var, NumericsError> {
    let mut positions = Vec::new();
    let mut sentences = Vec::new();
    let mut clauses = Vec::new();
    // (kind slot, index within slot) per node
    let mut slot = Vec::with_capacity(graph.nodes.len());
    for n in &graph.nodes {
        let span = || Fragment { frag_id: n.source, level: FragmentLevel::Clause, start: n.start, end: n.end, parent_sentence: None };
        match n.kind {
            NodeKind::Number => {
                slot.push((0, positions.len()));
                positions.push(seq_position(n, layout, n.start));
            }
            NodeKind::Sentence => {
                slot.push((1, sentences.len()));
                sentences.push(span());
            }
            NodeKind::Clause => {
                slot.push((2, clauses.len()));
                clauses.push(span());
            }
        }
    }
    let mut parts = Vec::new();
    let mut base = [0usize; 3];
    let mut rows = 0;
    if !positions.is_empty() {
        base[0] = rows;
        rows += positions.len();
        parts.push(tape.gather_rows(h_ed, positions)?);
    }
    for (k, frags, name) in [(1, &sentences, "graph.sentence_pool"), (2, &clauses, "graph.clause_pool")] {
        if !frags.is_empty() {
            base[k] = rows;
            rows += frags.len();
            parts.push(pool_fragments(tape, store, name, h_ed, layout.passage.start, frags)?);
        }
    }
    let all = tape.concat_rows(&parts)?;
    tape.gather_rows(all, slot.into_iter().map(|(k, i)| base[k] + i).collect())
}

/// One round: `v̂_i = (1/|N_i|) Σ_j p_j W^{r_ji} v_j`, then `ReLU(v_i W_v + v̂_i)`.
pub fn propagate_step<T: Real>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    graph: &HeteroGraph,
    states: Var,
    weights: Var,
) -> Result<Var, NumericsError> {
    let n = graph.nodes.len();
    let w_self = tape.param(store, "graph.self")?;
    let mut out = tape.matmul(states, w_self)?;
    for r in Relation::ALL {
        let (mut srcs, mut dsts, mut coef) = (Vec::new(), Vec::new(), Vec::new());
        for (dst, list) in graph.incoming.iter().enumerate() {
            for &(src, rel) in list {
                if rel == r {
                    srcs.push(src);
                    dsts.push(dst);
                    coef.push(T::one() / T::of(list.len() as f64));
                }
            }
        }
        if srcs.is_empty() {
            continue;
        }
        let w_r = tape.param(store, &format!("graph.rel.{}", r.name()))?;
        let transformed = tape.matmul(states, w_r)?;
        let msgs = tape.gather_rows(transformed, srcs.clone())?;
        let p = tape.gather_rows(weights, srcs)?;
        let c = tape.constant(Matrix::column_vector(coef));
        let scale = tape.mul(p, c)?;
        let msgs = tape.mul(msgs, scale)?;
        let agg = tape.scatter_rows(msgs, dsts, n)?;
        out = tape.add(out, agg)?;
    }
    tape.relu(out)
}

/// Node index owning each sequence position for the scatter back to tokens
/// (number over clause over sentence); `N` marks rows with no node.
pub fn token_owners(graph: &HeteroGraph, layout: &Layout) -> Vec<usize> {
    let none = graph.nodes.len();
    let mut owner = vec![none; layout.len];
    let mut rank = vec![0u8; layout.len];
    for n in &graph.nodes {
        let r = match n.kind {
            NodeKind::Sentence => 1,
            NodeKind::Clause => 2,
            NodeKind::Number => 3,
        };
        for t in n.start..n.end {
            let pos = seq_position(n, layout, t);
            if r > rank[pos] {
                rank[pos] = r;
                owner[pos] = n.node_id;
            }
        }
    }
    owner
}

/// Graph state written back onto token rows (L×d).
pub fn scatter_to_tokens<T: Real>(
    tape: &mut Tape<T>,
    graph: &HeteroGraph,
    layout: &Layout,
    states: Var,
) -> Result<Var, NumericsError> {
    let d = tape.value(states).cols();
    let zero = tape.constant(Matrix::zeros(1, d));
    let padded = tape.concat_rows(&[states, zero])?;
    tape.gather_rows(padded, token_owners(graph, layout))
}

/// `steps` propagation rounds, scatter to tokens, then
/// `X + BiGRU(X)` with `X = LN(H_ED + H_R)`. Without the graph `H_R = 0`.
#[allow(clippy::too_many_arguments)]
pub fn reason_and_fuse<T: Real>(
    tape: &mut Tape<T>,
    store: &ParameterStore<T>,
    graph: &HeteroGraph,
    layout: &Layout,
    h_ed: Var,
    weights: Var,
    steps: usize,
    use_graph: bool,
) -> Result<Var, NumericsError> {
    let x = if use_graph && !graph.nodes.is_empty() {
        let mut states = init_nodes(tape, store, graph, h_ed, layout)?;
        for _ in 0..steps {
            states = propagate_step(tape, store, graph, states, weights)?;
        }
        let h_r = scatter_to_tokens(tape, graph, layout, states)?;
        tape.add(h_ed, h_r)?
    } else {
        h_ed
    };
    let x = layer_norm(tape, store, "graph.fuse_ln", x)?;
    let g = bigru(tape, store, "graph.resigru", x)?;
    tape.add(x, g)
}

pub fn graph_spec(spec: &mut ParamSpec, d: usize) {
    spec.push(("graph.self".to_string(), vec![d, d]));
    for r in Relation::ALL {
        spec.push((format!("graph.rel.{}", r.name()), vec![d, d]));
    }
    spec.push(("graph.sentence_pool.w".to_string(), vec![d, d]));
    spec.push(("graph.clause_pool.w".to_string(), vec![d, d]));
    layer_norm_spec(spec, "graph.fuse_ln", d);
    bigru_spec(spec, "graph.resigru", d, d / 2);
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz rendering: one node per graph node labeled with kind, anchor
/// text and (when given) weight; one edge per typed edge.
pub fn to_dot(graph: &HeteroGraph, doc: &Document, qa: &QAInstance, weights: Option<&[f64]>) -> String {
    let mut out = String::from("digraph evidence {\n  rankdir=LR;\n");
    for n in &graph.nodes {
        let text = if n.in_question {
            qa.question_tokens[n.start].surface.clone()
        } else {
            doc.span_text(n.start, n.end).to_string()
        };
        let short: String = text.chars().take(48).collect();
        let (kind, shape) = match n.kind {
            NodeKind::Number => ("number", "ellipse"),
            NodeKind::Sentence => ("sentence", "box"),
            NodeKind::Clause => ("clause", "note"),
        };
        let w = weights.map(|w| format!("\\np={:.3}", w[n.node_id])).unwrap_or_default();
        let _ = writeln!(out, "  n{} [shape={shape}, label=\"{kind} {}: {}{w}\"];", n.node_id, n.node_id, escape(&short));
    }
    for e in &graph.edges {
        let _ = writeln!(out, "  n{} -> n{} [label=\"{}\"];", e.src, e.dst, e.relation.name());
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AnswerSpec;
    use std::collections::BTreeSet;

    fn qa(q: &str) -> QAInstance {
        QAInstance::new("q", q, AnswerSpec::Spans(vec!["x".into()]))
    }

    #[test]
    fn comparison_edges_for_two_numbers() {
        let doc = Document::new("p", "It was 93.9% White and 0.8% Asian.");
        let g = build_graph(&doc, &qa("Which?"));
        let nums: Vec<&GraphNode> = g.nodes.iter().filter(|n| n.kind == NodeKind::Number).collect();
        let big = nums.iter().find(|n| n.value == Some(93.9)).unwrap().node_id;
        let small = nums.iter().find(|n| n.value == Some(0.8)).unwrap().node_id;
        let numeric: Vec<&TypedEdge> =
            g.edges.iter().filter(|e| matches!(e.relation, Relation::NumGreater | Relation::NumLessEqual)).collect();
        assert_eq!(numeric.len(), 2);
        assert!(g.edges.contains(&TypedEdge { src: big, dst: small, relation: Relation::NumGreater }));
        assert!(g.edges.contains(&TypedEdge { src: small, dst: big, relation: Relation::NumLessEqual }));
    }

    #[test]
    fn minimal_graph() {
        let doc = Document::new("p", "Hello there.");
        let g = build_graph(&doc, &qa("Who?"));
        assert_eq!(g.nodes.len(), 2);
        let rels: BTreeSet<Relation> = g.edges.iter().map(|e| e.relation).collect();
        assert_eq!(rels, [Relation::ClauseToSentence, Relation::SentenceToClause].into_iter().collect());
        assert_eq!(g.edges.len(), 2);
    }

    #[test]
    fn question_numbers_only_compare() {
        let doc = Document::new("p", "There were 5 cats, and 7 dogs.");
        let g = build_graph(&doc, &qa("Were there more than 6 pets?"));
        let qn = g.nodes.iter().find(|n| n.in_question).unwrap().node_id;
        for e in g.edges.iter().filter(|e| e.src == qn || e.dst == qn) {
            assert!(matches!(e.relation, Relation::NumGreater | Relation::NumLessEqual));
        }
        assert_eq!(g.incoming[qn].len(), 2);
    }

    #[test]
    fn owners_prefer_numbers_then_clauses() {
        let doc = Document::new("p", "We saw 3 owls, and two hawks.");
        let q = qa("How many 4 birds?");
        let g = build_graph(&doc, &q);
        let layout = Layout::new(q.question_tokens.len(), doc.tokens.len());
        let own = token_owners(&g, &layout);
        assert_eq!(own[0], g.nodes.len());
        let q4 = layout.question.start + 2;
        assert_eq!(g.nodes[own[q4]].kind, NodeKind::Number);
        assert!(g.nodes[own[q4]].in_question);
        let three = layout.passage.start + 2;
        assert_eq!(g.nodes[own[three]].value, Some(3.0));
        assert_eq!(g.nodes[own[layout.passage.start]].kind, NodeKind::Clause);
        assert_eq!(own[layout.last()], g.nodes.len());
    }

    fn hand_store(d: usize) -> ParameterStore<f64> {
        let mut spec = ParamSpec::new();
        graph_spec(&mut spec, d);
        let mut s = ParameterStore::new(3);
        s.init_parameters(&spec).unwrap();
        s
    }

    #[test]
    fn zero_weights_and_isolated_nodes_get_no_messages() {
        let s = hand_store(3);
        let doc = Document::new("p", "It rose 4 and 9 times, then 2.");
        let g = build_graph(&doc, &qa("Why?"));
        let n = g.nodes.len();
        let states = Matrix::from_vec(n, 3, (0..n * 3).map(|i| (i as f64 * 0.37).sin()).collect());
        let mut t = Tape::new();
        let sv = t.constant(states.clone());
        let w = t.constant(Matrix::zeros(n, 1));
        let out = propagate_step(&mut t, &s, &g, sv, w).unwrap();
        let expect = states.matmul(s.get("graph.self").unwrap()).map(|v| v.max(0.0));
        assert_eq!(t.value(out), &expect);

        let lonely = HeteroGraph::from_parts(g.nodes[..1].to_vec(), vec![]);
        let sv = t.constant(Matrix::from_vec(1, 3, states.row(0).to_vec()));
        let w = t.constant(Matrix::filled(1, 1, 1.0));
        let out = propagate_step(&mut t, &s, &lonely, sv, w).unwrap();
        let expect = Matrix::from_vec(1, 3, states.row(0).to_vec()).matmul(s.get("graph.self").unwrap()).map(|v| v.max(0.0));
        assert_eq!(t.value(out), &expect);
    }

    #[test]
    fn hand_computed_line_graph() {
        // 0 -> 1 (NumGreater), 2 -> 1 (NumLessEqual), 1 -> 2 (NumGreater)
        let node = |i: usize| GraphNode {
            node_id: i,
            kind: NodeKind::Number,
            in_question: false,
            start: i,
            end: i + 1,
            source: i,
            value: Some(i as f64),
        };
        let g = HeteroGraph::from_parts(
            (0..3).map(node).collect(),
            vec![
                TypedEdge { src: 0, dst: 1, relation: Relation::NumGreater },
                TypedEdge { src: 2, dst: 1, relation: Relation::NumLessEqual },
                TypedEdge { src: 1, dst: 2, relation: Relation::NumGreater },
            ],
        );
        let mut s = ParameterStore::<f64>::new(0);
        s.insert("graph.self", vec![2, 2], Matrix::from_f64(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        s.insert("graph.rel.num_greater", vec![2, 2], Matrix::from_f64(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        s.insert("graph.rel.num_less_equal", vec![2, 2], Matrix::from_f64(2, 2, &[2.0, 0.0, 0.0, -1.0])).unwrap();
        let v = Matrix::from_f64(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, -2.0]);
        let p = Matrix::from_f64(3, 1, &[0.5, 1.0, 0.25]);
        let mut t = Tape::new();
        let sv = t.constant(v);
        let w = t.constant(p);
        let out = propagate_step(&mut t, &s, &g, sv, w).unwrap();
        // node 0: no neighbors -> relu(v0) = (1, 2)
        // node 1: mean of 0.5*swap(v0) = (1, 0.5) and 0.25*(2*3, -1*-2) = (1.5, 0.5) -> (1.25, 0.5); + (-1, 0.5) -> (0.25, 1.0)
        // node 2: 1.0*swap(v1) = (0.5, -1); + (3, -2) -> (3.5, -3) -> relu (3.5, 0)
        let expect = [1.0, 2.0, 0.25, 1.0, 3.5, 0.0];
        for (a, b) in t.value(out).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn init_copies_numbers_and_pools_fragments() {
        let d = 4;
        let s = hand_store(d);
        let doc = Document::new("p", "Up 7. Cats sat down.");
        let q = qa("Why?");
        let g = build_graph(&doc, &q);
        let layout = Layout::new(q.question_tokens.len(), doc.tokens.len());
        let h = Matrix::from_vec(layout.len, d, (0..layout.len * d).map(|i| (i as f64 * 0.71).cos()).collect());
        let mut t = Tape::new();
        let hv = t.constant(h.clone());
        let st = init_nodes(&mut t, &s, &g, hv, &layout).unwrap();
        let st = t.value(st).clone();
        let num = g.nodes.iter().find(|n| n.kind == NodeKind::Number).unwrap();
        assert_eq!(st.row(num.node_id), h.row(layout.passage.start + 1));
        // "Cats sat down ." pooled by explicit weights
        let sent = g.nodes.iter().find(|n| n.kind == NodeKind::Sentence && n.start == 3).unwrap();
        let rows: Vec<usize> = (layout.passage.start + 3..layout.passage.start + 7).collect();
        let w = s.get("graph.sentence_pool.w").unwrap();
        for c in 0..d {
            let sc: Vec<f64> = rows.iter().map(|&r| (0..d).map(|k| h.get(r, k) * w.get(k, c)).sum()).collect();
            let m = sc.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = sc.iter().map(|v| (v - m).exp()).sum();
            let expect: f64 = rows.iter().zip(&sc).map(|(&r, v)| (v - m).exp() / z * h.get(r, c)).sum();
            assert!((st.get(sent.node_id, c) - expect).abs() < 1e-12);
        }
    }
}
