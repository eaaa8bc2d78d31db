//! Define-then-run expression graphs over dense `f64` tensors with
//! reverse-mode differentiation.
//!
//! A [`GraphBuilder`] records operations symbolically; [`GraphBuilder::build`]
//! freezes them into an immutable [`Graph`]. Shapes are checked when the graph
//! is evaluated against a [`ParamStore`] and a set of named inputs, so the same
//! graph can be reused with different bindings. [`Graph::backward`] walks an
//! [`Evaluation`] in reverse and returns one gradient per trainable parameter.
//!
//! Broadcasting is limited to adding a `[cols]` (or `[1, cols]`) bias to every
//! row of a `[rows, cols]` operand.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, NodeRef, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Variance floor used by [`Op::LayerNorm`]; rows with smaller variance
/// normalise to zero.
pub const LAYER_NORM_VAR_FLOOR: f64 = 1e-5;

/// Empty input binding for graphs that only read parameters and constants.
pub const NO_INPUTS: &BTreeMap<String, Tensor> = &BTreeMap::new();

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Input(String),
    Param(String),
    Const(Tensor),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    /// Row-wise softmax over the last axis.
    Softmax(NodeId),
    /// Row-wise softmax of a `[rows, cols]` score matrix where row `i` only
    /// sees columns `j <= i + (cols - rows)`; masked entries are exactly zero.
    CausalSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    /// Tanh approximation of GELU.
    Gelu(NodeId),
    /// Row lookup; `ids` holds integer-valued entries and is not differentiated.
    Embedding {
        table: NodeId,
        ids: NodeId,
    },
    Log(NodeId),
    Sigmoid(NodeId),
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    Pow(NodeId, f64),
    /// Sum of all entries, shape `[1]`.
    Sum(NodeId),
    SelectRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    SelectCols {
        x: NodeId,
        cols: Vec<usize>,
    },
    /// Picks `(row, col)` entries into a vector.
    Gather {
        x: NodeId,
        index: Vec<(usize, usize)>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Softmax(_) => "softmax",
            Op::CausalSoftmax(_) => "causal_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Embedding { .. } => "embedding",
            Op::Log(_) => "log",
            Op::Sigmoid(_) => "sigmoid",
            Op::Clamp { .. } => "clamp",
            Op::Pow(..) => "pow",
            Op::Sum(_) => "sum",
            Op::SelectRows { .. } => "select_rows",
            Op::SelectCols { .. } => "select_cols",
            Op::Gather { .. } => "gather",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x, _)
            | Op::Softmax(x)
            | Op::CausalSoftmax(x)
            | Op::Gelu(x)
            | Op::Log(x)
            | Op::Sigmoid(x)
            | Op::Pow(x, _)
            | Op::Sum(x) => vec![*x],
            Op::Clamp { x, .. }
            | Op::SelectRows { x, .. }
            | Op::SelectCols { x, .. }
            | Op::Gather { x, .. }
            | Op::SliceCols { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
            Op::Embedding { table, ids } => vec![*table, *ids],
            Op::ConcatCols(xs) => xs.clone(),
        }
    }
}

/// Records operations in topological order.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Op>,
    params: HashMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        debug_assert!(op.inputs().iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Input(name.into()))
    }

    /// Leaf bound to a store parameter. Repeated calls with one name share a node.
    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(id) = self.params.get(name) {
            return *id;
        }
        let id = self.push(Op::Param(name.to_string()));
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const(t))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Transpose(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(Op::AddScalar(x, c))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax(x))
    }

    pub fn causal_softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::CausalSoftmax(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::LayerNorm { x, gain, bias })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Gelu(x))
    }

    pub fn embedding(&mut self, table: NodeId, ids: NodeId) -> NodeId {
        self.push(Op::Embedding { table, ids })
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Log(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sigmoid(x))
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.push(Op::Clamp { x, lo, hi })
    }

    pub fn pow(&mut self, x: NodeId, exponent: f64) -> NodeId {
        self.push(Op::Pow(x, exponent))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    pub fn select_rows(&mut self, x: NodeId, rows: Vec<usize>) -> NodeId {
        self.push(Op::SelectRows { x, rows })
    }

    pub fn select_cols(&mut self, x: NodeId, cols: Vec<usize>) -> NodeId {
        self.push(Op::SelectCols { x, cols })
    }

    pub fn gather(&mut self, x: NodeId, index: Vec<(usize, usize)>) -> NodeId {
        self.push(Op::Gather { x, index })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        self.push(Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, xs: Vec<NodeId>) -> NodeId {
        self.push(Op::ConcatCols(xs))
    }

    pub fn output(&mut self, name: impl Into<String>, node: NodeId) {
        self.outputs.insert(name.into(), node);
    }

    pub fn build(self) -> Graph {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: self.nodes,
            outputs: self.outputs,
        }
    }
}

/// Immutable operation list; node `i` only reads nodes `< i`.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Op>,
    outputs: BTreeMap<String, NodeId>,
}

/// Values of every node from one [`Graph::evaluate`] call.
#[derive(Debug)]
pub struct Evaluation<'a> {
    graph_id: u64,
    values: Vec<Cow<'a, Tensor>>,
    outputs: BTreeMap<String, NodeId>,
}

impl<'a> Evaluation<'a> {
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node.0]
    }

    pub fn output(&self, name: &str) -> Option<&Tensor> {
        self.outputs.get(name).map(|id| self.value(*id))
    }

    /// Owned copies of every named output.
    pub fn outputs(&self) -> BTreeMap<String, Tensor> {
        self.outputs
            .iter()
            .map(|(k, id)| (k.clone(), self.value(*id).clone()))
            .collect()
    }
}

/// Gradients keyed by trainable parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.grads
    }
}

impl Graph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, node: NodeId) -> &Op {
        &self.nodes[node.0]
    }

    pub fn output_node(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    fn node_ref(&self, i: usize) -> NodeRef {
        NodeRef {
            id: i,
            op: self.nodes[i].name(),
        }
    }

    /// Runs every node forward. Inputs and parameters are borrowed, never
    /// mutated.
    pub fn evaluate<'a>(
        &self,
        params: &'a ParamStore,
        inputs: &'a BTreeMap<String, Tensor>,
    ) -> Result<Evaluation<'a>> {
        let mut values: Vec<Cow<'a, Tensor>> = Vec::with_capacity(self.nodes.len());
        for (i, op) in self.nodes.iter().enumerate() {
            let value = match op {
                Op::Input(name) => Cow::Borrowed(
                    inputs
                        .get(name)
                        .ok_or_else(|| Error::UnboundInput(name.clone()))?,
                ),
                Op::Param(name) => Cow::Borrowed(
                    params
                        .get(name)
                        .ok_or_else(|| Error::UnknownParameter(name.clone()))?,
                ),
                Op::Const(t) => Cow::Owned(t.clone()),
                _ => {
                    let out = forward_op(op, &values, self.node_ref(i))?;
                    if !out.is_finite() {
                        return Err(Error::NonFinite(self.node_ref(i)));
                    }
                    Cow::Owned(out)
                }
            };
            values.push(value);
        }
        Ok(Evaluation {
            graph_id: self.id,
            values,
            outputs: self.outputs.clone(),
        })
    }

    /// Reverse pass from a `[1]`-shaped node. Only parameters marked trainable
    /// in `params` receive a gradient.
    pub fn backward(
        &self,
        eval: &Evaluation<'_>,
        output: NodeId,
        params: &ParamStore,
    ) -> Result<Gradients> {
        if eval.graph_id != self.id || eval.values.len() != self.nodes.len() {
            return Err(Error::NotEvaluated);
        }
        let out_shape = eval.value(output).shape();
        if out_shape != [1] {
            return Err(Error::NonScalarOutput {
                node: self.node_ref(output.0),
                shape: out_shape.to_vec(),
            });
        }

        let mut needs = vec![false; self.nodes.len()];
        for (i, op) in self.nodes.iter().enumerate().take(output.0 + 1) {
            needs[i] = match op {
                Op::Param(name) => params.is_trainable(name),
                Op::Input(_) | Op::Const(_) => false,
                Op::Embedding { table, .. } => needs[table.0],
                _ => op.inputs().iter().any(|j| needs[j.0]),
            };
        }

        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Tensor::scalar(1.0));
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();

        for i in (0..=output.0).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            let op = &self.nodes[i];
            if let Op::Param(name) = op {
                match grads.get_mut(name) {
                    Some(acc) => add_into(acc.data_mut(), g.data()),
                    None => {
                        grads.insert(name.clone(), g);
                    }
                }
                continue;
            }
            backward_op(op, &eval.values, eval.value(NodeId(i)), &g, &needs, &mut adj);
        }
        Ok(Gradients { grads })
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn accumulate(adj: &mut [Option<Tensor>], node: NodeId, g: Tensor) {
    match &mut adj[node.0] {
        Some(acc) => add_into(acc.data_mut(), g.data()),
        slot @ None => *slot = Some(g),
    }
}

fn mismatch(node: NodeRef, expected: impl Into<String>, actual: impl std::fmt::Debug) -> Error {
    Error::ShapeMismatch {
        node,
        expected: expected.into(),
        actual: format!("{actual:?}"),
    }
}

fn matrix_dims(t: &Tensor, node: NodeRef, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(mismatch(node, format!("rank-2 {what}"), s)),
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of shape `[m, k]` and
/// `op(b)` of shape `[k, n]`; `a` and `b` are row-major in storage and the
/// flags select a transposed view.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the slices hold m*k, k*n and m*n elements and the strides
    // describe row-major (or transposed row-major) layouts within them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn forward_op(op: &Op, values: &[Cow<'_, Tensor>], node: NodeRef) -> Result<Tensor> {
    let v = |id: &NodeId| -> &Tensor { &values[id.0] };
    Ok(match op {
        Op::Input(_) | Op::Param(_) | Op::Const(_) => unreachable!("leaves handled by caller"),
        Op::MatMul(a, b) => {
            let (a, b) = (v(a), v(b));
            let (m, k) = matrix_dims(a, node, "left operand")?;
            let (k2, n) = matrix_dims(b, node, "right operand")?;
            if k != k2 {
                return Err(mismatch(node, format!("right operand [{k}, _]"), b.shape()));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
            Tensor::matrix(m, n, out)
        }
        Op::Transpose(x) => {
            let x = v(x);
            let (r, c) = matrix_dims(x, node, "operand")?;
            let d = x.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = d[i * c + j];
                }
            }
            Tensor::matrix(c, r, out)
        }
        Op::Add(a, b) => {
            let (a, b) = (v(a), v(b));
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                Tensor::new(a.shape().to_vec(), data)?
            } else {
                let (r, c) = matrix_dims(a, node, "left operand")?;
                if !(b.shape() == [c] || b.shape() == [1, c]) {
                    return Err(mismatch(node, format!("[{r}, {c}], [{c}] or [1, {c}]"), b.shape()));
                }
                let mut out = a.data().to_vec();
                for row in out.chunks_mut(c) {
                    add_into(row, b.data());
                }
                Tensor::matrix(r, c, out)
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (v(a), v(b));
            if a.shape() != b.shape() {
                return Err(mismatch(node, format!("{:?}", a.shape()), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::new(a.shape().to_vec(), data)?
        }
        Op::Scale(x, f) => map(v(x), |a| a * f),
        Op::AddScalar(x, c) => map(v(x), |a| a + c),
        Op::Softmax(x) => {
            let x = v(x);
            let (_, c) = x.rows_cols();
            let mut out = vec![0.0; x.len()];
            for (o, row) in out.chunks_mut(c.max(1)).zip(x.data().chunks(c.max(1))) {
                softmax_row(row, o);
            }
            Tensor::new(x.shape().to_vec(), out)?
        }
        Op::CausalSoftmax(x) => {
            let x = v(x);
            let (r, c) = matrix_dims(x, node, "score matrix")?;
            if c < r {
                return Err(mismatch(node, format!("at least {r} columns"), x.shape()));
            }
            let offset = c - r;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let visible = i + offset + 1;
                softmax_row(&x.data()[i * c..i * c + visible], &mut out[i * c..i * c + visible]);
            }
            Tensor::matrix(r, c, out)
        }
        Op::LayerNorm { x, gain, bias } => {
            let (x, g, b) = (v(x), v(gain), v(bias));
            let (r, c) = x.rows_cols();
            if g.shape() != [c] {
                return Err(mismatch(node, format!("gain [{c}]"), g.shape()));
            }
            if b.shape() != [c] {
                return Err(mismatch(node, format!("bias [{c}]"), b.shape()));
            }
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &x.data()[i * c..(i + 1) * c];
                let (mean, inv) = norm_stats(row);
                for j in 0..c {
                    out[i * c + j] = (row[j] - mean) * inv * g.data()[j] + b.data()[j];
                }
            }
            Tensor::new(x.shape().to_vec(), out)?
        }
        Op::Gelu(x) => map(v(x), |a| {
            let u = GELU_C * (a + GELU_K * a * a * a);
            0.5 * a * (1.0 + u.tanh())
        }),
        Op::Embedding { table, ids } => {
            let (table, ids) = (v(table), v(ids));
            let (rows, d) = matrix_dims(table, node, "table")?;
            let idx = index_values(ids, rows, node)?;
            let mut out = Vec::with_capacity(idx.len() * d);
            for i in idx {
                out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
            }
            Tensor::matrix(out.len() / d.max(1), d, out)
        }
        Op::Log(x) => map(v(x), f64::ln),
        Op::Sigmoid(x) => map(v(x), sigmoid),
        Op::Clamp { x, lo, hi } => map(v(x), |a| a.clamp(*lo, *hi)),
        Op::Pow(x, e) => map(v(x), |a| if *e == 0.0 { 1.0 } else { a.powf(*e) }),
        Op::Sum(x) => Tensor::scalar(v(x).sum()),
        Op::SelectRows { x, rows } => {
            let x = v(x);
            let (r, c) = matrix_dims(x, node, "operand")?;
            let mut out = Vec::with_capacity(rows.len() * c);
            for &i in rows {
                if i >= r {
                    return Err(mismatch(node, format!("row index < {r}"), i));
                }
                out.extend_from_slice(x.row(i));
            }
            Tensor::matrix(rows.len(), c, out)
        }
        Op::SelectCols { x, cols } => {
            let x = v(x);
            let (r, c) = matrix_dims(x, node, "operand")?;
            if let Some(&j) = cols.iter().find(|&&j| j >= c) {
                return Err(mismatch(node, format!("column index < {c}"), j));
            }
            let mut out = Vec::with_capacity(r * cols.len());
            for i in 0..r {
                let row = x.row(i);
                out.extend(cols.iter().map(|&j| row[j]));
            }
            Tensor::matrix(r, cols.len(), out)
        }
        Op::Gather { x, index } => {
            let x = v(x);
            let (r, c) = matrix_dims(x, node, "operand")?;
            let mut out = Vec::with_capacity(index.len());
            for &(i, j) in index {
                if i >= r || j >= c {
                    return Err(mismatch(node, format!("index within [{r}, {c}]"), (i, j)));
                }
                out.push(x.data()[i * c + j]);
            }
            Tensor::vector(out)
        }
        Op::SliceCols { x, start, len } => {
            let x = v(x);
            let (r, c) = matrix_dims(x, node, "operand")?;
            if start + len > c {
                return Err(mismatch(node, format!("at least {} columns", start + len), x.shape()));
            }
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&x.row(i)[*start..start + len]);
            }
            Tensor::matrix(r, *len, out)
        }
        Op::ConcatCols(xs) => {
            let first = v(&xs[0]);
            let (r, _) = matrix_dims(first, node, "operand")?;
            let mut widths = Vec::with_capacity(xs.len());
            for x in xs {
                let t = v(x);
                let (ri, ci) = matrix_dims(t, node, "operand")?;
                if ri != r {
                    return Err(mismatch(node, format!("{r} rows"), t.shape()));
                }
                widths.push(ci);
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(r * total);
            for i in 0..r {
                for x in xs {
                    out.extend_from_slice(v(x).row(i));
                }
            }
            Tensor::matrix(r, total, out)
        }
    })
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|a| f(*a)).collect())
        .expect("same shape")
}

fn norm_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    (mean, 1.0 / var.max(LAYER_NORM_VAR_FLOOR).sqrt())
}

fn norm_floored(row: &[f64]) -> bool {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    var < LAYER_NORM_VAR_FLOOR
}

fn index_values(ids: &Tensor, rows: usize, node: NodeRef) -> Result<Vec<usize>> {
    ids.data()
        .iter()
        .map(|&x| {
            if x >= 0.0 && x.fract() == 0.0 && (x as usize) < rows {
                Ok(x as usize)
            } else {
                Err(mismatch(node, format!("integer ids in [0, {rows})"), x))
            }
        })
        .collect()
}

fn backward_op(
    op: &Op,
    values: &[Cow<'_, Tensor>],
    out: &Tensor,
    g: &Tensor,
    needs: &[bool],
    adj: &mut [Option<Tensor>],
) {
    let v = |id: &NodeId| -> &Tensor { &values[id.0] };
    let like = |t: &Tensor, data: Vec<f64>| Tensor::new(t.shape().to_vec(), data).expect("shape");
    match op {
        Op::Input(_) | Op::Param(_) | Op::Const(_) => {}
        Op::MatMul(a, b) => {
            let (at, bt) = (v(a), v(b));
            let (m, k) = at.rows_cols();
            let (_, n) = bt.rows_cols();
            if needs[a.0] {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, bt.data(), true, &mut da, 0.0);
                accumulate(adj, *a, Tensor::matrix(m, k, da));
            }
            if needs[b.0] {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, at.data(), true, g.data(), false, &mut db, 0.0);
                accumulate(adj, *b, Tensor::matrix(k, n, db));
            }
        }
        Op::Transpose(x) => {
            let (r, c) = v(x).rows_cols();
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    dx[i * c + j] = g.data()[j * r + i];
                }
            }
            accumulate(adj, *x, Tensor::matrix(r, c, dx));
        }
        Op::Add(a, b) => {
            if needs[a.0] {
                accumulate(adj, *a, g.clone());
            }
            if needs[b.0] {
                let bt = v(b);
                if bt.shape() == g.shape() {
                    accumulate(adj, *b, g.clone());
                } else {
                    let c = bt.len();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        add_into(&mut db, row);
                    }
                    accumulate(adj, *b, like(bt, db));
                }
            }
        }
        Op::Mul(a, b) => {
            let (at, bt) = (v(a), v(b));
            if needs[a.0] {
                let d = g.data().iter().zip(bt.data()).map(|(x, y)| x * y).collect();
                accumulate(adj, *a, like(at, d));
            }
            if needs[b.0] {
                let d = g.data().iter().zip(at.data()).map(|(x, y)| x * y).collect();
                accumulate(adj, *b, like(bt, d));
            }
        }
        Op::Scale(x, f) => accumulate(adj, *x, map(g, |a| a * f)),
        Op::AddScalar(x, _) => accumulate(adj, *x, g.clone()),
        Op::Softmax(x) | Op::CausalSoftmax(x) => {
            // Masked entries of the causal variant are zero in `out`, so the
            // dense formula already yields zero gradient there.
            let (_, c) = out.rows_cols();
            let mut dx = vec![0.0; out.len()];
            for ((d, y), gy) in dx
                .chunks_mut(c)
                .zip(out.data().chunks(c))
                .zip(g.data().chunks(c))
            {
                let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    d[j] = y[j] * (gy[j] - dot);
                }
            }
            accumulate(adj, *x, like(v(x), dx));
        }
        Op::LayerNorm { x, gain, bias } => {
            let (xt, gt) = (v(x), v(gain));
            let (r, c) = xt.rows_cols();
            let mut dx = vec![0.0; r * c];
            let mut dg = vec![0.0; c];
            let mut db = vec![0.0; c];
            let mut xhat = vec![0.0; c];
            let mut dxhat = vec![0.0; c];
            for i in 0..r {
                let row = &xt.data()[i * c..(i + 1) * c];
                let gy = &g.data()[i * c..(i + 1) * c];
                let (mean, inv) = norm_stats(row);
                for j in 0..c {
                    xhat[j] = (row[j] - mean) * inv;
                    dg[j] += gy[j] * xhat[j];
                    db[j] += gy[j];
                    dxhat[j] = gy[j] * gt.data()[j];
                }
                let n = c as f64;
                let mean_d = dxhat.iter().sum::<f64>() / n;
                let mean_dx = if norm_floored(row) {
                    0.0
                } else {
                    dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n
                };
                for j in 0..c {
                    dx[i * c + j] = inv * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                }
            }
            if needs[x.0] {
                accumulate(adj, *x, like(xt, dx));
            }
            if needs[gain.0] {
                accumulate(adj, *gain, like(gt, dg));
            }
            if needs[bias.0] {
                accumulate(adj, *bias, like(v(bias), db));
            }
        }
        Op::Gelu(x) => {
            let xt = v(x);
            let d = xt
                .data()
                .iter()
                .zip(g.data())
                .map(|(&a, &gy)| {
                    let u = GELU_C * (a + GELU_K * a * a * a);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_K * a * a);
                    gy * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du)
                })
                .collect();
            accumulate(adj, *x, like(xt, d));
        }
        Op::Embedding { table, ids } => {
            let tt = v(table);
            let (_, d) = tt.rows_cols();
            let mut dt = vec![0.0; tt.len()];
            for (k, &id) in v(ids).data().iter().enumerate() {
                let i = id as usize;
                add_into(&mut dt[i * d..(i + 1) * d], &g.data()[k * d..(k + 1) * d]);
            }
            accumulate(adj, *table, like(tt, dt));
        }
        Op::Log(x) => {
            let xt = v(x);
            let d = g.data().iter().zip(xt.data()).map(|(gy, a)| gy / a).collect();
            accumulate(adj, *x, like(xt, d));
        }
        Op::Sigmoid(x) => {
            let d = g
                .data()
                .iter()
                .zip(out.data())
                .map(|(gy, s)| gy * s * (1.0 - s))
                .collect();
            accumulate(adj, *x, like(v(x), d));
        }
        Op::Clamp { x, lo, hi } => {
            let xt = v(x);
            let d = g
                .data()
                .iter()
                .zip(xt.data())
                .map(|(gy, a)| if a >= lo && a <= hi { *gy } else { 0.0 })
                .collect();
            accumulate(adj, *x, like(xt, d));
        }
        Op::Pow(x, e) => {
            let xt = v(x);
            let d = g
                .data()
                .iter()
                .zip(xt.data())
                .map(|(gy, a)| if *e == 0.0 { 0.0 } else { gy * e * a.powf(e - 1.0) })
                .collect();
            accumulate(adj, *x, like(xt, d));
        }
        Op::Sum(x) => {
            let xt = v(x);
            accumulate(adj, *x, Tensor::full(xt.shape(), g.data()[0]));
        }
        Op::SelectRows { x, rows } => {
            let xt = v(x);
            let (_, c) = xt.rows_cols();
            let mut dx = vec![0.0; xt.len()];
            for (k, &i) in rows.iter().enumerate() {
                add_into(&mut dx[i * c..(i + 1) * c], &g.data()[k * c..(k + 1) * c]);
            }
            accumulate(adj, *x, like(xt, dx));
        }
        Op::SelectCols { x, cols } => {
            let xt = v(x);
            let (r, c) = xt.rows_cols();
            let w = cols.len();
            let mut dx = vec![0.0; xt.len()];
            for i in 0..r {
                for (k, &j) in cols.iter().enumerate() {
                    dx[i * c + j] += g.data()[i * w + k];
                }
            }
            accumulate(adj, *x, like(xt, dx));
        }
        Op::Gather { x, index } => {
            let xt = v(x);
            let (_, c) = xt.rows_cols();
            let mut dx = vec![0.0; xt.len()];
            for (k, &(i, j)) in index.iter().enumerate() {
                dx[i * c + j] += g.data()[k];
            }
            accumulate(adj, *x, like(xt, dx));
        }
        Op::SliceCols { x, start, len } => {
            let xt = v(x);
            let (r, c) = xt.rows_cols();
            let mut dx = vec![0.0; xt.len()];
            for i in 0..r {
                dx[i * c + start..i * c + start + len]
                    .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
            }
            accumulate(adj, *x, like(xt, dx));
        }
        Op::ConcatCols(xs) => {
            let (r, total) = g.rows_cols();
            let mut offset = 0;
            for x in xs {
                let xt = v(x);
                let (_, c) = xt.rows_cols();
                if needs[x.0] {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        dx[i * c..(i + 1) * c]
                            .copy_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                    }
                    accumulate(adj, *x, like(xt, dx));
                }
                offset += c;
            }
        }
    }
}

/// Central-difference gradient of `f` at `theta`:
/// `(f(theta + eps e_i) - f(theta - eps e_i)) / (2 eps)` for every coordinate.
pub fn finite_difference_grad<F>(mut f: F, theta: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {eps}")));
    }
    let mut probe = theta.clone();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteObjective(i));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(theta.shape().to_vec(), grad)
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute difference norm when both
/// are (near) zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;


    #[test]
    fn identity_matmul_returns_operand() {
        let a = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut b = GraphBuilder::new();
        let i = b.constant(Tensor::identity(3));
        let x = b.input("a");
        let y = b.matmul(i, x);
        b.output("y", y);
        let g = b.build();
        let inputs = BTreeMap::from([("a".to_string(), a.clone())]);
        let params = ParamStore::new();
        let eval = g.evaluate(&params, &inputs).unwrap();
        assert_eq!(eval.output("y").unwrap(), &a);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut b = GraphBuilder::new();
        let x = b.constant(Tensor::vector(vec![0.0; 3]));
        let y = b.softmax(x);
        b.output("y", y);
        let g = b.build();
        let params = ParamStore::new();
        let eval = g.evaluate(&params, NO_INPUTS).unwrap();
        for v in eval.output("y").unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut b = GraphBuilder::new();
        let x = b.constant(Tensor::matrix(1, 4, vec![2.5; 4]));
        let gain = b.constant(Tensor::full(&[4], 1.0));
        let bias = b.constant(Tensor::zeros(&[4]));
        let y = b.layer_norm(x, gain, bias);
        b.output("y", y);
        let g = b.build();
        let params = ParamStore::new();
        let eval = g.evaluate(&params, NO_INPUTS).unwrap();
        assert!(eval.output("y").unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_error_names_node() {
        let mut b = GraphBuilder::new();
        let x = b.constant(Tensor::zeros(&[2, 3]));
        let y = b.constant(Tensor::zeros(&[2, 3]));
        let z = b.matmul(x, y);
        b.output("z", z);
        let g = b.build();
        let err = g.evaluate(&ParamStore::new(), NO_INPUTS).unwrap_err();
        match err {
            Error::ShapeMismatch { node, .. } => {
                assert_eq!(node.id, 2);
                assert_eq!(node.op, "matmul");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unbound_input_is_reported() {
        let mut b = GraphBuilder::new();
        let x = b.input("x");
        b.output("x", x);
        let err = b.build().evaluate(&ParamStore::new(), NO_INPUTS).unwrap_err();
        assert!(matches!(err, Error::UnboundInput(name) if name == "x"));
    }

    #[test]
    fn square_gradient() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::scalar(3.0), true);
        let mut b = GraphBuilder::new();
        let x = b.param("x");
        let y = b.mul(x, x);
        let g = b.build();
        let eval = g.evaluate(&params, NO_INPUTS).unwrap();
        let grads = g.backward(&eval, y, &params).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::zeros(&[2, 3]), true);
        let mut b = GraphBuilder::new();
        let x = b.param("x");
        let s = b.sum(x);
        let g = b.build();
        let eval = g.evaluate(&params, NO_INPUTS).unwrap();
        let grads = g.backward(&eval, s, &params).unwrap();
        assert_eq!(grads.get("x").unwrap(), &Tensor::full(&[2, 3], 1.0));
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_evaluation() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::zeros(&[2]), true);
        let mut b = GraphBuilder::new();
        let x = b.param("x");
        let y = b.scale(x, 2.0);
        let g = b.build();
        let eval = g.evaluate(&params, NO_INPUTS).unwrap();
        assert!(matches!(
            g.backward(&eval, y, &params),
            Err(Error::NonScalarOutput { .. })
        ));

        let mut b2 = GraphBuilder::new();
        let x2 = b2.param("x");
        let s2 = b2.sum(x2);
        let g2 = b2.build();
        assert!(matches!(g2.backward(&eval, s2, &params), Err(Error::NotEvaluated)));
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::full(&[2], 2.0), false);
        params.insert("u", Tensor::full(&[2], 3.0), true);
        let mut b = GraphBuilder::new();
        let w = b.param("w");
        let u = b.param("u");
        let p = b.mul(w, u);
        let s = b.sum(p);
        let g = b.build();
        let eval = g.evaluate(&params, NO_INPUTS).unwrap();
        let grads = g.backward(&eval, s, &params).unwrap();
        assert!(grads.get("w").is_none());
        assert_eq!(grads.get("u").unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn finite_difference_of_square_and_constant() {
        let g = finite_difference_grad(|t| Ok(t.data()[0] * t.data()[0]), &Tensor::scalar(3.0), 1e-5)
            .unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
        let g = finite_difference_grad(|_| Ok(4.2), &Tensor::zeros(&[3]), 1e-5).unwrap();
        assert!(g.data().iter().all(|v| *v == 0.0));
        assert!(finite_difference_grad(|_| Ok(f64::NAN), &Tensor::scalar(1.0), 1e-5).is_err());
        assert!(finite_difference_grad(|_| Ok(0.0), &Tensor::scalar(1.0), 0.0).is_err());
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        // -log softmax(z)[0] at z = [2, 0]
        let mut params = ParamStore::new();
        params.insert("z", Tensor::matrix(1, 2, vec![2.0, 0.0]), true);
        let mut b = GraphBuilder::new();
        let z = b.param("z");
        let p = b.softmax(z);
        let pick = b.gather(p, vec![(0, 0)]);
        let l = b.log(pick);
        let s = b.sum(l);
        let loss = b.scale(s, -1.0);
        let g = b.build();
        let eval = g.evaluate(&params, NO_INPUTS).unwrap();
        let grads = g.backward(&eval, loss, &params).unwrap();

        let fd = finite_difference_grad(
            |t| {
                let mut ps = ParamStore::new();
                ps.insert("z", t.clone(), true);
                Ok(g.evaluate(&ps, NO_INPUTS)?.value(loss).data()[0])
            },
            params.get("z").unwrap(),
            1e-5,
        )
        .unwrap();
        let analytic = grads.get("z").unwrap();
        assert!(relative_error(analytic, &fd) < 1e-8);
        let e2 = 2f64.exp();
        let s0 = e2 / (e2 + 1.0);
        assert!((analytic.data()[0] - (s0 - 1.0)).abs() < 1e-12);
        assert!((analytic.data()[1] - (1.0 - s0)).abs() < 1e-12);
    }
}
