//! Recorded operation graph with eager forward evaluation and reverse-mode
//! gradients.
//!
//! Models build a [`Tape`] while computing: every operation is appended to a
//! [`ComputeGraph`] and its value is stored alongside. The graph can later be
//! replayed with different bindings through [`evaluate`], and [`backward`]
//! walks it in reverse to produce a [`GradientMap`] keyed by parameter name.

use std::collections::BTreeMap;

use super::params::{GradientMap, ParamSet};
use super::tensor::{matmul, matmul_a_bt_acc, matmul_at_b_acc, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Operation kinds. Non-node operands (indices, masks, constants) are stored
/// inline so that a graph can be replayed from bindings alone.
#[derive(Clone, Debug)]
pub enum Op {
    Param(String),
    Input(String),
    Const(Tensor),
    /// `[m,k] x [k,n]`
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `[m,n] + [n]`, bias broadcast over rows.
    AddRow(NodeId, NodeId),
    /// `[m,n] * [m,1]`, column broadcast over each row.
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    /// `ln(max(x, floor))`
    LogFloor(NodeId, f64),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    /// Embedding lookup: rows of a `[V,E]` table.
    GatherRows(NodeId, Vec<usize>),
    /// `L` tensors of shape `[B,D]` into `[B,L,D]`.
    StackMid(Vec<NodeId>),
    Reshape(NodeId, Vec<usize>),
    /// `[B,L,A] + [B,A]` broadcast over the middle axis.
    AddMid(NodeId, NodeId),
    /// Softmax over the last axis; masked-out entries get probability 0.
    Softmax(NodeId, Option<Vec<bool>>),
    /// `w [B,L]`, `v [B,L,D]` to `[B,D]` with `out[b] = sum_l w[b,l] v[b,l]`.
    WeightedSum(NodeId, NodeId),
    /// `[B,L]` scattered into `[B,width]` at columns `index[b*L + l]`.
    ScatterCols(NodeId, Vec<usize>, usize),
    /// `[B,V]` to `[B,1]` picking column `index[b]` of each row.
    PickCols(NodeId, Vec<usize>),
    /// Row-wise choice: row `r` comes from `new` when `keep_new[r]`, else `old`.
    RowSelect(Vec<bool>, NodeId, NodeId),
    /// Sum of all elements to a `[1]` tensor.
    Sum(NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Input(_) => "input",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::LogFloor(..) => "log_floor",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::StackMid(_) => "stack_mid",
            Op::Reshape(..) => "reshape",
            Op::AddMid(..) => "add_mid",
            Op::Softmax(..) => "softmax",
            Op::WeightedSum(..) => "weighted_sum",
            Op::ScatterCols(..) => "scatter_cols",
            Op::PickCols(..) => "pick_cols",
            Op::RowSelect(..) => "row_select",
            Op::Sum(_) => "sum",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Param(_) | Op::Input(_) | Op::Const(_) => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulCol(a, b)
            | Op::AddMid(a, b)
            | Op::WeightedSum(a, b)
            | Op::RowSelect(_, a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::LogFloor(a, _)
            | Op::SliceCols(a, ..)
            | Op::GatherRows(a, _)
            | Op::Reshape(a, _)
            | Op::Softmax(a, _)
            | Op::ScatterCols(a, ..)
            | Op::PickCols(a, _)
            | Op::Sum(a) => vec![*a],
            Op::ConcatCols(xs) | Op::StackMid(xs) => xs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub shape: Vec<usize>,
}

/// Ordered, acyclic list of operations. Inputs of a node always precede it.
#[derive(Clone, Debug, Default)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
}

impl ComputeGraph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn params(&self) -> &BTreeMap<String, NodeId> {
        &self.params
    }

    /// Checks topological order: every input id precedes its consumer.
    pub fn validate(&self) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(bad) = node.op.inputs().into_iter().find(|id| id.0 >= i) {
                return Err(shape_err(i, &node.op, format!("input {} does not precede it", bad.0)));
            }
        }
        Ok(())
    }
}

/// Forward values of every node, index-aligned with the graph.
#[derive(Clone, Debug, Default)]
pub struct ForwardValues(pub Vec<Tensor>);

impl ForwardValues {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.0[id.0]
    }
}

/// Free-input bindings for [`evaluate`]. Parameters and named inputs share
/// one namespace per kind.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    pub params: BTreeMap<String, Tensor>,
    pub inputs: BTreeMap<String, Tensor>,
}

impl Bindings {
    pub fn from_params(params: &ParamSet) -> Self {
        Self {
            params: params.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            inputs: BTreeMap::new(),
        }
    }
}

/// Replays `graph` with new bindings. Every node's value is recomputed and
/// checked against the recorded shape.
pub fn evaluate(graph: &ComputeGraph, bindings: &Bindings) -> Result<ForwardValues> {
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    for (i, node) in graph.nodes.iter().enumerate() {
        let value = match &node.op {
            Op::Param(name) => bindings.params.get(name).cloned().ok_or_else(|| Error::Unbound {
                node: i,
                kind: "parameter",
                name: name.clone(),
            })?,
            Op::Input(name) => bindings.inputs.get(name).cloned().ok_or_else(|| Error::Unbound {
                node: i,
                kind: "input",
                name: name.clone(),
            })?,
            op => forward_op(i, op, &values)?,
        };
        if value.shape() != node.shape.as_slice() {
            return Err(Error::Shape {
                node: i,
                op: node.op.name(),
                detail: format!("expected {:?}, got {:?}", node.shape, value.shape()),
            });
        }
        values.push(value);
    }
    Ok(ForwardValues(values))
}

/// Reverse-mode gradients of the scalar `loss` with respect to every
/// parameter node of `graph`.
pub fn backward(graph: &ComputeGraph, loss: NodeId, values: &ForwardValues) -> Result<GradientMap> {
    backward_slice(graph, loss, &values.0)
}

fn backward_slice(graph: &ComputeGraph, loss: NodeId, values: &[Tensor]) -> Result<GradientMap> {
    if values.len() != graph.nodes.len() {
        return Err(Error::Unevaluated {
            expected: graph.nodes.len(),
            got: values.len(),
        });
    }
    let loss_value = values.get(loss.0).ok_or(Error::Unevaluated {
        expected: loss.0 + 1,
        got: values.len(),
    })?;
    if !loss_value.is_scalar() {
        return Err(Error::NonScalarLoss {
            node: loss.0,
            shape: loss_value.shape().to_vec(),
        });
    }

    let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
    grads[loss.0] = Some(Tensor::filled(loss_value.shape(), 1.0));

    for i in (0..=loss.0).rev() {
        let Some(dy) = grads[i].take() else { continue };
        let node = &graph.nodes[i];
        if let Op::Param(_) = node.op {
            grads[i] = Some(dy);
            continue;
        }
        backward_op(&node.op, &dy, values, i, &mut grads);
    }

    let mut out = BTreeMap::new();
    for (name, id) in &graph.params {
        let g = if id.0 < grads.len() {
            grads[id.0].take()
        } else {
            None
        };
        let g = g.unwrap_or_else(|| Tensor::zeros(&graph.nodes[id.0].shape));
        out.insert(name.clone(), g);
    }
    Ok(GradientMap::from_map(out))
}

/// Graph builder that evaluates eagerly.
///
/// Shape errors in builder calls are programming errors in model code and
/// panic with the offending node index. Use [`evaluate`] for checked replay.
#[derive(Default)]
pub struct Tape {
    graph: ComputeGraph,
    values: Vec<Tensor>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn graph(&self) -> &ComputeGraph {
        &self.graph
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn into_parts(self) -> (ComputeGraph, ForwardValues) {
        (self.graph, ForwardValues(self.values))
    }

    fn push_leaf(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.graph.nodes.len());
        self.graph.nodes.push(Node {
            op,
            shape: value.shape().to_vec(),
        });
        self.values.push(value);
        id
    }

    fn push(&mut self, op: Op) -> NodeId {
        let idx = self.graph.nodes.len();
        let value = forward_op(idx, &op, &self.values).unwrap_or_else(|e| panic!("{e}"));
        self.push_leaf(op, value)
    }

    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        if let Some(&id) = self.graph.params.get(name) {
            return id;
        }
        let id = self.push_leaf(Op::Param(name.to_string()), value.clone());
        self.graph.params.insert(name.to_string(), id);
        id
    }

    /// Registers every tensor of `params` and returns their node ids by name.
    pub fn params(&mut self, params: &ParamSet) -> BTreeMap<String, NodeId> {
        params
            .iter()
            .map(|(name, t)| (name.clone(), self.param(name, t)))
            .collect()
    }

    pub fn input(&mut self, name: &str, value: Tensor) -> NodeId {
        self.push_leaf(Op::Input(name.to_string()), value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(Op::Const(value.clone()), value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddRow(a, bias))
    }
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        self.push(Op::MulCol(a, col))
    }
    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.push(Op::Scale(a, s))
    }
    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        self.push(Op::AddScalar(a, s))
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }
    pub fn log_floor(&mut self, a: NodeId, floor: f64) -> NodeId {
        self.push(Op::LogFloor(a, floor))
    }
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        self.push(Op::SliceCols(a, start, end))
    }
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> NodeId {
        self.push(Op::ConcatCols(xs.to_vec()))
    }
    pub fn gather_rows(&mut self, table: NodeId, rows: Vec<usize>) -> NodeId {
        self.push(Op::GatherRows(table, rows))
    }
    pub fn stack_mid(&mut self, xs: &[NodeId]) -> NodeId {
        self.push(Op::StackMid(xs.to_vec()))
    }
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(a, shape.to_vec()))
    }
    pub fn add_mid(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::AddMid(a, b))
    }
    pub fn softmax(&mut self, a: NodeId, mask: Option<Vec<bool>>) -> NodeId {
        self.push(Op::Softmax(a, mask))
    }
    pub fn weighted_sum(&mut self, w: NodeId, v: NodeId) -> NodeId {
        self.push(Op::WeightedSum(w, v))
    }
    pub fn scatter_cols(&mut self, a: NodeId, index: Vec<usize>, width: usize) -> NodeId {
        self.push(Op::ScatterCols(a, index, width))
    }
    pub fn pick_cols(&mut self, a: NodeId, index: Vec<usize>) -> NodeId {
        self.push(Op::PickCols(a, index))
    }
    pub fn row_select(&mut self, keep_new: Vec<bool>, new: NodeId, old: NodeId) -> NodeId {
        self.push(Op::RowSelect(keep_new, new, old))
    }
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    /// Gradients of `loss` with respect to every registered parameter.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        backward_slice(&self.graph, loss, &self.values)
    }
}

fn shape_err(node: usize, op: &Op, detail: String) -> Error {
    Error::Shape {
        node,
        op: op.name(),
        detail,
    }
}

fn mat_dims(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

fn forward_op(idx: usize, op: &Op, values: &[Tensor]) -> Result<Tensor> {
    let get = |id: &NodeId| -> Result<&Tensor> {
        values
            .get(id.0)
            .ok_or_else(|| shape_err(idx, op, format!("input node {} not yet defined", id.0)))
    };
    let err = |detail: String| shape_err(idx, op, detail);

    Ok(match op {
        Op::Param(_) | Op::Input(_) => unreachable!("leaves are bound by the caller"),
        Op::Const(t) => t.clone(),
        Op::MatMul(a, b) => {
            let (a, b) = (get(a)?, get(b)?);
            let ((m, k), (k2, n)) = match (mat_dims(a), mat_dims(b)) {
                (Some(x), Some(y)) => (x, y),
                _ => return Err(err(format!("needs 2-D operands, got {:?} x {:?}", a.shape(), b.shape()))),
            };
            if k != k2 {
                return Err(err(format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            Tensor::from_parts(vec![m, n], matmul(a.data(), b.data(), m, k, n))
        }
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (a, b) = (get(a)?, get(b)?);
            if a.shape() != b.shape() {
                return Err(err(format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            match op {
                Op::Add(..) => a.zip_map(b, |x, y| x + y),
                Op::Sub(..) => a.zip_map(b, |x, y| x - y),
                _ => a.zip_map(b, |x, y| x * y),
            }
        }
        Op::AddRow(a, bias) => {
            let (a, bias) = (get(a)?, get(bias)?);
            let (_, n) = a.as_matrix_dims();
            if bias.numel() != n {
                return Err(err(format!("bias {:?} for {:?}", bias.shape(), a.shape())));
            }
            let mut out = a.clone();
            for row in out.data_mut().chunks_mut(n) {
                for (o, b) in row.iter_mut().zip(bias.data()) {
                    *o += b;
                }
            }
            out
        }
        Op::MulCol(a, col) => {
            let (a, col) = (get(a)?, get(col)?);
            let (m, n) = a.as_matrix_dims();
            if col.numel() != m {
                return Err(err(format!("column {:?} for {:?}", col.shape(), a.shape())));
            }
            let mut out = a.clone();
            for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
                let s = col.data()[r];
                row.iter_mut().for_each(|v| *v *= s);
            }
            out
        }
        Op::Scale(a, s) => get(a)?.map(|v| v * s),
        Op::AddScalar(a, s) => get(a)?.map(|v| v + s),
        Op::Sigmoid(a) => get(a)?.map(sigmoid),
        Op::Tanh(a) => get(a)?.map(f64::tanh),
        Op::LogFloor(a, floor) => get(a)?.map(|v| v.max(*floor).ln()),
        Op::SliceCols(a, start, end) => {
            let a = get(a)?;
            let (m, n) = a.as_matrix_dims();
            if start >= end || *end > n {
                return Err(err(format!("columns {start}..{end} of {:?}", a.shape())));
            }
            let w = end - start;
            let mut data = Vec::with_capacity(m * w);
            for r in 0..m {
                data.extend_from_slice(&a.data()[r * n + start..r * n + end]);
            }
            Tensor::from_parts(vec![m, w], data)
        }
        Op::ConcatCols(xs) => {
            let parts: Vec<&Tensor> = xs.iter().map(get).collect::<Result<_>>()?;
            let m = parts
                .first()
                .ok_or_else(|| err("nothing to concatenate".into()))?
                .as_matrix_dims()
                .0;
            if parts.iter().any(|p| p.shape().len() != 2 || p.shape()[0] != m) {
                let shapes: Vec<_> = parts.iter().map(|p| p.shape().to_vec()).collect();
                return Err(err(format!("row counts differ: {shapes:?}")));
            }
            let n: usize = parts.iter().map(|p| p.shape()[1]).sum();
            let mut data = Vec::with_capacity(m * n);
            for r in 0..m {
                for p in &parts {
                    data.extend_from_slice(p.row(r));
                }
            }
            Tensor::from_parts(vec![m, n], data)
        }
        Op::GatherRows(table, rows) => {
            let table = get(table)?;
            let (v, e) = mat_dims(table).ok_or_else(|| err(format!("table {:?}", table.shape())))?;
            if rows.is_empty() {
                return Err(err("no rows requested".into()));
            }
            let mut data = Vec::with_capacity(rows.len() * e);
            for &r in rows {
                if r >= v {
                    return Err(err(format!("row {r} out of range for {v} rows")));
                }
                data.extend_from_slice(table.row(r));
            }
            Tensor::from_parts(vec![rows.len(), e], data)
        }
        Op::StackMid(xs) => {
            let parts: Vec<&Tensor> = xs.iter().map(get).collect::<Result<_>>()?;
            let first = parts.first().ok_or_else(|| err("nothing to stack".into()))?;
            let (b, d) = mat_dims(first).ok_or_else(|| err(format!("{:?}", first.shape())))?;
            if parts.iter().any(|p| p.shape() != first.shape()) {
                return Err(err("stacked tensors differ in shape".into()));
            }
            let l = parts.len();
            let mut data = vec![0.0; b * l * d];
            for (li, p) in parts.iter().enumerate() {
                for bi in 0..b {
                    data[(bi * l + li) * d..(bi * l + li + 1) * d].copy_from_slice(p.row(bi));
                }
            }
            Tensor::from_parts(vec![b, l, d], data)
        }
        Op::Reshape(a, shape) => {
            let a = get(a)?;
            Tensor::new(shape.clone(), a.data().to_vec()).map_err(|e| err(e.to_string()))?
        }
        Op::AddMid(a, b) => {
            let (a, b) = (get(a)?, get(b)?);
            let [bsz, l, d] = *a.shape() else {
                return Err(err(format!("needs [B,L,D], got {:?}", a.shape())));
            };
            if b.shape() != [bsz, d] {
                return Err(err(format!("{:?} + {:?}", a.shape(), b.shape())));
            }
            let mut out = a.clone();
            let od = out.data_mut();
            for bi in 0..bsz {
                let brow = b.row(bi);
                for li in 0..l {
                    let base = (bi * l + li) * d;
                    for j in 0..d {
                        od[base + j] += brow[j];
                    }
                }
            }
            out
        }
        Op::Softmax(a, mask) => {
            let a = get(a)?;
            if let Some(mask) = mask {
                if mask.len() != a.numel() {
                    return Err(err(format!("mask of {} for {:?}", mask.len(), a.shape())));
                }
            }
            softmax_rows(a, mask.as_deref()).map_err(err)?
        }
        Op::WeightedSum(w, v) => {
            let (w, v) = (get(w)?, get(v)?);
            let [bsz, l, d] = *v.shape() else {
                return Err(err(format!("values need [B,L,D], got {:?}", v.shape())));
            };
            if w.shape() != [bsz, l] {
                return Err(err(format!("weights {:?} for values {:?}", w.shape(), v.shape())));
            }
            let mut data = vec![0.0; bsz * d];
            for bi in 0..bsz {
                let orow = &mut data[bi * d..(bi + 1) * d];
                for li in 0..l {
                    let wv = w.data()[bi * l + li];
                    let vrow = &v.data()[(bi * l + li) * d..(bi * l + li + 1) * d];
                    for (o, x) in orow.iter_mut().zip(vrow) {
                        *o += wv * x;
                    }
                }
            }
            Tensor::from_parts(vec![bsz, d], data)
        }
        Op::ScatterCols(a, index, width) => {
            let a = get(a)?;
            let (bsz, l) = mat_dims(a).ok_or_else(|| err(format!("{:?}", a.shape())))?;
            if index.len() != bsz * l || index.iter().any(|&c| c >= *width) {
                return Err(err(format!("index of {} into width {width}", index.len())));
            }
            let mut data = vec![0.0; bsz * width];
            for bi in 0..bsz {
                for li in 0..l {
                    data[bi * width + index[bi * l + li]] += a.data()[bi * l + li];
                }
            }
            Tensor::from_parts(vec![bsz, *width], data)
        }
        Op::PickCols(a, index) => {
            let a = get(a)?;
            let (bsz, v) = mat_dims(a).ok_or_else(|| err(format!("{:?}", a.shape())))?;
            if index.len() != bsz || index.iter().any(|&c| c >= v) {
                return Err(err(format!("{} indices into {:?}", index.len(), a.shape())));
            }
            let data = index.iter().enumerate().map(|(r, &c)| a.data()[r * v + c]).collect();
            Tensor::from_parts(vec![bsz, 1], data)
        }
        Op::RowSelect(keep, new, old) => {
            let (new, old) = (get(new)?, get(old)?);
            if new.shape() != old.shape() {
                return Err(err(format!("{:?} vs {:?}", new.shape(), old.shape())));
            }
            let (m, n) = new.as_matrix_dims();
            if keep.len() != m {
                return Err(err(format!("{} flags for {m} rows", keep.len())));
            }
            let mut data = Vec::with_capacity(m * n);
            for (r, &k) in keep.iter().enumerate() {
                data.extend_from_slice(if k { new.row(r) } else { old.row(r) });
            }
            Tensor::from_parts(new.shape().to_vec(), data)
        }
        Op::Sum(a) => Tensor::scalar(get(a)?.data().iter().sum()),
    })
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(a: &Tensor, mask: Option<&[bool]>) -> std::result::Result<Tensor, String> {
    let (m, n) = a.as_matrix_dims();
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let row = &a.data()[r * n..(r + 1) * n];
        let live = |j: usize| mask.is_none_or(|mk| mk[r * n + j]);
        let max = (0..n)
            .filter(|&j| live(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if !(0..n).any(live) {
            return Err(format!("row {r} is fully masked"));
        }
        let orow = &mut out[r * n..(r + 1) * n];
        if !max.is_finite() {
            // overflowed or NaN inputs: propagate so the caller sees a
            // non-finite loss instead of a bogus distribution
            orow.iter_mut().for_each(|v| *v = f64::NAN);
            continue;
        }
        let mut total = 0.0;
        for j in 0..n {
            if live(j) {
                orow[j] = (row[j] - max).exp();
                total += orow[j];
            }
        }
        orow.iter_mut().for_each(|v| *v /= total);
    }
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backward_op(op: &Op, dy: &Tensor, values: &[Tensor], idx: usize, grads: &mut [Option<Tensor>]) {
    let val = |id: &NodeId| &values[id.0];
    let y = &values[idx];
    match op {
        Op::Param(_) | Op::Input(_) | Op::Const(_) => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k) = av.as_matrix_dims();
            let n = bv.shape()[1];
            let mut da = vec![0.0; m * k];
            matmul_a_bt_acc(dy.data(), bv.data(), &mut da, m, k, n);
            let mut db = vec![0.0; k * n];
            matmul_at_b_acc(av.data(), dy.data(), &mut db, m, k, n);
            accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
            accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
        }
        Op::Add(a, b) => {
            accumulate(grads, *a, dy.clone());
            accumulate(grads, *b, dy.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, dy.clone());
            accumulate(grads, *b, dy.map(|v| -v));
        }
        Op::Mul(a, b) => {
            accumulate(grads, *a, dy.zip_map(val(b), |d, x| d * x));
            accumulate(grads, *b, dy.zip_map(val(a), |d, x| d * x));
        }
        Op::AddRow(a, bias) => {
            let (_, n) = dy.as_matrix_dims();
            let mut db = vec![0.0; n];
            for row in dy.data().chunks(n) {
                for (o, v) in db.iter_mut().zip(row) {
                    *o += v;
                }
            }
            accumulate(grads, *a, dy.clone());
            accumulate(grads, *bias, Tensor::from_parts(val(bias).shape().to_vec(), db));
        }
        Op::MulCol(a, col) => {
            let (av, cv) = (val(a), val(col));
            let (m, n) = av.as_matrix_dims();
            let mut da = dy.clone();
            let mut dc = vec![0.0; m];
            for r in 0..m {
                let s = cv.data()[r];
                let drow = &mut da.data_mut()[r * n..(r + 1) * n];
                let arow = av.row(r);
                let mut acc = 0.0;
                for (d, x) in drow.iter_mut().zip(arow) {
                    acc += *d * x;
                    *d *= s;
                }
                dc[r] = acc;
            }
            accumulate(grads, *a, da);
            accumulate(grads, *col, Tensor::from_parts(cv.shape().to_vec(), dc));
        }
        Op::Scale(a, s) => accumulate(grads, *a, dy.map(|v| v * s)),
        Op::AddScalar(a, _) => accumulate(grads, *a, dy.clone()),
        Op::Sigmoid(a) => accumulate(grads, *a, dy.zip_map(y, |d, s| d * s * (1.0 - s))),
        Op::Tanh(a) => accumulate(grads, *a, dy.zip_map(y, |d, t| d * (1.0 - t * t))),
        Op::LogFloor(a, floor) => {
            let g = dy.zip_map(val(a), |d, x| if x > *floor { d / x } else { 0.0 });
            accumulate(grads, *a, g);
        }
        Op::SliceCols(a, start, end) => {
            let av = val(a);
            let (m, n) = av.as_matrix_dims();
            let w = end - start;
            let mut da = Tensor::zeros(av.shape());
            for r in 0..m {
                da.data_mut()[r * n + start..r * n + end].copy_from_slice(&dy.data()[r * w..(r + 1) * w]);
            }
            accumulate(grads, *a, da);
        }
        Op::ConcatCols(xs) => {
            let (m, n) = dy.as_matrix_dims();
            let mut offset = 0;
            for x in xs {
                let w = val(x).shape()[1];
                let mut dx = Vec::with_capacity(m * w);
                for r in 0..m {
                    dx.extend_from_slice(&dy.data()[r * n + offset..r * n + offset + w]);
                }
                accumulate(grads, *x, Tensor::from_parts(vec![m, w], dx));
                offset += w;
            }
        }
        Op::GatherRows(table, rows) => {
            let tv = val(table);
            let e = tv.shape()[1];
            let mut dt = Tensor::zeros(tv.shape());
            for (i, &r) in rows.iter().enumerate() {
                let src = &dy.data()[i * e..(i + 1) * e];
                for (o, v) in dt.data_mut()[r * e..(r + 1) * e].iter_mut().zip(src) {
                    *o += v;
                }
            }
            accumulate(grads, *table, dt);
        }
        Op::StackMid(xs) => {
            let [b, l, d] = *dy.shape() else { unreachable!() };
            for (li, x) in xs.iter().enumerate() {
                let mut dx = Vec::with_capacity(b * d);
                for bi in 0..b {
                    dx.extend_from_slice(&dy.data()[(bi * l + li) * d..(bi * l + li + 1) * d]);
                }
                accumulate(grads, *x, Tensor::from_parts(vec![b, d], dx));
            }
        }
        Op::Reshape(a, _) => {
            let shape = val(a).shape().to_vec();
            accumulate(grads, *a, Tensor::from_parts(shape, dy.data().to_vec()));
        }
        Op::AddMid(a, b) => {
            let [bsz, l, d] = *dy.shape() else { unreachable!() };
            let mut db = vec![0.0; bsz * d];
            for bi in 0..bsz {
                for li in 0..l {
                    let base = (bi * l + li) * d;
                    for j in 0..d {
                        db[bi * d + j] += dy.data()[base + j];
                    }
                }
            }
            accumulate(grads, *a, dy.clone());
            accumulate(grads, *b, Tensor::from_parts(vec![bsz, d], db));
        }
        Op::Softmax(a, _) => {
            let (m, n) = y.as_matrix_dims();
            let mut dx = vec![0.0; m * n];
            for r in 0..m {
                let yr = y.row(r);
                let dr = dy.row(r);
                let dot: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                for j in 0..n {
                    dx[r * n + j] = yr[j] * (dr[j] - dot);
                }
            }
            accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), dx));
        }
        Op::WeightedSum(w, v) => {
            let (wv, vv) = (val(w), val(v));
            let [bsz, l, d] = *vv.shape() else { unreachable!() };
            let mut dw = vec![0.0; bsz * l];
            let mut dv = vec![0.0; bsz * l * d];
            for bi in 0..bsz {
                let drow = dy.row(bi);
                for li in 0..l {
                    let base = (bi * l + li) * d;
                    let vrow = &vv.data()[base..base + d];
                    dw[bi * l + li] = vrow.iter().zip(drow).map(|(x, g)| x * g).sum();
                    let wgt = wv.data()[bi * l + li];
                    for j in 0..d {
                        dv[base + j] = wgt * drow[j];
                    }
                }
            }
            accumulate(grads, *w, Tensor::from_parts(vec![bsz, l], dw));
            accumulate(grads, *v, Tensor::from_parts(vec![bsz, l, d], dv));
        }
        Op::ScatterCols(a, index, width) => {
            let av = val(a);
            let (bsz, l) = av.as_matrix_dims();
            let mut da = vec![0.0; bsz * l];
            for bi in 0..bsz {
                for li in 0..l {
                    da[bi * l + li] = dy.data()[bi * width + index[bi * l + li]];
                }
            }
            accumulate(grads, *a, Tensor::from_parts(vec![bsz, l], da));
        }
        Op::PickCols(a, index) => {
            let av = val(a);
            let (_, v) = av.as_matrix_dims();
            let mut da = Tensor::zeros(av.shape());
            for (r, &c) in index.iter().enumerate() {
                da.data_mut()[r * v + c] = dy.data()[r];
            }
            accumulate(grads, *a, da);
        }
        Op::RowSelect(keep, new, old) => {
            let (_, n) = dy.as_matrix_dims();
            let mut dn = Tensor::zeros(dy.shape());
            let mut dold = Tensor::zeros(dy.shape());
            for (r, &k) in keep.iter().enumerate() {
                let target = if k { &mut dn } else { &mut dold };
                target.data_mut()[r * n..(r + 1) * n].copy_from_slice(dy.row(r));
            }
            accumulate(grads, *new, dn);
            accumulate(grads, *old, dold);
        }
        Op::Sum(a) => {
            let shape = val(a).shape().to_vec();
            accumulate(grads, *a, Tensor::filled(&shape, dy.item()));
        }
    }
}
