//! Reverse-mode differentiation over an explicit operation graph.
//!
//! Nodes are appended in topological order and carry inferred shapes; values
//! are produced by an explicit `forward` pass and retained for `backward`.
//! The op set is exactly what the translation model needs: matmul, adds,
//! elementwise multiply (dropout masks enter as constants), relu, softmax,
//! layer norm, embedding lookup, column slice/concat, and the label-smoothed
//! cross-entropy head.

use crate::error::{Error, Result};
use crate::tensor::{matmul, Scalar, Tensor};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op<S> {
    Input { name: String },
    Const,
    Param,
    MatMul { transpose_b: bool },
    Add,
    /// [m,n] plus a broadcast [1,n] row.
    AddRow,
    Mul,
    Scale { factor: S },
    Relu,
    Softmax,
    LayerNorm { eps: S },
    Embedding { ids: Vec<usize> },
    ConcatCols,
    SliceCols { start: usize, len: usize },
    SumAll,
    /// Sum of label-smoothed cross entropy over non-pad rows.
    CeSum {
        targets: Vec<usize>,
        smoothing: S,
        pad: Option<usize>,
    },
}

impl<S> Op<S> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Const => "const",
            Op::Param => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::AddRow => "add_row",
            Op::Mul => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu => "relu",
            Op::Softmax => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::ConcatCols => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::SumAll => "sum_all",
            Op::CeSum { .. } => "ce_sum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<S> {
    op: Op<S>,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    /// Node values; leaves persist across forward passes.
    values: Vec<Option<Tensor<S>>>,
    grads: Vec<Option<Tensor<S>>>,
    params: BTreeMap<String, NodeId>,
    input_names: BTreeMap<String, NodeId>,
    forward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
            input_names: BTreeMap::new(),
            forward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<S>, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs, shape });
        self.values.push(None);
        self.grads.push(None);
        self.forward_done = false;
        id
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn dims2_of(&self, id: NodeId) -> (usize, usize) {
        let s = self.shape_of(id);
        match s.len() {
            0 => (1, 1),
            1 => (1, s[0]),
            _ => (s[0], s[1]),
        }
    }

    fn mismatch(&self, op: &str, a: NodeId, b: NodeId) -> Error {
        Error::ShapeMismatch {
            op: format!("{op} at node {}", self.nodes.len()),
            lhs: self.shape_of(a).to_vec(),
            rhs: self.shape_of(b).to_vec(),
        }
    }

    // ---- construction ----

    /// Placeholder fed at forward time.
    pub fn input(&mut self, name: &str, shape: Vec<usize>) -> NodeId {
        let id = self.push(
            Op::Input {
                name: name.to_string(),
            },
            vec![],
            shape,
        );
        self.input_names.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        let shape = value.shape().to_vec();
        let id = self.push(Op::Const, vec![], shape);
        self.values[id.0] = Some(value);
        id
    }

    /// Trainable leaf. Names must be unique within a graph.
    pub fn param(&mut self, name: &str, value: Tensor<S>) -> NodeId {
        assert!(
            !self.params.contains_key(name),
            "duplicate parameter {name}"
        );
        let shape = value.shape().to_vec();
        let id = self.push(Op::Param, vec![], shape);
        self.values[id.0] = Some(value);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let id = *self
            .params
            .get(name)
            .ok_or_else(|| Error::Graph(format!("unknown parameter {name}")))?;
        if value.shape() != self.shape_of(id) {
            return Err(Error::ShapeMismatch {
                op: format!("set_param({name})"),
                lhs: self.shape_of(id).to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = Some(value);
        self.forward_done = false;
        Ok(())
    }

    pub fn param_id(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    /// Current value of a parameter leaf. Unlike `value`, this never requires
    /// a forward pass: leaves always hold their stored tensor.
    pub fn param_value(&self, name: &str) -> Result<&Tensor<S>> {
        let id = self
            .params
            .get(name)
            .ok_or_else(|| Error::Graph(format!("unknown parameter {name}")))?;
        Ok(self.values[id.0].as_ref().expect("parameter without value"))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// a x b^T; used for attention scores and the shared-embedding output head.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (m, k1) = self.dims2_of(a);
        let (br, bc) = self.dims2_of(b);
        let (k2, n) = if transpose_b { (bc, br) } else { (br, bc) };
        if k1 != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        Ok(self.push(Op::MatMul { transpose_b }, vec![a, b], vec![m, n]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(self.mismatch("add", a, b));
        }
        let shape = self.shape_of(a).to_vec();
        Ok(self.push(Op::Add, vec![a, b], shape))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, n) = self.dims2_of(a);
        let (rr, rn) = self.dims2_of(row);
        if rr != 1 || rn != n {
            return Err(self.mismatch("add_row", a, row));
        }
        let shape = self.shape_of(a).to_vec();
        Ok(self.push(Op::AddRow, vec![a, row], shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let shape = self.shape_of(a).to_vec();
        Ok(self.push(Op::Mul, vec![a, b], shape))
    }

    pub fn scale(&mut self, a: NodeId, factor: S) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::Scale { factor }, vec![a], shape)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::Relu, vec![a], shape)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(Op::Softmax, vec![a], shape)
    }

    /// Row-wise layer norm followed by affine gain/shift.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: S) -> Result<NodeId> {
        let (_, n) = self.dims2_of(x);
        for affine in [gain, bias] {
            let (r, c) = self.dims2_of(affine);
            if r != 1 || c != n {
                return Err(self.mismatch("layer_norm", x, affine));
            }
        }
        let shape = self.shape_of(x).to_vec();
        Ok(self.push(Op::LayerNorm { eps }, vec![x, gain, bias], shape))
    }

    /// Gather rows of `table` by token id.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.dims2_of(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Graph(format!(
                "embedding id {bad} out of range for table with {v} rows"
            )));
        }
        Ok(self.push(
            Op::Embedding { ids: ids.to_vec() },
            vec![table],
            vec![ids.len(), d],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty());
        let (m, _) = self.dims2_of(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.dims2_of(p);
            if pm != m {
                return Err(self.mismatch("concat_cols", parts[0], p));
            }
            total += pn;
        }
        Ok(self.push(Op::ConcatCols, parts.to_vec(), vec![m, total]))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims2_of(a);
        if start + len > n {
            return Err(Error::Graph(format!(
                "slice_cols [{start}, {}) out of range for {n} columns",
                start + len
            )));
        }
        Ok(self.push(Op::SliceCols { start, len }, vec![a], vec![m, len]))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumAll, vec![a], vec![1, 1])
    }

    /// Sum over non-pad rows of cross entropy against the smoothed target
    /// distribution q = (1-eps) * onehot + eps/V. Returns the loss node and
    /// the number of rows that contributed.
    pub fn ce_sum(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        smoothing: S,
        pad: Option<usize>,
    ) -> Result<(NodeId, usize)> {
        let (t, v) = self.dims2_of(logits);
        if targets.len() != t {
            return Err(Error::Graph(format!(
                "ce_sum: {} targets for {t} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::Graph(format!(
                "ce_sum: target {bad} out of range for vocab {v}"
            )));
        }
        if smoothing < S::zero() || smoothing >= S::one() {
            return Err(Error::InvalidArgument(format!(
                "label smoothing must be in [0, 1), got {smoothing}"
            )));
        }
        let non_pad = targets.iter().filter(|&&y| Some(y) != pad).count();
        if non_pad == 0 {
            return Err(Error::InvalidArgument(
                "ce_sum: every target position is padding".into(),
            ));
        }
        let id = self.push(
            Op::CeSum {
                targets: targets.to_vec(),
                smoothing,
                pad,
            },
            vec![logits],
            vec![1, 1],
        );
        Ok((id, non_pad))
    }

    // ---- execution ----

    /// Evaluate every node in order. `inputs` must cover all Input nodes.
    pub fn forward(&mut self, inputs: &BTreeMap<String, Tensor<S>>) -> Result<()> {
        for i in 0..self.nodes.len() {
            let value = match &self.nodes[i].op {
                Op::Input { name } => {
                    let t = inputs
                        .get(name)
                        .ok_or_else(|| Error::Graph(format!("missing input {name}")))?;
                    if t.shape() != self.nodes[i].shape.as_slice() {
                        return Err(Error::ShapeMismatch {
                            op: format!("input {name}"),
                            lhs: self.nodes[i].shape.clone(),
                            rhs: t.shape().to_vec(),
                        });
                    }
                    t.clone()
                }
                Op::Const | Op::Param => {
                    // Leaves keep their stored value.
                    continue;
                }
                _ => self.eval(i)?,
            };
            if !value.all_finite() {
                return Err(Error::NonFinite {
                    op: format!("{} at node {i}", self.nodes[i].op.kind()),
                });
            }
            self.values[i] = Some(value);
        }
        self.forward_done = true;
        Ok(())
    }

    fn val(&self, id: NodeId) -> &Tensor<S> {
        self.values[id.0]
            .as_ref()
            .expect("value not computed; forward ordering violated")
    }

    fn eval(&self, i: usize) -> Result<Tensor<S>> {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        Ok(match &node.op {
            Op::Input { .. } | Op::Const | Op::Param => unreachable!(),
            Op::MatMul { transpose_b } => {
                matmul(self.val(ins[0]), self.val(ins[1]), false, *transpose_b)?
            }
            Op::Add => {
                let a = self.val(ins[0]);
                let b = self.val(ins[1]);
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| x + y)
                    .collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::AddRow => {
                let a = self.val(ins[0]);
                let r = self.val(ins[1]);
                let (m, n) = a.dims2();
                let mut data = Vec::with_capacity(m * n);
                for i in 0..m {
                    for (x, y) in a.row(i).iter().zip(r.data()) {
                        data.push(*x + *y);
                    }
                }
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::Mul => {
                let a = self.val(ins[0]);
                let b = self.val(ins[1]);
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| x * y)
                    .collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::Scale { factor } => self.val(ins[0]).map(|x| x * *factor),
            Op::Relu => self.val(ins[0]).map(|x| x.max(S::zero())),
            Op::Softmax => {
                let x = self.val(ins[0]);
                let (m, n) = x.dims2();
                let mut out = Tensor::zeros(x.shape().to_vec());
                for i in 0..m {
                    softmax_row(x.row(i), &mut out.row_mut(i)[..n]);
                }
                out
            }
            Op::LayerNorm { eps } => {
                let x = self.val(ins[0]);
                let gain = self.val(ins[1]);
                let bias = self.val(ins[2]);
                let (m, n) = x.dims2();
                let inv_n = S::one() / S::from_f64(n as f64);
                let mut out = Tensor::zeros(x.shape().to_vec());
                for i in 0..m {
                    let row = x.row(i);
                    let mut mean = S::zero();
                    for &v in row {
                        mean += v;
                    }
                    mean *= inv_n;
                    let mut var = S::zero();
                    for &v in row {
                        let d = v - mean;
                        var += d * d;
                    }
                    var *= inv_n;
                    let inv_std = S::one() / (var + *eps).sqrt();
                    let o = out.row_mut(i);
                    for j in 0..n {
                        let norm = (row[j] - mean) * inv_std;
                        o[j] = norm * gain.data()[j] + bias.data()[j];
                    }
                }
                out
            }
            Op::Embedding { ids } => {
                let table = self.val(ins[0]);
                let (_, d) = table.dims2();
                let mut data = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    data.extend_from_slice(table.row(id));
                }
                Tensor::new(vec![ids.len(), d], data)?
            }
            Op::ConcatCols => {
                let (m, total) = (self.dims2_of(NodeId(i)).0, self.dims2_of(NodeId(i)).1);
                let mut data = Vec::with_capacity(m * total);
                for r in 0..m {
                    for &p in ins {
                        data.extend_from_slice(self.val(p).row(r));
                    }
                }
                Tensor::new(vec![m, total], data)?
            }
            Op::SliceCols { start, len } => {
                let a = self.val(ins[0]);
                let (m, _) = a.dims2();
                let mut data = Vec::with_capacity(m * len);
                for r in 0..m {
                    data.extend_from_slice(&a.row(r)[*start..*start + *len]);
                }
                Tensor::new(vec![m, *len], data)?
            }
            Op::SumAll => {
                let mut acc = S::zero();
                for &v in self.val(ins[0]).data() {
                    acc += v;
                }
                Tensor::scalar(acc)
            }
            Op::CeSum {
                targets,
                smoothing,
                pad,
            } => {
                let logits = self.val(ins[0]);
                let (t, v) = logits.dims2();
                let eps = *smoothing;
                let uniform = eps / S::from_f64(v as f64);
                let confident = S::one() - eps;
                let mut total = S::zero();
                for row in 0..t {
                    if Some(targets[row]) == *pad {
                        continue;
                    }
                    // -sum_v q_v * log_softmax(x)_v with q = (1-eps)*onehot + eps/V.
                    let x = logits.row(row);
                    let lse = log_sum_exp(x);
                    let mut l = S::zero();
                    l -= confident * (x[targets[row]] - lse);
                    for &xv in x {
                        l -= uniform * (xv - lse);
                    }
                    total += l;
                }
                Tensor::scalar(total)
            }
        })
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<S>> {
        if !self.forward_done {
            return Err(Error::Graph("value requested before forward".into()));
        }
        Ok(self.val(id))
    }

    /// Reverse pass from a scalar loss node. Returns gradients for every
    /// parameter; parameters unreachable from the loss get zero tensors.
    pub fn backward(&mut self, loss: NodeId) -> Result<BTreeMap<String, Tensor<S>>> {
        if !self.forward_done {
            return Err(Error::BackwardBeforeForward);
        }
        if !self.val(loss).is_scalar() {
            return Err(Error::Graph(format!(
                "loss node has shape {:?}, expected scalar",
                self.shape_of(loss)
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::scalar(S::one()));

        for i in (0..self.nodes.len()).rev() {
            let upstream = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &upstream)?;
            self.grads[i] = Some(upstream);
        }

        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            let g = match &self.grads[id.0] {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.shape_of(*id).to_vec()),
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    /// Gradient of the most recent backward pass at an arbitrary node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor<S>) {
        match &mut self.grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, upstream: &Tensor<S>) -> Result<()> {
        let node = self.nodes[i].clone();
        let ins = &node.inputs;
        match &node.op {
            Op::Input { .. } | Op::Const | Op::Param => {}
            Op::MatMul { transpose_b } => {
                let a = self.val(ins[0]);
                let b = self.val(ins[1]);
                let (da, db) = if *transpose_b {
                    // c = a b^T: da = dc b, db = dc^T a
                    (
                        matmul(upstream, b, false, false)?,
                        matmul(upstream, a, true, false)?,
                    )
                } else {
                    // c = a b: da = dc b^T, db = a^T dc
                    (
                        matmul(upstream, b, false, true)?,
                        matmul(a, upstream, true, false)?,
                    )
                };
                self.accumulate(ins[0], da);
                self.accumulate(ins[1], db);
            }
            Op::Add => {
                self.accumulate(ins[0], upstream.clone());
                self.accumulate(ins[1], upstream.clone());
            }
            Op::AddRow => {
                let (m, n) = upstream.dims2();
                self.accumulate(ins[0], upstream.clone());
                let mut row = Tensor::zeros(vec![1, n]);
                for r in 0..m {
                    for (acc, &g) in row.data_mut().iter_mut().zip(upstream.row(r)) {
                        *acc += g;
                    }
                }
                self.accumulate(ins[1], row);
            }
            Op::Mul => {
                let a = self.val(ins[0]).clone();
                let b = self.val(ins[1]).clone();
                let da = Tensor::new(
                    b.shape().to_vec(),
                    upstream
                        .data()
                        .iter()
                        .zip(b.data())
                        .map(|(&g, &y)| g * y)
                        .collect(),
                )?;
                let db = Tensor::new(
                    a.shape().to_vec(),
                    upstream
                        .data()
                        .iter()
                        .zip(a.data())
                        .map(|(&g, &x)| g * x)
                        .collect(),
                )?;
                self.accumulate(ins[0], da);
                self.accumulate(ins[1], db);
            }
            Op::Scale { factor } => {
                let f = *factor;
                self.accumulate(ins[0], upstream.map(|g| g * f));
            }
            Op::Relu => {
                let x = self.val(ins[0]);
                let data = upstream
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &xv)| if xv > S::zero() { g } else { S::zero() })
                    .collect();
                let dx = Tensor::new(x.shape().to_vec(), data)?;
                self.accumulate(ins[0], dx);
            }
            Op::Softmax => {
                let y = self.val(NodeId(i));
                let (m, n) = y.dims2();
                let mut dx = Tensor::zeros(y.shape().to_vec());
                for r in 0..m {
                    let yr = y.row(r);
                    let gr = upstream.row(r);
                    let mut dot = S::zero();
                    for (&g, &yv) in gr.iter().zip(yr) {
                        dot += g * yv;
                    }
                    let dr = dx.row_mut(r);
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(ins[0], dx);
            }
            Op::LayerNorm { eps } => {
                let x = self.val(ins[0]).clone();
                let gain = self.val(ins[1]).clone();
                let (m, n) = x.dims2();
                let inv_n = S::one() / S::from_f64(n as f64);
                let mut dx = Tensor::zeros(x.shape().to_vec());
                let mut dgain = Tensor::zeros(vec![1, n]);
                let mut dbias = Tensor::zeros(vec![1, n]);
                for r in 0..m {
                    let row = x.row(r);
                    let mut mean = S::zero();
                    for &v in row {
                        mean += v;
                    }
                    mean *= inv_n;
                    let mut var = S::zero();
                    for &v in row {
                        let d = v - mean;
                        var += d * d;
                    }
                    var *= inv_n;
                    let inv_std = S::one() / (var + *eps).sqrt();
                    let gr = upstream.row(r);

                    // d/dnorm, then fold the mean/variance paths.
                    let mut sum_dnorm = S::zero();
                    let mut sum_dnorm_norm = S::zero();
                    for j in 0..n {
                        let norm = (row[j] - mean) * inv_std;
                        let dnorm = gr[j] * gain.data()[j];
                        sum_dnorm += dnorm;
                        sum_dnorm_norm += dnorm * norm;
                        dgain.data_mut()[j] += gr[j] * norm;
                        dbias.data_mut()[j] += gr[j];
                    }
                    let dr = dx.row_mut(r);
                    for j in 0..n {
                        let norm = (row[j] - mean) * inv_std;
                        let dnorm = gr[j] * gain.data()[j];
                        dr[j] = (dnorm - inv_n * sum_dnorm - norm * inv_n * sum_dnorm_norm)
                            * inv_std;
                    }
                }
                self.accumulate(ins[0], dx);
                self.accumulate(ins[1], dgain);
                self.accumulate(ins[2], dbias);
            }
            Op::Embedding { ids } => {
                let (v, d) = self.dims2_of(ins[0]);
                let mut dt = Tensor::zeros(vec![v, d]);
                for (pos, &id) in ids.iter().enumerate() {
                    let g = upstream.row(pos);
                    let t = dt.row_mut(id);
                    for (a, &b) in t.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                self.accumulate(ins[0], dt);
            }
            Op::ConcatCols => {
                let (m, _) = upstream.dims2();
                let mut start = 0;
                for &p in ins {
                    let (_, pn) = self.dims2_of(p);
                    let mut dp = Tensor::zeros(vec![m, pn]);
                    for r in 0..m {
                        dp.row_mut(r)
                            .copy_from_slice(&upstream.row(r)[start..start + pn]);
                    }
                    start += pn;
                    self.accumulate(p, dp);
                }
            }
            Op::SliceCols { start, .. } => {
                let (m, n) = self.dims2_of(ins[0]);
                let (_, len) = upstream.dims2();
                let mut dx = Tensor::zeros(vec![m, n]);
                for r in 0..m {
                    dx.row_mut(r)[*start..*start + len].copy_from_slice(upstream.row(r));
                }
                self.accumulate(ins[0], dx);
            }
            Op::SumAll => {
                let g = upstream.scalar_value();
                let shape = self.shape_of(ins[0]).to_vec();
                self.accumulate(ins[0], Tensor::full(shape, g));
            }
            Op::CeSum {
                targets,
                smoothing,
                pad,
            } => {
                let g = upstream.scalar_value();
                let logits = self.val(ins[0]);
                let (t, v) = logits.dims2();
                let eps = *smoothing;
                let uniform = eps / S::from_f64(v as f64);
                let confident = S::one() - eps;
                let mut dx = Tensor::zeros(vec![t, v]);
                let mut probs = vec![S::zero(); v];
                for row in 0..t {
                    if Some(targets[row]) == *pad {
                        continue;
                    }
                    softmax_row(logits.row(row), &mut probs);
                    let dr = dx.row_mut(row);
                    for j in 0..v {
                        let q = if j == targets[row] {
                            confident + uniform
                        } else {
                            uniform
                        };
                        dr[j] = g * (probs[j] - q);
                    }
                }
                self.accumulate(ins[0], dx);
            }
        }
        Ok(())
    }
}

pub fn softmax_row<S: Scalar>(x: &[S], out: &mut [S]) {
    let mut max = x[0];
    for &v in x {
        max = max.max(v);
    }
    let mut denom = S::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - max).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

fn log_sum_exp<S: Scalar>(x: &[S]) -> S {
    let mut max = x[0];
    for &v in x {
        max = max.max(v);
    }
    let mut acc = S::zero();
    for &v in x {
        acc += (v - max).exp();
    }
    max + acc.ln()
}

/// Central finite differences against the analytic gradient.
///
/// Samples up to `max_coords` coordinates per parameter (all when `None`).
/// The worst relative error uses denominator max(|analytic|, |numeric|, 1e-8).
/// Requires double precision; finite differences drown in f32 rounding.
pub fn grad_check<S: Scalar>(
    graph: &mut Graph<S>,
    loss: NodeId,
    inputs: &BTreeMap<String, Tensor<S>>,
    step: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<f64> {
    grad_check_with_floor(graph, loss, inputs, step, max_coords, seed, 1e-8)
}

/// As `grad_check`, but with an explicit denominator floor. Central
/// differences carry cancellation noise of roughly `|loss| * eps / step`
/// in absolute terms, so a check asserting relative error `r` can only
/// resolve coordinates with gradient magnitude above `noise / r`; passing
/// that magnitude as `floor` turns the check into "relative `r` above the
/// floor, absolute `r * floor` below it".
#[allow(clippy::too_many_arguments)]
pub fn grad_check_with_floor<S: Scalar>(
    graph: &mut Graph<S>,
    loss: NodeId,
    inputs: &BTreeMap<String, Tensor<S>>,
    step: f64,
    max_coords: Option<usize>,
    seed: u64,
    floor: f64,
) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    if std::mem::size_of::<S>() != 8 {
        return Err(Error::InvalidArgument(
            "grad_check requires double precision".into(),
        ));
    }
    if step <= 0.0 {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    graph.forward(inputs)?;
    let analytic = graph.backward(loss)?;
    let names: Vec<String> = graph.param_names().cloned().collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for name in names {
        let base = graph.param_value(&name)?.clone();
        let n = base.len();
        let coords: Vec<usize> = match max_coords {
            Some(m) if n > m => (0..m).map(|_| rng.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = base.data()[c].to_f64();
            let mut plus = base.clone();
            plus.data_mut()[c] = S::from_f64(orig + step);
            graph.set_param(&name, plus)?;
            graph.forward(inputs)?;
            let f_plus = graph.value(loss)?.scalar_value().to_f64();

            let mut minus = base.clone();
            minus.data_mut()[c] = S::from_f64(orig - step);
            graph.set_param(&name, minus)?;
            graph.forward(inputs)?;
            let f_minus = graph.value(loss)?.scalar_value().to_f64();

            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("grad_check evaluation of {name}"),
                });
            }
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic[&name].data()[c].to_f64();
            let denom = a.abs().max(numeric.abs()).max(floor);
            worst = worst.max((a - numeric).abs() / denom);
        }
        graph.set_param(&name, base)?;
    }
    // Restore the center point for callers that keep using the graph.
    graph.forward(inputs)?;
    Ok(worst)
}
