//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is assembled once through [`GraphBuilder`], which infers and
//! checks every node's shape at construction time. Evaluation never mutates
//! the graph, so one graph can serve many concurrent forward/backward passes
//! on different bindings.
//!
//! ```
//! use saliency_audit::graph::{Bindings, GraphBuilder};
//! use saliency_audit::Tensor;
//!
//! let mut b = GraphBuilder::new();
//! let x = b.input("x", &[]).unwrap();
//! let y = b.mul(x, x).unwrap();
//! b.output("y", y);
//! let g = b.build();
//!
//! let x_val = Tensor::scalar(3.0);
//! let bindings: Bindings = [("x", &x_val)].into_iter().collect();
//! let grads = g.grad(&bindings, "y", None, &["x"]).unwrap();
//! assert_eq!(grads["x"].data()[0], 6.0);
//! ```

mod kernels;

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub use kernels::lse_pool;

/// Leaf values keyed by leaf name.
pub type Bindings<'a> = HashMap<&'a str, &'a Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    Input,
    Param,
}

/// How ReLU adjoints are formed during the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BackwardMode {
    #[default]
    Standard,
    /// Zero the adjoint at a ReLU wherever the forward input is non-positive
    /// or the incoming adjoint is negative.
    Guided,
}

#[derive(Debug, Clone)]
pub enum Op {
    Leaf {
        name: String,
        kind: LeafKind,
    },
    Constant(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Adds a vector along the last axis.
    AddBias(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    },
    Relu(NodeId),
    Softplus {
        x: NodeId,
        beta: f64,
    },
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    MaxPool2d {
        x: NodeId,
        size: usize,
        stride: usize,
    },
    LsePool2d {
        x: NodeId,
        size: usize,
        stride: usize,
        temperature: f64,
    },
    Sum {
        x: NodeId,
        axis: Option<usize>,
    },
    Mean {
        x: NodeId,
        axis: Option<usize>,
    },
    /// Softmax along the last axis.
    Softmax(NodeId),
    /// Layer normalization along the last axis.
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    /// Row lookup `table[ids[i]]`.
    Gather {
        table: NodeId,
        ids: NodeId,
    },
    /// `-sum(target * log_softmax(logits))`.
    CrossEntropy {
        logits: NodeId,
        target: NodeId,
    },
    Reshape {
        x: NodeId,
        shape: Vec<usize>,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Softplus { .. } => "softplus",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::LsePool2d { .. } => "lse_pool2d",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } | Op::Constant(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Softmax(a) => vec![*a],
            Op::Softplus { x, .. }
            | Op::MaxPool2d { x, .. }
            | Op::LsePool2d { x, .. }
            | Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::Reshape { x, .. }
            | Op::Slice { x, .. } => vec![*x],
            Op::Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Gather { table, ids } => vec![*table, *ids],
            Op::CrossEntropy { logits, target } => vec![*logits, *target],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    label: String,
}

/// An immutable, topologically ordered operator graph.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

/// Values of every evaluated node from one forward pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    values: Vec<Option<Tensor>>,
}

impl Evaluation {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.values[id.0].as_ref()
    }
}

impl Graph {
    pub fn leaf_names(&self, kind: LeafKind) -> Vec<&str> {
        self.leaves
            .iter()
            .filter(|(_, id)| matches!(&self.nodes[id.0].op, Op::Leaf { kind: k, .. } if *k == kind))
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn leaf_shape(&self, name: &str) -> Option<&[usize]> {
        self.leaves.get(name).map(|id| self.nodes[id.0].shape.as_slice())
    }

    pub fn output_names(&self) -> Vec<&str> {
        self.outputs.keys().map(String::as_str).collect()
    }

    pub fn output_shape(&self, name: &str) -> Option<&[usize]> {
        self.outputs.get(name).map(|id| self.nodes[id.0].shape.as_slice())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Counts how many nodes apply `op_name`.
    pub fn count_ops(&self, op_name: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.name() == op_name).count()
    }

    fn output_id(&self, name: &str) -> Result<NodeId> {
        self.outputs
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownOutput(name.into()))
    }

    /// Evaluates every output. All leaves must be bound.
    pub fn forward(&self, bindings: &Bindings) -> Result<BTreeMap<String, Tensor>> {
        let names: Vec<&str> = self.output_names();
        for leaf in self.leaves.keys() {
            if !bindings.contains_key(leaf.as_str()) {
                return Err(Error::UnboundLeaf(leaf.clone()));
            }
        }
        let eval = self.evaluate(bindings, &names)?;
        Ok(names
            .into_iter()
            .map(|n| {
                let id = self.outputs[n];
                (n.to_string(), eval.values[id.0].clone().expect("evaluated output"))
            })
            .collect())
    }

    /// Evaluates only the ancestors of the named outputs; leaves outside that
    /// set may stay unbound.
    pub fn evaluate(&self, bindings: &Bindings, outputs: &[&str]) -> Result<Evaluation> {
        let targets = outputs.iter().map(|n| self.output_id(n)).collect::<Result<Vec<_>>>()?;
        let needed = self.ancestors(&targets);
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if !needed[i] {
                continue;
            }
            let value = match &node.op {
                Op::Leaf { name, .. } => {
                    let t = bindings
                        .get(name.as_str())
                        .ok_or_else(|| Error::UnboundLeaf(name.clone()))?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::ShapeMismatch {
                            node: name.clone(),
                            detail: format!("bound {:?}, declared {:?}", t.shape(), node.shape),
                        });
                    }
                    (*t).clone()
                }
                Op::Constant(t) => t.clone(),
                op => {
                    let ins: Vec<&Tensor> = op
                        .inputs()
                        .iter()
                        .map(|id| values[id.0].as_ref().expect("topological order"))
                        .collect();
                    kernels::forward(op, &ins, &node.shape).map_err(|detail| Error::ShapeMismatch {
                        node: node.label.clone(),
                        detail,
                    })?
                }
            };
            if !value.is_finite() {
                return Err(Error::NonFinite(node.label.clone()));
            }
            values[i] = Some(value);
        }
        Ok(Evaluation { values })
    }

    fn ancestors(&self, targets: &[NodeId]) -> Vec<bool> {
        let mut needed = vec![false; self.nodes.len()];
        for t in targets {
            needed[t.0] = true;
        }
        for i in (0..self.nodes.len()).rev() {
            if needed[i] {
                for inp in self.nodes[i].op.inputs() {
                    needed[inp.0] = true;
                }
            }
        }
        needed
    }

    /// Value of a named output in an evaluation.
    pub fn value<'e>(&self, eval: &'e Evaluation, output: &str) -> Result<&'e Tensor> {
        let id = self.output_id(output)?;
        eval.values[id.0]
            .as_ref()
            .ok_or_else(|| Error::UnknownOutput(output.into()))
    }

    /// Gradient of one scalar (or one selected element) of `output` with
    /// respect to the named leaves.
    pub fn grad(
        &self,
        bindings: &Bindings,
        output: &str,
        index: Option<usize>,
        wrt: &[&str],
    ) -> Result<BTreeMap<String, Tensor>> {
        self.grad_with_mode(bindings, output, index, wrt, BackwardMode::Standard)
            .map(|(_, g)| g)
    }

    /// Like [`Graph::grad`] but also returns the differentiated scalar and
    /// lets the caller pick the backward mode.
    pub fn grad_with_mode(
        &self,
        bindings: &Bindings,
        output: &str,
        index: Option<usize>,
        wrt: &[&str],
        mode: BackwardMode,
    ) -> Result<(f64, BTreeMap<String, Tensor>)> {
        self.grad_full(bindings, output, index, wrt, mode)
            .map(|(_, v, g)| (v, g))
    }

    /// Full form of [`Graph::grad_with_mode`] that also hands back the forward
    /// evaluation, so other outputs sharing the pass can be read.
    pub fn grad_full(
        &self,
        bindings: &Bindings,
        output: &str,
        index: Option<usize>,
        wrt: &[&str],
        mode: BackwardMode,
    ) -> Result<(Evaluation, f64, BTreeMap<String, Tensor>)> {
        let out = self.output_id(output)?;
        let len = numel(&self.nodes[out.0].shape);
        let index = match index {
            Some(i) if i < len => i,
            Some(i) => {
                return Err(Error::InvalidArgument(format!(
                    "output index {i} out of range for `{output}` with {len} elements"
                )))
            }
            None if len == 1 => 0,
            None => {
                return Err(Error::NonScalarOutput {
                    output: output.into(),
                    len,
                })
            }
        };
        let leaf_ids = wrt
            .iter()
            .map(|n| {
                self.leaves
                    .get(*n)
                    .copied()
                    .ok_or_else(|| Error::UnknownLeaf((*n).into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let eval = self.evaluate(bindings, &[output])?;
        let value = eval.values[out.0].as_ref().expect("evaluated").data()[index];
        let mut adjoint = self.backward(&eval, out, index, &leaf_ids, mode);
        let grads = wrt
            .iter()
            .zip(&leaf_ids)
            .map(|(n, id)| {
                let g = adjoint[id.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(&self.nodes[id.0].shape));
                (n.to_string(), g)
            })
            .collect();
        Ok((eval, value, grads))
    }

    fn backward(
        &self,
        eval: &Evaluation,
        out: NodeId,
        index: usize,
        leaves: &[NodeId],
        mode: BackwardMode,
    ) -> Vec<Option<Tensor>> {
        let n = self.nodes.len();
        // reaches[i]: node i depends on a requested leaf.
        let mut reaches = vec![false; n];
        for l in leaves {
            reaches[l.0] = true;
        }
        for i in 0..n {
            if !reaches[i] && eval.values[i].is_some() {
                reaches[i] = self.nodes[i].op.inputs().iter().any(|p| reaches[p.0]);
            }
        }
        let mut adjoint: Vec<Option<Tensor>> = vec![None; n];
        let mut seed = Tensor::zeros(&self.nodes[out.0].shape);
        seed.data_mut()[index] = 1.0;
        adjoint[out.0] = Some(seed);

        for i in (0..=out.0).rev() {
            let Some(g) = adjoint[i].take() else { continue };
            let node = &self.nodes[i];
            let inputs = node.op.inputs();
            if inputs.is_empty() {
                adjoint[i] = Some(g);
                continue;
            }
            let need: Vec<bool> = inputs.iter().map(|p| reaches[p.0]).collect();
            if !need.iter().any(|&b| b) {
                continue;
            }
            let ins: Vec<&Tensor> = inputs
                .iter()
                .map(|id| eval.values[id.0].as_ref().expect("evaluated"))
                .collect();
            let y = eval.values[i].as_ref().expect("evaluated");
            let contribs = kernels::backward(&node.op, &ins, y, &g, &need, mode);
            for (p, c) in inputs.iter().zip(contribs) {
                let Some(c) = c else { continue };
                match &mut adjoint[p.0] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(c.data()) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
        }
        adjoint
    }
}

/// Incrementally assembles a [`Graph`], checking shapes as nodes are added.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

fn mismatch(op: &str, idx: usize, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        node: format!("{op}#{idx}"),
        detail: detail.into(),
    }
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        let label = match &op {
            Op::Leaf { name, .. } => name.clone(),
            other => format!("{}#{}", other.name(), id.0),
        };
        self.nodes.push(Node { op, shape, label });
        id
    }

    fn leaf(&mut self, name: &str, shape: &[usize], kind: LeafKind) -> Result<NodeId> {
        if self.leaves.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate leaf `{name}`")));
        }
        if shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("leaf `{name}` has a zero dimension"),
            });
        }
        let id = self.push(
            Op::Leaf {
                name: name.into(),
                kind,
            },
            shape.to_vec(),
        );
        self.leaves.insert(name.into(), id);
        Ok(id)
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf(name, shape, LeafKind::Input)
    }

    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        self.leaf(name, shape, LeafKind::Param)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        let shape = t.shape().to_vec();
        self.push(Op::Constant(t), shape)
    }

    pub fn output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.into(), id);
    }

    pub fn build(self) -> Graph {
        Graph {
            nodes: self.nodes,
            leaves: self.leaves,
            outputs: self.outputs,
        }
    }

    fn next(&self) -> usize {
        self.nodes.len()
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, self.next(), format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Scale(a, c), s)
    }

    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb != [sa[sa.len() - 1]] {
            return Err(mismatch("add_bias", self.next(), format!("{sa:?} + bias {sb:?}")));
        }
        Ok(self.push(Op::AddBias(a, b), sa))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", self.next(), format!("{sa:?} x {sb:?}")));
        }
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(mismatch(
                "transpose",
                self.next(),
                format!("rank-2 required, got {s:?}"),
            ));
        }
        Ok(self.push(Op::Transpose(a), vec![s[1], s[0]]))
    }

    /// `x: [C,H,W]`, `w: [O,C,KH,KW]`, `b: [O]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (sx, sw, sb) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        let bad = |why: &str| mismatch("conv2d", self.next(), format!("{why}: x{sx:?} w{sw:?} b{sb:?}"));
        if stride == 0 {
            return Err(bad("stride must be positive"));
        }
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sb != [sw[0]] {
            return Err(bad("incompatible operands"));
        }
        let (h, w_) = (sx[1] + 2 * padding, sx[2] + 2 * padding);
        if sw[2] > h || sw[3] > w_ {
            return Err(bad("kernel larger than padded input"));
        }
        let shape = vec![sw[0], (h - sw[2]) / stride + 1, (w_ - sw[3]) / stride + 1];
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            shape,
        ))
    }

    fn unary(&mut self, op: Op, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(op, s)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu(a), a)
    }

    pub fn softplus(&mut self, a: NodeId, beta: f64) -> Result<NodeId> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("softplus beta must be > 0, got {beta}")));
        }
        Ok(self.unary(Op::Softplus { x: a, beta }, a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Tanh(a), a)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp(a), a)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Log(a), a)
    }

    fn pool_shape(&self, op: &str, x: NodeId, size: usize, stride: usize) -> Result<Vec<usize>> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || size == 0 || stride == 0 || size > s[1] || size > s[2] {
            return Err(mismatch(op, self.next(), format!("window {size}/{stride} on {s:?}")));
        }
        Ok(vec![s[0], (s[1] - size) / stride + 1, (s[2] - size) / stride + 1])
    }

    pub fn max_pool2d(&mut self, x: NodeId, size: usize, stride: usize) -> Result<NodeId> {
        let s = self.pool_shape("max_pool2d", x, size, stride)?;
        Ok(self.push(Op::MaxPool2d { x, size, stride }, s))
    }

    pub fn lse_pool2d(&mut self, x: NodeId, size: usize, stride: usize, temperature: f64) -> Result<NodeId> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "LSE temperature must be > 0, got {temperature}"
            )));
        }
        let s = self.pool_shape("lse_pool2d", x, size, stride)?;
        Ok(self.push(
            Op::LsePool2d {
                x,
                size,
                stride,
                temperature,
            },
            s,
        ))
    }

    fn reduced(&self, op: &str, x: NodeId, axis: Option<usize>) -> Result<Vec<usize>> {
        let s = self.shape(x);
        match axis {
            None => Ok(vec![]),
            Some(a) if a < s.len() => {
                let mut r = s.to_vec();
                r.remove(a);
                Ok(r)
            }
            Some(a) => Err(mismatch(op, self.next(), format!("axis {a} on {s:?}"))),
        }
    }

    pub fn sum(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let s = self.reduced("sum", x, axis)?;
        Ok(self.push(Op::Sum { x, axis }, s))
    }

    pub fn mean(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let s = self.reduced("mean", x, axis)?;
        Ok(self.push(Op::Mean { x, axis }, s))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        if self.shape(x).is_empty() {
            return Err(mismatch("softmax", self.next(), "scalar input"));
        }
        Ok(self.unary(Op::Softmax(x), x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let last = s.last().copied().unwrap_or(0);
        if s.is_empty() || self.shape(gamma) != [last] || self.shape(beta) != [last] {
            return Err(mismatch("layer_norm", self.next(), format!("x{s:?}")));
        }
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, s))
    }

    pub fn gather(&mut self, table: NodeId, ids: NodeId) -> Result<NodeId> {
        let (st, si) = (self.shape(table).to_vec(), self.shape(ids).to_vec());
        if st.len() != 2 || si.len() != 1 {
            return Err(mismatch("gather", self.next(), format!("table{st:?} ids{si:?}")));
        }
        Ok(self.push(Op::Gather { table, ids }, vec![si[0], st[1]]))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, target: NodeId) -> Result<NodeId> {
        self.same_shape("cross_entropy", logits, target)?;
        Ok(self.push(Op::CrossEntropy { logits, target }, vec![]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let s = self.shape(x);
        if numel(s) != numel(shape) || shape.contains(&0) {
            return Err(mismatch("reshape", self.next(), format!("{s:?} -> {shape:?}")));
        }
        Ok(self.push(
            Op::Reshape {
                x,
                shape: shape.to_vec(),
            },
            shape.to_vec(),
        ))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(mismatch("concat", self.next(), "no parts"));
        };
        let mut shape = self.shape(first).to_vec();
        if axis >= shape.len() {
            return Err(mismatch("concat", self.next(), format!("axis {axis} on {shape:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible =
                s.len() == shape.len() && s.iter().zip(&shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", self.next(), format!("{s:?} vs {shape:?}")));
            }
            total += s[axis];
        }
        shape[axis] = total;
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            shape,
        ))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let mut s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(mismatch(
                "slice",
                self.next(),
                format!("[{start}..+{len}] axis {axis} of {s:?}"),
            ));
        }
        s[axis] = len;
        Ok(self.push(Op::Slice { x, axis, start, len }, s))
    }
}
