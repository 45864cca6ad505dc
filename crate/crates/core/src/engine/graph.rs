//! Static computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in construction order, so every operand precedes its
//! consumer and the node list is already a topological order. A graph is
//! built once and run many times: [`Graph::forward`] binds the named inputs,
//! evaluates every node and caches what the backward pass needs;
//! [`Graph::backward`] then walks the nodes in reverse.

use std::collections::{BTreeMap, HashMap};

use crate::engine::kernels::{self, BatchNormSaved, ChannelLayout, ConvGeometry};
use crate::engine::{EngineError, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics used by a batch-normalization node.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchNormMode<T> {
    /// Normalize with the current batch's per-channel mean and population variance.
    BatchStats,
    /// Normalize with stored per-channel statistics.
    Fixed { mean: Vec<T>, var: Vec<T> },
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input { name: String, requires_grad: bool },
    Param(ParamId),
    Const(Tensor<T>),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        padding: usize,
    },
    Relu(NodeId),
    Tanh(NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BatchNormMode<T>,
        eps: T,
    },
    Upsample2x(NodeId),
    Reshape(NodeId, Vec<isize>),
    Mean(NodeId),
    Sum(NodeId),
    Square(NodeId),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Upsample2x(_) => "upsample2x",
            Op::Reshape(..) => "reshape",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::Square(_) => "square",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Param(_) | Op::Const(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu(a)
            | Op::Tanh(a)
            | Op::Upsample2x(a)
            | Op::Reshape(a, _)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::Square(a) => vec![*a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    label: Option<String>,
}

#[derive(Debug, Clone)]
struct Parameter<T> {
    name: String,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: Vec<Option<Tensor<T>>>,
    inputs: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a parameter; `None` when it does not require gradients.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn take_param(&mut self, id: ParamId) -> Option<Tensor<T>> {
        self.params.get_mut(id.0).and_then(Option::take)
    }

    pub fn input(&self, name: &str) -> Option<&Tensor<T>> {
        self.inputs.get(name)
    }
}

#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<Parameter<T>>,
    param_nodes: Vec<NodeId>,
    outputs: Vec<(String, NodeId)>,
    values: Vec<Option<Tensor<T>>>,
    saved: Vec<Option<BatchNormSaved<T>>>,
    /// Number of leading nodes whose cached values are current.
    evaluated: usize,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            param_nodes: Vec::new(),
            outputs: Vec::new(),
            values: Vec::new(),
            saved: Vec::new(),
            evaluated: 0,
        }
    }

    fn push(&mut self, op: Op<T>) -> NodeId {
        for operand in op.operands() {
            assert!(operand.0 < self.nodes.len(), "operand {operand:?} is not in this graph");
        }
        self.nodes.push(Node { op, label: None });
        self.values.push(None);
        self.saved.push(None);
        self.evaluated = 0;
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Attach a human-readable label used in error messages.
    pub fn set_label(&mut self, node: NodeId, label: impl Into<String>) {
        self.nodes[node.0].label = Some(label.into());
    }

    pub fn input(&mut self, name: impl Into<String>, requires_grad: bool) -> NodeId {
        let name = name.into();
        assert!(
            !self.input_names().any(|n| n == name),
            "duplicate placeholder {name}"
        );
        self.push(Op::Input {
            name,
            requires_grad,
        })
    }

    pub fn param(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        requires_grad: bool,
    ) -> (ParamId, NodeId) {
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.into(),
            value,
            requires_grad,
        });
        let node = self.push(Op::Param(id));
        self.param_nodes.push(node);
        (id, node)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    /// Elementwise sum. The right operand may also be a rank-1 per-channel
    /// vector broadcast along axis 1 of the left operand.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, padding: usize) -> NodeId {
        self.push(Op::Conv2d {
            x,
            w,
            stride,
            padding,
        })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh(a))
    }

    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BatchNormMode<T>,
        eps: T,
    ) -> NodeId {
        self.push(Op::BatchNorm {
            x,
            gamma,
            beta,
            mode,
            eps,
        })
    }

    pub fn upsample2x(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Upsample2x(a))
    }

    /// Reshape to `shape`; at most one entry may be `-1` and is inferred.
    pub fn reshape(&mut self, a: NodeId, shape: &[isize]) -> NodeId {
        assert!(
            shape.iter().filter(|&&d| d == -1).count() <= 1 && shape.iter().all(|&d| d == -1 || d > 0),
            "invalid reshape target {shape:?}"
        );
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Square(a))
    }

    pub fn mark_output(&mut self, name: impl Into<String>, node: NodeId) {
        self.outputs.push((name.into(), node));
    }

    pub fn output_node(&self, name: &str) -> Option<NodeId> {
        self.outputs.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }

    fn input_names(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Input { name, .. } => Some(name.as_str()),
            _ => None,
        })
    }

    pub fn params_len(&self) -> usize {
        self.params.len()
    }

    pub fn param_value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn param_value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        self.evaluated = 0;
        &mut self.params[id.0].value
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn param_node(&self, id: ParamId) -> NodeId {
        self.param_nodes[id.0]
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Replace a parameter value; the shape must not change.
    pub fn set_param(&mut self, id: ParamId, value: Tensor<T>) -> Result<(), EngineError> {
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(EngineError::InvalidArgument(format!(
                "parameter {} has shape {:?}, got {:?}",
                slot.name,
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        self.evaluated = 0;
        Ok(())
    }

    pub fn requires_grad(&self, id: ParamId) -> bool {
        self.params[id.0].requires_grad
    }

    pub fn set_requires_grad(&mut self, id: ParamId, flag: bool) {
        self.params[id.0].requires_grad = flag;
    }

    /// Cached value of a node from the last forward pass (parameters and
    /// constants are always available).
    pub fn value(&self, node: NodeId) -> Option<&Tensor<T>> {
        match &self.nodes.get(node.0)?.op {
            Op::Param(id) => Some(&self.params[id.0].value),
            Op::Const(t) => Some(t),
            _ if node.0 < self.evaluated => self.values[node.0].as_ref(),
            _ => None,
        }
    }

    fn val(&self, node: NodeId) -> &Tensor<T> {
        self.value(node).expect("operand evaluated before consumer")
    }

    fn mismatch(&self, node: usize, detail: String) -> EngineError {
        let n = &self.nodes[node];
        EngineError::ShapeMismatch {
            node,
            op: n.op.name(),
            label: n.label.clone().unwrap_or_default(),
            detail,
        }
    }

    /// Evaluate every node. `feeds` must bind each placeholder exactly.
    pub fn forward(
        &mut self,
        feeds: &HashMap<String, Tensor<T>>,
    ) -> Result<BTreeMap<String, Tensor<T>>, EngineError> {
        let last = NodeId(self.nodes.len().saturating_sub(1));
        if !self.nodes.is_empty() {
            self.forward_to(feeds, last)?;
        }
        Ok(self
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), self.val(*id).clone()))
            .collect())
    }

    /// Evaluate nodes up to and including `target` and return its value.
    /// Nodes appended after `target` are skipped; placeholders among them
    /// need not be bound.
    pub fn forward_to(
        &mut self,
        feeds: &HashMap<String, Tensor<T>>,
        target: NodeId,
    ) -> Result<&Tensor<T>, EngineError> {
        for name in feeds.keys() {
            if !self.input_names().any(|n| n == name) {
                return Err(EngineError::UnknownPlaceholder(name.clone()));
            }
        }
        self.evaluated = 0;
        for i in 0..=target.0 {
            let (value, saved) = self.eval_node(i, feeds)?;
            self.values[i] = value;
            self.saved[i] = saved;
            self.evaluated = i + 1;
        }
        Ok(self.val(target))
    }

    /// Convenience wrapper for graphs with one placeholder.
    pub fn forward_one(
        &mut self,
        name: &str,
        input: Tensor<T>,
    ) -> Result<BTreeMap<String, Tensor<T>>, EngineError> {
        let mut feeds = HashMap::with_capacity(1);
        feeds.insert(name.to_string(), input);
        self.forward(&feeds)
    }

    #[allow(clippy::type_complexity)]
    fn eval_node(
        &self,
        i: usize,
        feeds: &HashMap<String, Tensor<T>>,
    ) -> Result<(Option<Tensor<T>>, Option<BatchNormSaved<T>>), EngineError> {
        let out = match &self.nodes[i].op {
            Op::Param(_) | Op::Const(_) => None,
            Op::Input { name, .. } => Some(
                feeds
                    .get(name)
                    .cloned()
                    .ok_or_else(|| EngineError::MissingInput(name.clone()))?,
            ),
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(self.mismatch(i, format!("{:?} · {:?}", a.shape(), b.shape())));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let data = kernels::matmul(a.data(), b.data(), m, k, n);
                Some(Tensor::from_parts(vec![m, n], data))
            }
            Op::Add(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                let mut out = a.clone();
                if a.shape() == b.shape() {
                    out.add_assign(b);
                } else if let Some(layout) = self.channel_broadcast(a, b) {
                    let data = out.data_mut();
                    for (c, &bias) in b.data().iter().enumerate() {
                        layout.for_channel(c, |j| data[j] = data[j] + bias);
                    }
                } else {
                    return Err(self.mismatch(i, format!("{:?} + {:?}", a.shape(), b.shape())));
                }
                Some(out)
            }
            Op::Mul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.shape() != b.shape() {
                    return Err(self.mismatch(i, format!("{:?} ⊙ {:?}", a.shape(), b.shape())));
                }
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
                Some(Tensor::from_parts(a.shape().to_vec(), data))
            }
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            } => {
                let (x, w) = (self.val(*x), self.val(*w));
                let g = self.conv_geometry(i, x, w, *stride, *padding)?;
                let (batch, out_ch) = (x.shape()[0], w.shape()[0]);
                let data = kernels::conv2d(x.data(), w.data(), batch, out_ch, &g);
                Some(Tensor::from_parts(vec![batch, out_ch, g.out_h, g.out_w], data))
            }
            Op::Relu(a) => Some(self.val(*a).map(|x| x.max(T::zero()))),
            Op::Tanh(a) => Some(self.val(*a).map(T::tanh)),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                eps,
            } => {
                let (x, gamma, beta) = (self.val(*x), self.val(*gamma), self.val(*beta));
                let layout = ChannelLayout::from_shape(x.shape())
                    .ok_or_else(|| self.mismatch(i, format!("input {:?} has no channel axis", x.shape())))?;
                let c = layout.channels;
                if gamma.len() != c || beta.len() != c {
                    return Err(self.mismatch(
                        i,
                        format!("{c} channels but gamma {:?} beta {:?}", gamma.shape(), beta.shape()),
                    ));
                }
                let fixed = match mode {
                    BatchNormMode::BatchStats => {
                        if layout.batch < 2 {
                            return Err(self.mismatch(i, "batch statistics need a batch of at least 2".into()));
                        }
                        None
                    }
                    BatchNormMode::Fixed { mean, var } => {
                        if mean.len() != c || var.len() != c {
                            return Err(self.mismatch(i, "stored statistics length".into()));
                        }
                        Some((mean.as_slice(), var.as_slice()))
                    }
                };
                let (y, saved) = kernels::batchnorm(x.data(), layout, gamma.data(), beta.data(), fixed, *eps);
                return Ok((Some(Tensor::from_parts(x.shape().to_vec(), y)), Some(saved)));
            }
            Op::Upsample2x(a) => {
                let a = self.val(*a);
                let r = a.rank();
                if r < 2 {
                    return Err(self.mismatch(i, format!("rank {r} input")));
                }
                let (h, w) = (a.shape()[r - 2], a.shape()[r - 1]);
                let planes = a.len() / (h * w);
                let mut shape = a.shape().to_vec();
                shape[r - 2] *= 2;
                shape[r - 1] *= 2;
                Some(Tensor::from_parts(shape, kernels::upsample2x(a.data(), planes, h, w)))
            }
            Op::Reshape(a, target) => {
                let a = self.val(*a);
                let shape = resolve_shape(target, a.len())
                    .ok_or_else(|| self.mismatch(i, format!("{:?} → {target:?}", a.shape())))?;
                Some(Tensor::from_parts(shape, a.data().to_vec()))
            }
            Op::Mean(a) => {
                let a = self.val(*a);
                Some(Tensor::scalar(a.sum() / T::of(a.len() as f64)))
            }
            Op::Sum(a) => Some(Tensor::scalar(self.val(*a).sum())),
            Op::Square(a) => Some(self.val(*a).map(|x| x * x)),
        };
        Ok((out, None))
    }

    fn channel_broadcast(&self, a: &Tensor<T>, b: &Tensor<T>) -> Option<ChannelLayout> {
        let layout = ChannelLayout::from_shape(a.shape())?;
        (b.rank() == 1 && b.len() == layout.channels).then_some(layout)
    }

    fn conv_geometry(
        &self,
        i: usize,
        x: &Tensor<T>,
        w: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<ConvGeometry, EngineError> {
        if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1] {
            return Err(self.mismatch(i, format!("input {:?} kernel {:?}", x.shape(), w.shape())));
        }
        if stride == 0 {
            return Err(self.mismatch(i, "stride must be at least 1".into()));
        }
        let (h, wd) = (x.shape()[2], x.shape()[3]);
        let (kh, kw) = (w.shape()[2], w.shape()[3]);
        let out_h = ConvGeometry::out_extent(h, kh, stride, padding);
        let out_w = ConvGeometry::out_extent(wd, kw, stride, padding);
        match (out_h, out_w) {
            (Some(out_h), Some(out_w)) => Ok(ConvGeometry {
                channels: x.shape()[1],
                height: h,
                width: wd,
                kernel_h: kh,
                kernel_w: kw,
                stride,
                padding,
                out_h,
                out_w,
            }),
            _ => Err(self.mismatch(
                i,
                format!("non-integral output size for {h}×{wd}, kernel {kh}×{kw}, stride {stride}, padding {padding}"),
            )),
        }
    }

    fn needs_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs[i] = match &node.op {
                Op::Input { requires_grad, .. } => *requires_grad,
                Op::Param(id) => self.params[id.0].requires_grad,
                Op::Const(_) => false,
                op => op.operands().iter().any(|o| needs[o.0]),
            };
        }
        needs
    }

    /// Differentiate a single-element node with respect to every parameter
    /// and input that requires gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>, EngineError> {
        if loss.0 >= self.evaluated {
            return Err(EngineError::BackwardBeforeForward);
        }
        let value = self.val(loss);
        if value.len() != 1 {
            return Err(EngineError::NonScalarLoss(value.shape().to_vec()));
        }
        let seed = Tensor::from_parts(value.shape().to_vec(), vec![T::one()]);
        self.backward_seeded(&[(loss, seed)])
    }

    /// Back-propagate explicit upstream gradients. Used when the loss is
    /// evaluated outside the graph and only its gradient with respect to
    /// some nodes is known.
    pub fn backward_seeded(&mut self, seeds: &[(NodeId, Tensor<T>)]) -> Result<Gradients<T>, EngineError> {
        if self.evaluated == 0 || seeds.iter().any(|(n, _)| n.0 >= self.evaluated) {
            return Err(EngineError::BackwardBeforeForward);
        }
        let needs = self.needs_grad();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for (node, seed) in seeds {
            let v = self.val(*node);
            if v.shape() != seed.shape() {
                return Err(self.mismatch(
                    node.0,
                    format!("seed gradient {:?} for value {:?}", seed.shape(), v.shape()),
                ));
            }
            if !needs[node.0] {
                continue;
            }
            accumulate(&mut grads[node.0], seed.clone());
        }
        let last = seeds.iter().map(|(n, _)| n.0).max().unwrap_or(0);
        for i in (0..=last.min(self.nodes.len().saturating_sub(1))).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, g, &needs, &mut grads);
        }

        let mut params = Vec::with_capacity(self.params.len());
        for (p, node) in self.params.iter().zip(&self.param_nodes) {
            params.push(p.requires_grad.then(|| {
                grads[node.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            }));
        }
        let mut inputs = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(self.evaluated) {
            if let Op::Input {
                name,
                requires_grad: true,
            } = &node.op
            {
                let shape = self.val(NodeId(i)).shape().to_vec();
                let g = grads[i].clone().unwrap_or_else(|| Tensor::zeros(&shape));
                inputs.insert(name.clone(), g);
            }
        }
        Ok(Gradients { params, inputs })
    }

    fn backprop_node(&mut self, i: usize, g: Tensor<T>, needs: &[bool], grads: &mut [Option<Tensor<T>>]) {
        let op = self.nodes[i].op.clone_shallow();
        match op {
            ShallowOp::Leaf => grads[i] = Some(g),
            ShallowOp::MatMul(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if needs[a.0] {
                    let da = kernels::matmul_nt(g.data(), bv.data(), m, n, k);
                    accumulate(&mut grads[a.0], Tensor::from_parts(vec![m, k], da));
                }
                if needs[b.0] {
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_tn_acc(&mut db, av.data(), g.data(), m, k, n);
                    accumulate(&mut grads[b.0], Tensor::from_parts(vec![k, n], db));
                }
            }
            ShallowOp::Add(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                if needs[b.0] {
                    let db = if av.shape() == bv.shape() {
                        g.clone()
                    } else {
                        let layout = self.channel_broadcast(av, bv).expect("checked in forward");
                        let mut acc = vec![T::zero(); layout.channels];
                        for (c, slot) in acc.iter_mut().enumerate() {
                            layout.for_channel(c, |j| *slot = *slot + g.data()[j]);
                        }
                        Tensor::from_parts(bv.shape().to_vec(), acc)
                    };
                    accumulate(&mut grads[b.0], db);
                }
                if needs[a.0] {
                    accumulate(&mut grads[a.0], g);
                }
            }
            ShallowOp::Mul(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                if needs[a.0] {
                    let da = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(&mut grads[a.0], Tensor::from_parts(av.shape().to_vec(), da));
                }
                if needs[b.0] {
                    let db = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(&mut grads[b.0], Tensor::from_parts(bv.shape().to_vec(), db));
                }
            }
            ShallowOp::Conv2d {
                x,
                w,
                stride,
                padding,
            } => {
                let (xv, wv) = (self.val(x), self.val(w));
                let geom = self
                    .conv_geometry(i, xv, wv, stride, padding)
                    .expect("checked in forward");
                let (dx, dw) = kernels::conv2d_backward(
                    xv.data(),
                    wv.data(),
                    g.data(),
                    xv.shape()[0],
                    wv.shape()[0],
                    &geom,
                    needs[x.0],
                    needs[w.0],
                );
                if let Some(dx) = dx {
                    accumulate(&mut grads[x.0], Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                if let Some(dw) = dw {
                    accumulate(&mut grads[w.0], Tensor::from_parts(wv.shape().to_vec(), dw));
                }
            }
            ShallowOp::Relu(a) => {
                if needs[a.0] {
                    let av = self.val(a);
                    let d = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(&gi, &x)| if x > T::zero() { gi } else { T::zero() })
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::from_parts(av.shape().to_vec(), d));
                }
            }
            ShallowOp::Tanh(a) => {
                if needs[a.0] {
                    let y = self.values[i].as_ref().expect("forward value");
                    let d = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gi, &t)| gi * (T::one() - t * t))
                        .collect();
                    accumulate(&mut grads[a.0], Tensor::from_parts(y.shape().to_vec(), d));
                }
            }
            ShallowOp::BatchNorm { x, gamma, beta } => {
                let xv = self.val(x);
                let layout = ChannelLayout::from_shape(xv.shape()).expect("checked in forward");
                let saved = self.saved[i].as_ref().expect("batchnorm saved state");
                let (dx, dgamma, dbeta) =
                    kernels::batchnorm_backward(g.data(), layout, self.val(gamma).data(), saved);
                if needs[x.0] {
                    accumulate(&mut grads[x.0], Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                if needs[gamma.0] {
                    let shape = self.val(gamma).shape().to_vec();
                    accumulate(&mut grads[gamma.0], Tensor::from_parts(shape, dgamma));
                }
                if needs[beta.0] {
                    let shape = self.val(beta).shape().to_vec();
                    accumulate(&mut grads[beta.0], Tensor::from_parts(shape, dbeta));
                }
            }
            ShallowOp::Upsample2x(a) => {
                if needs[a.0] {
                    let av = self.val(a);
                    let r = av.rank();
                    let (h, w) = (av.shape()[r - 2], av.shape()[r - 1]);
                    let d = kernels::upsample2x_backward(g.data(), av.len() / (h * w), h, w);
                    accumulate(&mut grads[a.0], Tensor::from_parts(av.shape().to_vec(), d));
                }
            }
            ShallowOp::Reshape(a) => {
                if needs[a.0] {
                    let shape = self.val(a).shape().to_vec();
                    accumulate(&mut grads[a.0], Tensor::from_parts(shape, g.into_data()));
                }
            }
            ShallowOp::Mean(a) => {
                if needs[a.0] {
                    let av = self.val(a);
                    let v = g.data()[0] / T::of(av.len() as f64);
                    accumulate(&mut grads[a.0], Tensor::full(av.shape(), v));
                }
            }
            ShallowOp::Sum(a) => {
                if needs[a.0] {
                    let av = self.val(a);
                    accumulate(&mut grads[a.0], Tensor::full(av.shape(), g.data()[0]));
                }
            }
            ShallowOp::Square(a) => {
                if needs[a.0] {
                    let av = self.val(a);
                    let two = T::of(2.0);
                    let d = g.data().iter().zip(av.data()).map(|(&gi, &x)| two * x * gi).collect();
                    accumulate(&mut grads[a.0], Tensor::from_parts(av.shape().to_vec(), d));
                }
            }
        }
    }
}

/// Operator identity without owned payloads, so the backward pass can borrow
/// the graph while dispatching.
enum ShallowOp {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        padding: usize,
    },
    Relu(NodeId),
    Tanh(NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Upsample2x(NodeId),
    Reshape(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    Square(NodeId),
}

impl<T> Op<T> {
    fn clone_shallow(&self) -> ShallowOp {
        match self {
            Op::Input { .. } | Op::Param(_) | Op::Const(_) => ShallowOp::Leaf,
            Op::MatMul(a, b) => ShallowOp::MatMul(*a, *b),
            Op::Add(a, b) => ShallowOp::Add(*a, *b),
            Op::Mul(a, b) => ShallowOp::Mul(*a, *b),
            Op::Conv2d {
                x,
                w,
                stride,
                padding,
            } => ShallowOp::Conv2d {
                x: *x,
                w: *w,
                stride: *stride,
                padding: *padding,
            },
            Op::Relu(a) => ShallowOp::Relu(*a),
            Op::Tanh(a) => ShallowOp::Tanh(*a),
            Op::BatchNorm { x, gamma, beta, .. } => ShallowOp::BatchNorm {
                x: *x,
                gamma: *gamma,
                beta: *beta,
            },
            Op::Upsample2x(a) => ShallowOp::Upsample2x(*a),
            Op::Reshape(a, _) => ShallowOp::Reshape(*a),
            Op::Mean(a) => ShallowOp::Mean(*a),
            Op::Sum(a) => ShallowOp::Sum(*a),
            Op::Square(a) => ShallowOp::Square(*a),
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn resolve_shape(target: &[isize], len: usize) -> Option<Vec<usize>> {
    let known: usize = target.iter().filter(|&&d| d > 0).map(|&d| d as usize).product();
    let mut shape = Vec::with_capacity(target.len());
    for &d in target {
        if d == -1 {
            if known == 0 || len % known != 0 || len / known == 0 {
                return None;
            }
            shape.push(len / known);
        } else {
            shape.push(d as usize);
        }
    }
    (shape.iter().product::<usize>() == len).then_some(shape)
}
