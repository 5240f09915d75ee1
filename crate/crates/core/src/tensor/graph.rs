use std::rc::Rc;

use super::{Result, Scalar, Shape, Tensor, TensorError};

/// Index of a recorded operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

/// A value flowing through a [`Graph`].
///
/// Cloning is cheap: the value is reference counted. A `Var` without a node
/// is a constant; no gradient flows into it.
#[derive(Clone)]
pub struct Var<T> {
    pub(crate) value: Rc<Tensor<T>>,
    pub(crate) node: Option<NodeId>,
}

impl<T: std::fmt::Debug> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("node", &self.node).field("value", &*self.value).finish()
    }
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }
}

/// Operation tag, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Conv2d,
    DwConv2d,
    Pointwise,
    Add,
    Sub,
    Mul,
    Scale,
    MulScalar,
    Gelu,
    Relu,
    Abs,
    Softmax,
    MaxScalar,
    GlobalAvgPool,
    ChannelNorm,
    L2Normalize,
    ScaleChannels,
    ScaleSamples,
    Narrow,
    Concat,
    Reshape,
    DepthToSpace,
    PadReflect,
    Sum,
    Mean,
}

impl OpKind {
    pub const ALL: [OpKind; 26] = [
        OpKind::Leaf,
        OpKind::Conv2d,
        OpKind::DwConv2d,
        OpKind::Pointwise,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::MulScalar,
        OpKind::Gelu,
        OpKind::Relu,
        OpKind::Abs,
        OpKind::Softmax,
        OpKind::MaxScalar,
        OpKind::GlobalAvgPool,
        OpKind::ChannelNorm,
        OpKind::L2Normalize,
        OpKind::ScaleChannels,
        OpKind::ScaleSamples,
        OpKind::Narrow,
        OpKind::Concat,
        OpKind::Reshape,
        OpKind::DepthToSpace,
        OpKind::PadReflect,
        OpKind::Sum,
        OpKind::Mean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::DwConv2d => "dwconv2d",
            OpKind::Pointwise => "pointwise",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::MulScalar => "mul_scalar",
            OpKind::Gelu => "gelu",
            OpKind::Relu => "relu",
            OpKind::Abs => "abs",
            OpKind::Softmax => "softmax",
            OpKind::MaxScalar => "max_scalar",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::ChannelNorm => "channel_norm",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::ScaleChannels => "scale_channels",
            OpKind::ScaleSamples => "scale_samples",
            OpKind::Narrow => "narrow",
            OpKind::Concat => "concat",
            OpKind::Reshape => "reshape",
            OpKind::DepthToSpace => "depth_to_space",
            OpKind::PadReflect => "pad_reflect",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Saved per-operation state for the reverse pass.
pub(crate) enum Op<T> {
    Leaf,
    Conv { stride: usize, pad: usize, groups: usize },
    Pointwise,
    Add,
    Sub,
    Mul,
    Scale(T),
    MulScalar,
    Gelu,
    Relu,
    Abs,
    Softmax { axis: usize },
    MaxScalar,
    GlobalAvgPool,
    ChannelNorm { xhat: Vec<T>, inv_std: Vec<T> },
    L2Normalize { inv_norm: Vec<T> },
    ScaleChannels,
    ScaleSamples(Vec<T>),
    Narrow { axis: usize, start: usize },
    Concat { axis: usize },
    Reshape,
    DepthToSpace,
    PadReflect,
    Sum,
    Mean,
}

impl<T> Op<T> {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv { groups, .. } if *groups > 1 => OpKind::DwConv2d,
            Op::Conv { .. } => OpKind::Conv2d,
            Op::Pointwise => OpKind::Pointwise,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::MulScalar => OpKind::MulScalar,
            Op::Gelu => OpKind::Gelu,
            Op::Relu => OpKind::Relu,
            Op::Abs => OpKind::Abs,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::MaxScalar => OpKind::MaxScalar,
            Op::GlobalAvgPool => OpKind::GlobalAvgPool,
            Op::ChannelNorm { .. } => OpKind::ChannelNorm,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::ScaleChannels => OpKind::ScaleChannels,
            Op::ScaleSamples(_) => OpKind::ScaleSamples,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Concat { .. } => OpKind::Concat,
            Op::Reshape => OpKind::Reshape,
            Op::DepthToSpace => OpKind::DepthToSpace,
            Op::PadReflect => OpKind::PadReflect,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) op: Op<T>,
    pub(crate) inputs: Vec<Var<T>>,
    pub(crate) value: Rc<Tensor<T>>,
}

/// Ordered record of executed operations.
///
/// Nodes are appended as operations run, so every node's inputs precede it.
/// [`Graph::backward`] walks the record once in reverse.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
    corrupt: Option<OpKind>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_done: false, corrupt: None }
    }

    /// Inserts a tensor. With `requires_grad` it becomes a leaf whose
    /// gradient is retained after [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var<T> {
        if requires_grad {
            self.push(Op::Leaf, Vec::new(), value)
        } else {
            Self::constant(value)
        }
    }

    pub fn constant(value: Tensor<T>) -> Var<T> {
        Var { value: Rc::new(value), node: None }
    }

    /// Identity forward; the result carries no gradient back to `x`.
    pub fn stop_gradient(&self, x: &Var<T>) -> Var<T> {
        Var { value: Rc::clone(&x.value), node: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Perturbs the reverse rule of one operation kind. Used by the gradient
    /// checker's negative control.
    pub fn corrupt_backward(&mut self, kind: OpKind) {
        self.corrupt = Some(kind);
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<Var<T>>, value: Tensor<T>) -> Var<T> {
        let id = NodeId(self.nodes.len());
        let value = Rc::new(value);
        self.nodes.push(Node { op, inputs, value: Rc::clone(&value) });
        Var { value, node: Some(id) }
    }

    /// Records `op` if any input is tracked; otherwise returns a constant.
    pub(crate) fn record(&mut self, op: Op<T>, inputs: Vec<Var<T>>, value: Tensor<T>) -> Var<T> {
        if inputs.iter().any(Var::is_tracked) {
            self.push(op, inputs, value)
        } else {
            Self::constant(value)
        }
    }

    /// Propagates d(loss)/d(node) to every tracked node.
    pub fn backward(&mut self, loss: &Var<T>) -> Result<()> {
        if loss.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape()));
        }
        self.backward_with(loss, Tensor::from_parts(loss.shape(), vec![T::one()]))
    }

    /// Reverse pass from a non-scalar output with a given output gradient,
    /// i.e. the gradient of `sum(seed * out)`.
    pub fn backward_with(&mut self, out: &Var<T>, seed: Tensor<T>) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if seed.shape() != out.shape() {
            return Err(TensorError::ShapeMismatch { op: "backward", lhs: out.shape(), rhs: seed.shape() });
        }
        let root = out.node.ok_or(TensorError::DetachedLoss)?;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(seed);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.grads[idx].take() else { continue };
            let need: Vec<bool> = node.inputs.iter().map(Var::is_tracked).collect();
            let mut input_grads = super::ops::vjp(node, &gout, &need);
            if self.corrupt == Some(node.op.kind()) {
                for g in input_grads.iter_mut().flatten() {
                    g.data_mut().iter_mut().for_each(|v| *v = *v * T::lit(1.01) + T::lit(1e-3));
                }
            }
            let targets: Vec<Option<NodeId>> = node.inputs.iter().map(|v| v.node).collect();
            for (target, grad) in targets.into_iter().zip(input_grads) {
                if let (Some(t), Some(g)) = (target, grad) {
                    match &mut self.grads[t.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
        }
        self.backward_done = true;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        let id = v.node?;
        if !matches!(self.nodes.get(id.0)?.op, Op::Leaf) {
            return None;
        }
        self.grads.get(id.0)?.as_ref()
    }

    /// Clears gradients so backward may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// First recorded operation whose output holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(NodeId, OpKind)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (NodeId(i), n.op.kind()))
    }
}
