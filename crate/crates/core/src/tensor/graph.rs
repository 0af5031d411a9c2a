use super::{ops, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operations.
///
/// Shape contracts (`B` batch, `C` channels, `H` rows, `W` time):
///
/// * `Add`, `Mul`: equal shapes, or the second operand's shape is a suffix
///   of the first (broadcast over the leading axes).
/// * `MatMul`: `(m, k) x (k, n)`.
/// * `Conv2dRowwise`: input `(B, Cin, H, W)`, kernel `(Cout, Cin, 1, L)` or
///   `(Cout, Cin, L)`, bias `(Cout)`. Stride 1, zero "same" padding with
///   `(L - 1) / 2` columns on the left, so the output is `(B, Cout, H, W)`.
///   Rows never mix.
/// * `BatchNorm`: input `(B, C, ...)`, scale and shift `(C)`; statistics
///   over every axis except `C`.
/// * `BatchNormFrozen`: as above plus fixed mean and variance `(C)`.
/// * `GlobalAvgPool`: `(B, C, ...)` to `(B, C)`.
/// * `SoftmaxCrossEntropy`: logits `(B, K)` to the scalar batch-mean loss.
/// * `Sum`, `Mean`, `Variance`: any shape to a scalar. Variance is the
///   population variance.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Mul,
    MatMul,
    Conv2dRowwise,
    Relu,
    BatchNorm { eps: f64 },
    BatchNormFrozen { eps: f64 },
    GlobalAvgPool,
    SoftmaxCrossEntropy { targets: Vec<usize> },
    Reshape { shape: Vec<usize> },
    Sum,
    Mean,
    Variance,
    Scale { factor: f64 },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::MatMul => "matmul",
            Op::Conv2dRowwise => "conv2d_rowwise",
            Op::Relu => "relu",
            Op::BatchNorm { .. } => "batchnorm",
            Op::BatchNormFrozen { .. } => "batchnorm_frozen",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Reshape { .. } => "reshape",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Variance => "variance",
            Op::Scale { .. } => "scale",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Leaf => 0,
            Op::Relu
            | Op::GlobalAvgPool
            | Op::SoftmaxCrossEntropy { .. }
            | Op::Reshape { .. }
            | Op::Sum
            | Op::Mean
            | Op::Variance
            | Op::Scale { .. } => 1,
            Op::Add | Op::Mul | Op::MatMul => 2,
            Op::Conv2dRowwise | Op::BatchNorm { .. } => 3,
            Op::BatchNormFrozen { .. } => 5,
        }
    }
}

/// Values kept from the forward pass for the backward pass.
#[derive(Clone, Debug, Default)]
pub(crate) enum Saved<T> {
    #[default]
    Nothing,
    BatchNorm {
        mean: Vec<f64>,
        var: Vec<f64>,
        xhat: Vec<T>,
    },
    Softmax {
        probs: Vec<f64>,
    },
}

struct Node<T> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    requires_grad: bool,
    saved: Saved<T>,
}

/// Eagerly evaluated tape. Nodes are appended in creation order, which is a
/// topological order, and [`Graph::backward`] walks it in reverse.
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
            saved: Saved::Nothing,
        })
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Batch mean and population variance computed by a `BatchNorm` node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].saved {
            Saved::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    fn push(&mut self, node: Node<T>) -> NodeId {
        self.nodes.push(node);
        NodeId(self.nodes.len() - 1)
    }

    /// Evaluates `op` on the values of `inputs` and appends the result.
    /// Backward buffers are only retained when some input requires a gradient.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != op.arity() || op == Op::Leaf {
            return Err(Error::Contract(format!(
                "{} takes {} inputs, got {}",
                op.name(),
                op.arity(),
                inputs.len()
            )));
        }
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::Contract(format!("unknown node {bad:?}")));
        }
        let values: Vec<&Tensor<T>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        let (value, saved) = ops::forward(&op, &values, requires_grad)?;
        Ok(self.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
            requires_grad,
            saved: if requires_grad { saved } else { Saved::Nothing },
        }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn conv2d_rowwise(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Op::Conv2dRowwise, &[x, w, b])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Relu, &[x])
    }

    pub fn batchnorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        self.apply(Op::BatchNorm { eps }, &[x, gamma, beta])
    }

    pub fn batchnorm_frozen(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: NodeId,
        var: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        self.apply(Op::BatchNormFrozen { eps }, &[x, gamma, beta, mean, var])
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::GlobalAvgPool, &[x])
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        self.apply(
            Op::SoftmaxCrossEntropy {
                targets: targets.to_vec(),
            },
            &[logits],
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Sum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Mean, &[x])
    }

    pub fn variance(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(Op::Variance, &[x])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(Op::Scale { factor }, &[x])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let root = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Contract(format!("unknown node {loss:?}")))?;
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(root.value.shape().to_vec()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || node.op == Op::Leaf {
                continue;
            }
            let Some(upstream) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(|id| self.nodes[id.0].requires_grad).collect();
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            let input_grads = ops::backward(&node.op, &inputs, &node.saved, &upstream, &needs)?;
            for ((id, need), g) in node.inputs.iter().zip(needs).zip(input_grads) {
                if !need {
                    continue;
                }
                let Some(g) = g else { continue };
                debug_assert_eq!(g.shape(), self.nodes[id.0].value.shape());
                match &mut grads[id.0] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(upstream);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a scalar loss, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}
