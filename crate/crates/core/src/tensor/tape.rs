use super::conv::{self, ConvGeometry};
use super::norm::{self, BnSaved};
use super::pool::{self, PoolGeometry};
use super::{ops, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable operation.
///
/// `backward` receives the upstream gradient, the input values and the
/// output value, and returns one optional gradient per input.
pub trait Function {
    fn backward(&self, grad: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Vec<Option<Tensor>>;
}

pub(crate) enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    BatchNorm { x: Var, gamma: Var, beta: Var, saved: BnSaved },
    Relu(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, geom: PoolGeometry },
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Softmax(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Pick { x: Var, index: usize },
    Custom { inputs: Vec<Var>, f: Box<dyn Function> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Relu(x)
            | Op::GlobalAvgPool(x)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::Scale(x, _)
            | Op::MaxPool { x, .. }
            | Op::AvgPool { x, .. }
            | Op::Dropout { x, .. }
            | Op::Pick { x, .. } => vec![*x],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(xs) => xs.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// Ordered record of executed operations. Inputs always precede outputs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient of a scalar with respect to every recorded value that needed one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a user-defined operation whose forward value was computed by
    /// the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, f: Box<dyn Function>) -> Var {
        self.push(output, Op::Custom { inputs: inputs.to_vec(), f })
    }

    /// Reverse pass from a scalar. Gradients accumulate additively across
    /// every use of a value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::DisconnectedGraph);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.node_backward(node, &g);
            grads[i] = Some(g);
            for (input, grad) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                if self.needs(*x) {
                    out.push((*x, conv::backward_input(g, val(*w), val(*x).shape(), geom)));
                }
                if self.needs(*w) {
                    out.push((*w, conv::backward_weight(g, val(*x), val(*w).shape(), geom)));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        out.push((*b, conv::backward_bias(g)));
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, saved } => {
                let (dx, dg, db) = norm::backward(g, val(*gamma), saved);
                if self.needs(*x) {
                    out.push((*x, dx));
                }
                if self.needs(*gamma) {
                    out.push((*gamma, dg));
                }
                if self.needs(*beta) {
                    out.push((*beta, db));
                }
            }
            Op::Relu(x) => out.push((*x, ops::relu_backward(g, &node.value))),
            Op::MaxPool { x, argmax } => out.push((*x, pool::max_pool_backward(g, argmax, val(*x).shape()))),
            Op::AvgPool { x, geom } => out.push((*x, pool::avg_pool_backward(g, val(*x).shape(), geom))),
            Op::Concat(xs) => {
                let shapes: Vec<&[usize]> = xs.iter().map(|v| val(*v).shape()).collect();
                for (v, gi) in xs.iter().zip(ops::concat_backward(g, &shapes)) {
                    out.push((*v, gi));
                }
            }
            Op::GlobalAvgPool(x) => out.push((*x, ops::gap_backward(g, val(*x).shape()))),
            Op::Linear { x, w, b } => {
                if self.needs(*x) {
                    out.push((*x, ops::linear_backward_input(g, val(*w))));
                }
                if self.needs(*w) {
                    out.push((*w, ops::linear_backward_weight(g, val(*x))));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        out.push((*b, ops::linear_backward_bias(g)));
                    }
                }
            }
            Op::Softmax(x) => out.push((*x, ops::softmax_backward(g, &node.value))),
            Op::Dropout { x, mask } => out.push((*x, ops::mul_elementwise(g, mask))),
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                out.push((*a, ops::mul_elementwise(g, val(*b).data())));
                out.push((*b, ops::mul_elementwise(g, val(*a).data())));
            }
            Op::Scale(x, c) => out.push((*x, g.map(|v| v * c))),
            Op::Sum(x) => out.push((*x, Tensor::full(val(*x).shape(), g.data()[0]))),
            Op::Pick { x, index } => {
                let mut d = Tensor::zeros(val(*x).shape());
                d.data_mut()[*index] = g.data()[0];
                out.push((*x, d));
            }
            Op::Custom { inputs, f } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                for (v, gi) in inputs.iter().zip(f.backward(g, &ins, &node.value)) {
                    if let Some(gi) = gi {
                        out.push((*v, gi));
                    }
                }
            }
        }
        out
    }
}
