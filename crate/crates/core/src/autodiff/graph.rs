use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, Op};
use super::{AutodiffError, Tensor};

/// Common interface of the recording tape and the eager evaluator.
///
/// Network, integration, compositing and loss code is written once against
/// this trait; training runs it on a [`Tape`], rendering on [`Eager`].
pub trait Graph {
    type Value: Clone;

    fn constant(&mut self, value: Tensor) -> Self::Value;

    /// Trainable leaf. Graphs that do not differentiate treat it as a constant.
    fn leaf(&mut self, value: Tensor) -> Self::Value {
        self.constant(value)
    }

    fn value<'a>(&'a self, v: &'a Self::Value) -> &'a Tensor;

    fn apply(&mut self, op: Op, inputs: &[&Self::Value]) -> Result<Self::Value, AutodiffError>;

    fn affine(&mut self, x: &Self::Value, w: &Self::Value, b: &Self::Value) -> Result<Self::Value, AutodiffError> {
        self.apply(Op::Affine, &[x, w, b])
    }
    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, AutodiffError> {
        self.apply(Op::MatMul, &[a, b])
    }
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, AutodiffError> {
        self.apply(Op::Add, &[a, b])
    }
    fn sub(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, AutodiffError> {
        self.apply(Op::Sub, &[a, b])
    }
    fn mul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, AutodiffError> {
        self.apply(Op::Mul, &[a, b])
    }
    fn div(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value, AutodiffError> {
        self.apply(Op::Div, &[a, b])
    }
    fn sin(&mut self, x: &Self::Value) -> Result<Self::Value, AutodiffError> {
        self.apply(Op::Sin, &[x])
    }
    fn sigmoid(&mut self, x: &Self::Value) -> Result<Self::Value, AutodiffError> {
        self.apply(Op::Sigmoid, &[x])
    }
    fn exp(&mut self, x: &Self::Value) -> Result<Self::Value, AutodiffError> {
        self.apply(Op::Exp, &[x])
    }
    fn square(&mut self, x: &Self::Value) -> Result<Self::Value, AutodiffError> {
        self.apply(Op::Square, &[x])
    }
    fn abs(&mut self, x: &Self::Value) -> Result<Self::Value, AutodiffError> {
        self.apply(Op::Abs, &[x])
    }
    fn sum(&mut self, x: &Self::Value) -> Result<Self::Value, AutodiffError> {
        self.apply(Op::Sum, &[x])
    }
    fn mean(&mut self, x: &Self::Value) -> Result<Self::Value, AutodiffError> {
        self.apply(Op::Mean, &[x])
    }
    fn variance(&mut self, x: &Self::Value, axis: usize) -> Result<Self::Value, AutodiffError> {
        self.apply(Op::Variance { axis }, &[x])
    }
    fn concat(&mut self, parts: &[&Self::Value], axis: usize) -> Result<Self::Value, AutodiffError> {
        self.apply(Op::Concat { axis }, parts)
    }
    fn scale(&mut self, x: &Self::Value, factor: f64) -> Result<Self::Value, AutodiffError> {
        self.apply(Op::Scale(factor), &[x])
    }
    fn slice_cols(&mut self, x: &Self::Value, start: usize, len: usize) -> Result<Self::Value, AutodiffError> {
        self.apply(Op::Slice { axis: 1, start, len }, &[x])
    }
    fn slice_rows(&mut self, x: &Self::Value, start: usize, len: usize) -> Result<Self::Value, AutodiffError> {
        self.apply(Op::Slice { axis: 0, start, len }, &[x])
    }
    fn fourier(&mut self, x: &Self::Value, bands: usize) -> Result<Self::Value, AutodiffError> {
        self.apply(Op::Fourier { bands }, &[x])
    }
}

/// Eager evaluation without recording. Used for rendering and diagnostics.
#[derive(Debug, Default)]
pub struct Eager;

impl Graph for Eager {
    type Value = Rc<Tensor>;

    fn constant(&mut self, value: Tensor) -> Rc<Tensor> {
        Rc::new(value)
    }

    fn value<'a>(&'a self, v: &'a Rc<Tensor>) -> &'a Tensor {
        v
    }

    fn apply(&mut self, op: Op, inputs: &[&Rc<Tensor>]) -> Result<Rc<Tensor>, AutodiffError> {
        let refs: Vec<&Tensor> = inputs.iter().map(|t| t.as_ref()).collect();
        kernels::forward(&op, &refs).map(Rc::new)
    }
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    id: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
}

struct Node {
    value: Tensor,
    op: Option<Op>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Append-only record of operations for reverse-mode differentiation.
///
/// Node ids are assigned in creation order, so every input id precedes the
/// nodes that consume it.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, None, Vec::new(), true)
    }

    pub fn requires_grad(&self, v: &Var) -> bool {
        self.nodes.get(v.id).map(|n| n.requires_grad).unwrap_or(false)
    }

    fn push(&mut self, value: Tensor, op: Option<Op>, inputs: Vec<usize>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, inputs, requires_grad });
        Var { tape: self.id, id: self.nodes.len() - 1 }
    }

    fn check(&self, v: &Var) -> Result<(), AutodiffError> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            Err(AutodiffError::Detached(v.id))
        } else {
            Ok(())
        }
    }

    /// Reverse sweep from a scalar node.
    ///
    /// Each node is visited once, in reverse creation order. Only gradients of
    /// leaves are retained in the result.
    pub fn backward(&self, loss: &Var) -> Result<Gradients, AutodiffError> {
        self.check(loss)?;
        let root = &self.nodes[loss.id];
        if root.value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::filled(root.value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let Some(op) = &node.op else {
                leaves[id] = Some(g);
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let local = kernels::backward(op, &inputs, &node.value, &g, &needs);
            for (&input, contribution) in node.inputs.iter().zip(local) {
                if let Some(c) = contribution {
                    match &mut grads[input] {
                        Some(acc) => acc.add_assign(&c),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { tape: self.id, grads: leaves, shapes })
    }
}

impl Graph for Tape {
    type Value = Var;

    fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None, Vec::new(), false)
    }

    fn leaf(&mut self, value: Tensor) -> Var {
        self.param(value)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        assert_eq!(v.tape, self.id, "value from a different tape");
        &self.nodes[v.id].value
    }

    fn apply(&mut self, op: Op, inputs: &[&Var]) -> Result<Var, AutodiffError> {
        for v in inputs {
            self.check(v)?;
        }
        let refs: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.id].value).collect();
        let value = kernels::forward(&op, &refs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.id].requires_grad);
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(value, Some(op), ids, requires_grad))
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf; zero when the leaf does
    /// not influence the loss.
    pub fn wrt(&self, v: &Var) -> Result<Tensor, AutodiffError> {
        if v.tape != self.tape || v.id >= self.grads.len() {
            return Err(AutodiffError::Detached(v.id));
        }
        Ok(self.grads[v.id].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id])))
    }
}
