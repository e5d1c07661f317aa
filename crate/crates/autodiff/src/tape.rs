use crate::error::{AutodiffError, Result};
use crate::ops::{self, Op};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so every op's inputs precede it and a
/// single reverse sweep visits each node once.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    flops: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an input tensor. Leaves with `requires_grad` receive a
    /// gradient from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Arithmetic operations performed by forward ops so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn reset_flops(&mut self) {
        self.flops = 0;
    }

    pub(crate) fn add_flops(&mut self, n: usize) {
        self.flops += n as u64;
    }

    /// Records `value` produced by `op`. When no input needs a gradient the
    /// node is stored as a constant and its backward rule is dropped.
    pub(crate) fn record(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.push(value, op, requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every leaf
    /// created with `requires_grad`; fan-out contributions accumulate.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(AutodiffError::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(loss_value.shape()));
        }
        let mut leaves = Gradients { grads: Vec::new() };
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let g = grads[i].take().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                leaves.insert(i, g);
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, contribution) in ops::backward(self, node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_scaled(&contribution, 1.0),
                    slot => *slot = Some(contribution),
                }
            }
        }
        // Leaves recorded after the loss never reach it.
        for (i, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                leaves.insert(i, Tensor::zeros(node.value.shape()));
            }
        }
        Ok(leaves)
    }
}

/// Gradients of a scalar with respect to the tape's trainable leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    fn insert(&mut self, index: usize, g: Tensor) {
        if self.grads.len() <= index {
            self.grads.resize(index + 1, None);
        }
        self.grads[index] = Some(g);
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
