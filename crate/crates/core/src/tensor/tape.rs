use std::sync::atomic::{AtomicU32, Ordering};

use super::{conv, norm, ops, Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    pub(crate) index: usize,
    tape: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Exp,
    Log,
    Cos,
    Acos,
    Abs,
    Relu,
    Neg,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Unary {
        kind: UnaryKind,
        x: usize,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    AddScalar {
        x: usize,
    },
    MulScalar {
        x: usize,
        c: T,
    },
    Pow {
        x: usize,
        p: T,
    },
    Clamp {
        x: usize,
        lo: T,
        hi: T,
    },
    Matmul {
        a: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    Reduce {
        x: usize,
        kind: ops::ReduceKind,
        layout: ops::ReduceLayout,
        argmax: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    BroadcastTo {
        x: usize,
    },
    Slice {
        x: usize,
        layout: ops::AxisLayout,
        start: usize,
    },
    Concat {
        xs: Vec<usize>,
        layout: ops::AxisLayout,
    },
    AvgPool {
        x: usize,
        k: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        cache: norm::BnCache<T>,
    },
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so reverse index order is a valid
/// reverse topological order for [`Tape::backward`]. A tape is single-owner;
/// share models, not tapes, between threads.
#[derive(Debug)]
pub struct Tape<T> {
    id: u32,
    pub(crate) nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf honoring the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, mut tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad;
        tensor.set_grad(None);
        self.push_node(tensor, Op::Leaf, requires_grad)
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Copies a value into a new constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v)?.clone();
        Ok(self.constant(t))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    /// Value of a one-element variable.
    pub fn item(&self, v: Var) -> Result<T> {
        let t = self.value(v)?;
        if t.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: t.shape().to_vec(),
            });
        }
        Ok(t.data()[0])
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Result<Option<&[T]>> {
        Ok(self.value(v)?.grad())
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        let i = self.check(v)?;
        Ok(self.nodes[i].requires_grad)
    }

    pub(crate) fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    pub(crate) fn data(&self, index: usize) -> &[T] {
        self.nodes[index].value.data()
    }

    pub(crate) fn shape_of(&self, index: usize) -> &[usize] {
        self.nodes[index].value.shape()
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            index,
            tape: self.id,
        }
    }

    /// Appends a computed node; gradient tracking follows the inputs.
    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push_node(value, op, requires_grad)
    }

    /// Clears leaf gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.value.set_grad(None);
        }
        self.backward_done = false;
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Every leaf that requires a gradient and lies on a path to `loss`
    /// receives one; leaves off the path get zeros. Constants stay untouched.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.check(loss)?;
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.nodes[root].value.shape();
        if self.nodes[root].value.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: shape.to_vec(),
            });
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(root + 1);
        grads.resize_with(root + 1, || None);
        grads[root] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                leaf_grads.push((i, g));
            } else {
                self.backprop(i, &g, &mut grads)?;
            }
        }

        for (i, g) in leaf_grads {
            self.nodes[i].value.set_grad(Some(g));
        }
        for node in &mut self.nodes[..=root] {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.value.grad().is_none() {
                let n = node.value.numel();
                node.value.set_grad(Some(vec![T::zero(); n]));
            }
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let acc = |grads: &mut [Option<Vec<T>>], j: usize, contrib: Vec<T>| {
            if !self.nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e = *e + c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Unary { kind, x } => {
                let xd = self.data(*x);
                acc(grads, *x, ops::unary_backward(*kind, xd, y, g));
            }
            Op::Binary { kind, a, b } => {
                let (ga, gb) = ops::binary_backward(
                    *kind,
                    self.data(*a),
                    self.data(*b),
                    g,
                    self.nodes[*a].requires_grad,
                    self.nodes[*b].requires_grad,
                );
                if let Some(ga) = ga {
                    acc(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    acc(grads, *b, gb);
                }
            }
            Op::AddScalar { x } => acc(grads, *x, g.to_vec()),
            Op::MulScalar { x, c } => acc(grads, *x, g.iter().map(|&v| v * *c).collect()),
            Op::Pow { x, p } => {
                let xd = self.data(*x);
                let pm1 = *p - T::one();
                acc(
                    grads,
                    *x,
                    xd.iter()
                        .zip(g)
                        .map(|(&xv, &gv)| gv * *p * xv.powf(pm1))
                        .collect(),
                );
            }
            Op::Clamp { x, lo, hi } => {
                let xd = self.data(*x);
                acc(
                    grads,
                    *x,
                    xd.iter()
                        .zip(g)
                        .map(|(&xv, &gv)| if xv >= *lo && xv <= *hi { gv } else { T::zero() })
                        .collect(),
                );
            }
            Op::Matmul { a, b } => {
                let (ga, gb) = conv::matmul_backward(
                    self.data(*a),
                    self.shape_of(*a),
                    self.data(*b),
                    self.shape_of(*b),
                    g,
                    self.nodes[*a].requires_grad,
                    self.nodes[*b].requires_grad,
                );
                if let Some(ga) = ga {
                    acc(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    acc(grads, *b, gb);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let geom = conv::ConvGeom::new(self.shape_of(*x), self.shape_of(*w), *stride, *pad)?;
                if self.nodes[*x].requires_grad {
                    acc(grads, *x, conv::conv2d_backward_input(&geom, self.data(*w), g));
                }
                if self.nodes[*w].requires_grad {
                    acc(grads, *w, conv::conv2d_backward_weight(&geom, self.data(*x), g));
                }
            }
            Op::Reduce {
                x,
                kind,
                layout,
                argmax,
            } => {
                acc(
                    grads,
                    *x,
                    ops::reduce_backward(*kind, layout, self.data(*x), y, argmax, g),
                );
            }
            Op::Reshape { x } => acc(grads, *x, g.to_vec()),
            Op::BroadcastTo { x } => {
                acc(
                    grads,
                    *x,
                    ops::broadcast_backward(self.shape_of(*x), node.value.shape(), g),
                );
            }
            Op::Slice { x, layout, start } => {
                acc(grads, *x, ops::slice_backward(layout, *start, y.len(), g));
            }
            Op::Concat { xs, layout } => {
                for (piece, part) in xs.iter().zip(ops::concat_backward(layout, xs.len(), g)) {
                    acc(grads, *piece, part);
                }
            }
            Op::AvgPool { x, k } => {
                acc(grads, *x, ops::avg_pool_backward(self.shape_of(*x), *k, g));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (gx, ggamma, gbeta) =
                    norm::batch_norm_backward(self.shape_of(*x), self.data(*gamma), cache, g);
                acc(grads, *x, gx);
                acc(grads, *gamma, ggamma);
                acc(grads, *beta, gbeta);
            }
        }
        Ok(())
    }
}
