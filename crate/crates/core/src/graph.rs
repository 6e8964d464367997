//! Reverse-mode autodiff over [`Tensor`] operations.
//!
//! A [`Graph`] is an append-only tape: every op pushes a node holding its
//! value and its parents, so node indices are already a topological order and
//! the backward sweep is a single reverse pass. Gradients are accumulated
//! only for nodes that (transitively) depend on a `needs_grad` leaf;
//! intermediate gradients are dropped as soon as they have been propagated,
//! which keeps the backward peak memory close to the retained activations.

use crate::conv;
use crate::tensor::{l1_sign, Scalar, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

enum Op<S> {
    Leaf,
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    Deconv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    OneMinus(NodeId),
    Concat(Vec<NodeId>),
    /// L1 distance between two tensors, mean- or sum-reduced to a scalar.
    AbsDiffLoss {
        a: NodeId,
        b: NodeId,
        mean: bool,
    },
    /// Linear combination of scalar nodes.
    WeightedSum(Vec<(S, NodeId)>),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn grad_of(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>, needs_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn conv(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let v = conv::conv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        let ng = self.grad_of(x) || self.grad_of(w) || b.is_some_and(|b| self.grad_of(b));
        self.push(v, Op::Conv { x, w, b, stride, pad }, ng)
    }

    /// Transposed convolution; `out_pad` is fixed to `stride - 1` so spatial
    /// dims are multiplied exactly by `stride`.
    pub fn deconv(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> NodeId {
        let v = conv::deconv2d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
            stride - 1,
        );
        let ng = self.grad_of(x) || self.grad_of(w) || b.is_some_and(|b| self.grad_of(b));
        self.push(v, Op::Deconv { x, w, b, stride, pad }, ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).relu();
        let ng = self.grad_of(x);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).sigmoid();
        let ng = self.grad_of(x);
        self.push(v, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).tanh_elem();
        let ng = self.grad_of(x);
        self.push(v, Op::Tanh(x), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        let ng = self.grad_of(a) || self.grad_of(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        let ng = self.grad_of(a) || self.grad_of(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).mul(self.value(b));
        let ng = self.grad_of(a) || self.grad_of(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).one_minus();
        let ng = self.grad_of(x);
        self.push(v, Op::OneMinus(x), ng)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let tensors: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_channels(&tensors);
        let ng = parts.iter().any(|&p| self.grad_of(p));
        self.push(v, Op::Concat(parts.to_vec()), ng)
    }

    pub fn abs_diff_loss(&mut self, a: NodeId, b: NodeId, mean: bool) -> NodeId {
        let v = if mean {
            self.value(a).mean_abs_diff(self.value(b))
        } else {
            self.value(a).sum_abs_diff(self.value(b))
        };
        let ng = self.grad_of(a) || self.grad_of(b);
        self.push(Tensor::scalar(v), Op::AbsDiffLoss { a, b, mean }, ng)
    }

    pub fn weighted_sum(&mut self, terms: &[(S, NodeId)]) -> NodeId {
        let mut acc = S::zero();
        for &(c, id) in terms {
            acc = acc + c * self.value(id).item();
        }
        let ng = terms.iter().any(|&(_, id)| self.grad_of(id));
        self.push(Tensor::scalar(acc), Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Backpropagate from a scalar `root`, returning per-node gradients.
    /// Only `needs_grad` leaves keep their gradient; everything else is
    /// freed as the sweep passes it.
    pub fn backward(&self, root: NodeId) -> Gradients<S> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        assert!(self.grad_of(root), "backward root does not depend on any parameter");
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(S::one()));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue; // keep leaf gradients
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], id: NodeId, contrib: Tensor<S>) {
        if !self.grad_of(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &self.nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::Conv { x, w, b, stride, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                if self.grad_of(*x) {
                    let gx = conv::conv2d_grad_input(
                        g,
                        wv,
                        *stride,
                        *pad,
                        (xv.height(), xv.width()),
                    );
                    self.accumulate(grads, *x, gx);
                }
                if self.grad_of(*w) {
                    let [_, _, kh, kw] = wv.shape();
                    let gw = conv::conv2d_grad_weight(xv, g, *stride, *pad, kh, kw);
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.grad_of(*b) {
                        self.accumulate(grads, *b, conv::conv2d_grad_bias(g));
                    }
                }
            }
            Op::Deconv { x, w, b, stride, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                if self.grad_of(*x) {
                    let gx = conv::conv2d(g, wv, None, *stride, *pad);
                    debug_assert_eq!(gx.shape(), xv.shape());
                    self.accumulate(grads, *x, gx);
                }
                if self.grad_of(*w) {
                    // adjoint: swap the roles of input and output gradient
                    let [_, _, kh, kw] = wv.shape();
                    let gw = conv::conv2d_grad_weight(g, xv, *stride, *pad, kh, kw);
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.grad_of(*b) {
                        self.accumulate(grads, *b, conv::conv2d_grad_bias(g));
                    }
                }
            }
            Op::Relu(x) => {
                let y = &self.nodes[i].value;
                let gx = g.zip_map(y, |gv, yv| if yv > S::zero() { gv } else { S::zero() });
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                let gx = g.zip_map(y, |gv, yv| gv * yv * (S::one() - yv));
                self.accumulate(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let y = &self.nodes[i].value;
                let gx = g.zip_map(y, |gv, yv| gv * (S::one() - yv * yv));
                self.accumulate(grads, *x, gx);
            }
            Op::Add(a, b) => {
                if self.grad_of(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.grad_of(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.grad_of(*a) {
                    self.accumulate(grads, *a, g.clone());
                }
                if self.grad_of(*b) {
                    self.accumulate(grads, *b, g.scale(-S::one()));
                }
            }
            Op::Mul(a, b) => {
                if self.grad_of(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b)));
                }
                if self.grad_of(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a)));
                }
            }
            Op::OneMinus(x) => {
                self.accumulate(grads, *x, g.scale(-S::one()));
            }
            Op::Concat(parts) => {
                let mut c_off = 0;
                for &p in parts {
                    let pc = self.value(p).channels();
                    if self.grad_of(p) {
                        self.accumulate(grads, p, g.slice_channels(c_off, pc));
                    }
                    c_off += pc;
                }
            }
            Op::AbsDiffLoss { a, b, mean } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let gs = g.item();
                let scale = if *mean {
                    gs / S::from_f64(av.len() as f64)
                } else {
                    gs
                };
                if self.grad_of(*a) {
                    let ga = av.zip_map(bv, |x, y| l1_sign(x - y) * scale);
                    self.accumulate(grads, *a, ga);
                }
                if self.grad_of(*b) {
                    let gb = av.zip_map(bv, |x, y| -l1_sign(x - y) * scale);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::WeightedSum(terms) => {
                let gs = g.item();
                for &(c, id) in terms {
                    if self.grad_of(id) {
                        self.accumulate(grads, id, Tensor::scalar(c * gs));
                    }
                }
            }
        }
    }
}

/// Result of [`Graph::backward`]: gradients keyed by node id.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<S>> {
        self.grads[id.0].take()
    }
}
