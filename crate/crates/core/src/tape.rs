//! Reverse-mode automatic differentiation over a per-step tape.
//!
//! The tape records executed primitives in execution order, which is already
//! topological (an op's inputs are pushed before the op). `backward` walks the
//! records once in reverse, so each node is visited exactly once and gradient
//! accumulation order is fixed by construction.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Record<S: Scalar> {
    Leaf {
        grad_wanted: bool,
    },
    Relu {
        x: NodeId,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        x: NodeId,
        arg: Vec<usize>,
    },
    AvgPool {
        x: NodeId,
        k: usize,
    },
    AdaptivePool {
        x: NodeId,
    },
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    Softmax {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: S,
    },
    SumReduce {
        x: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<u32>,
    },
    /// `[n, c, h, w]` -> `[n * p, c * ps * ps]`, patches in row-major grid
    /// order. The fixed patch order is what makes patch-pooled models exactly
    /// permutation-invariant under re-summation.
    Patchify {
        x: NodeId,
        ps: usize,
    },
    /// `[n * p, f]` -> `[n, f]`, summing each group of `p` consecutive rows
    /// in ascending row order.
    GroupSum {
        x: NodeId,
        group: usize,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    record: Record<S>,
}

/// Gradients of one backward pass, addressed by node id.
pub struct Grads<S: Scalar> {
    by_node: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.by_node[id.0].as_ref()
    }

    /// Gradient of a node, or zeros of its shape if the node was not reached.
    pub fn get_or_zeros(&self, id: NodeId, dims: &[usize]) -> Tensor<S> {
        self.by_node[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(dims))
    }
}

pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    spent: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            spent: false,
        }
    }

    fn push(&mut self, value: Tensor<S>, record: Record<S>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, record });
        id
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

    /// Inserts an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<S>, grad_wanted: bool) -> NodeId {
        self.push(value, Record::Leaf { grad_wanted })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::relu(self.value(x))?;
        Ok(self.push(v, Record::Relu { x }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Record::MatMul { a, b }))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let v = ops::conv2d(
            self.value(x),
            self.value(w),
            b.map(|id| self.value(id)),
            stride,
            pad,
        )?;
        Ok(self.push(v, Record::Conv2d { x, w, b, stride, pad }))
    }

    pub fn max_pool2d(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let (v, arg) = ops::max_pool2d(self.value(x), k)?;
        Ok(self.push(v, Record::MaxPool { x, arg }))
    }

    pub fn avg_pool2d(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let v = ops::avg_pool2d(self.value(x), k)?;
        Ok(self.push(v, Record::AvgPool { x, k }))
    }

    pub fn adaptive_avg_pool(&mut self, x: NodeId, th: usize, tw: usize) -> Result<NodeId> {
        let v = ops::adaptive_avg_pool(self.value(x), th, tw)?;
        Ok(self.push(v, Record::AdaptivePool { x }))
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::dense(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(v, Record::Dense { x, w, b }))
    }

    pub fn reshape(&mut self, x: NodeId, dims: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x).reshaped(dims)?;
        Ok(self.push(v, Record::Reshape { x }))
    }

    /// `[n, ...]` -> `[n, prod]`
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let dims = self.value(x).dims();
        let n = dims[0];
        let inner: usize = dims[1..].iter().product();
        self.reshape(x, vec![n, inner])
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::softmax(self.value(x))?;
        Ok(self.push(v, Record::Softmax { x }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Record::Add { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> Result<NodeId> {
        let v = ops::scale(self.value(x), c)?;
        Ok(self.push(v, Record::Scale { x, c }))
    }

    pub fn sum_reduce(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::sum_reduce(self.value(x))?;
        Ok(self.push(v, Record::SumReduce { x }))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[u32]) -> Result<NodeId> {
        let v = ops::cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            v,
            Record::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn patchify(&mut self, x: NodeId, ps: usize) -> Result<NodeId> {
        let v = patchify_forward(self.value(x), ps)?;
        Ok(self.push(v, Record::Patchify { x, ps }))
    }

    pub fn group_sum(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let v = group_sum_forward(self.value(x), group)?;
        Ok(self.push(v, Record::GroupSum { x, group }))
    }

    /// Backward pass from a scalar loss node. Consumes the tape's one
    /// backward budget; calling again without a new forward pass errors.
    pub fn backward(&mut self, loss: NodeId) -> Result<Grads<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(
                "backward: loss must be a scalar".into(),
            ));
        }
        let seed = Tensor::from_vec(self.value(loss).dims().to_vec(), vec![S::ONE])?;
        self.backward_from(loss, seed)
    }

    /// Backward pass seeded with an explicit output gradient, used by
    /// saliency to inject analytically computed head gradients.
    pub fn backward_from(&mut self, node: NodeId, seed: Tensor<S>) -> Result<Grads<S>> {
        if self.spent {
            return Err(Error::TapeSpent);
        }
        self.spent = true;
        if seed.dims() != self.value(node).dims() {
            return Err(Error::ShapeMismatch {
                op: "backward seed",
                lhs: seed.dims().to_vec(),
                rhs: self.value(node).dims().to_vec(),
            });
        }

        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[node.0] = Some(seed);

        for i in (0..self.nodes.len()).rev() {
            let grad = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].record {
                Record::Leaf { grad_wanted } => {
                    if *grad_wanted {
                        grads[i] = Some(grad);
                    }
                }
                Record::Relu { x } => {
                    let gx = ops::relu_backward(self.value(*x), &grad)?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Record::MatMul { a, b } => {
                    let (ga, gb) = ops::matmul_backward(self.value(*a), self.value(*b), &grad)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Record::Conv2d { x, w, b, stride, pad } => {
                    let (gx, gw, gb) = ops::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &grad,
                        *stride,
                        *pad,
                        b.is_some(),
                    )?;
                    let b = *b;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *w, gw)?;
                    if let (Some(bid), Some(gb)) = (b, gb) {
                        accumulate(&mut grads, bid, gb)?;
                    }
                }
                Record::MaxPool { x, arg } => {
                    let gx = ops::max_pool2d_backward(self.value(*x).dims(), arg, &grad)?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Record::AvgPool { x, k } => {
                    let gx = ops::avg_pool2d_backward(self.value(*x).dims(), *k, &grad)?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Record::AdaptivePool { x } => {
                    let gx = ops::adaptive_avg_pool_backward(self.value(*x).dims(), &grad)?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Record::Dense { x, w, b } => {
                    let (gx, gw, gb) = ops::dense_backward(self.value(*x), self.value(*w), &grad)?;
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *w, gw)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Record::Reshape { x } => {
                    let gx = grad.reshaped(self.value(*x).dims().to_vec())?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Record::Softmax { x } => {
                    let gx = ops::softmax_backward(&self.nodes[i].value, &grad)?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Record::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a, grad.clone())?;
                    accumulate(&mut grads, b, grad)?;
                }
                Record::Scale { x, c } => {
                    let gx = ops::scale(&grad, *c)?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Record::SumReduce { x } => {
                    let g = grad.item();
                    let gx = Tensor::full(self.value(*x).dims(), g);
                    accumulate(&mut grads, *x, gx)?;
                }
                Record::CrossEntropy { logits, labels } => {
                    let gx = ops::cross_entropy_backward(self.value(*logits), labels, grad.item())?;
                    accumulate(&mut grads, *logits, gx)?;
                }
                Record::Patchify { x, ps } => {
                    let gx = patchify_backward(self.value(*x).dims(), *ps, &grad)?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Record::GroupSum { x, group } => {
                    let gx = group_sum_backward(self.value(*x).dims(), *group, &grad)?;
                    accumulate(&mut grads, *x, gx)?;
                }
            }
        }
        Ok(Grads { by_node: grads })
    }
}

fn accumulate<S: Scalar>(
    grads: &mut [Option<Tensor<S>>],
    id: NodeId,
    g: Tensor<S>,
) -> Result<()> {
    match &mut grads[id.0] {
        slot @ None => *slot = Some(g),
        Some(existing) => *existing = ops::add(existing, &g)?,
    }
    Ok(())
}

pub(crate) fn patchify_forward<S: Scalar>(x: &Tensor<S>, ps: usize) -> Result<Tensor<S>> {
    if x.rank() != 4 {
        return Err(Error::InvalidArgument("patchify: expected [n,c,h,w]".into()));
    }
    let (n, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    if ps == 0 || h % ps != 0 || w % ps != 0 {
        return Err(Error::InvalidArgument(format!(
            "patchify: patch size {ps} does not divide {h}x{w}"
        )));
    }
    let (gh, gw) = (h / ps, w / ps);
    let p = gh * gw;
    let d = c * ps * ps;
    let xd = x.data();
    let mut out = vec![S::ZERO; n * p * d];
    for ni in 0..n {
        for gy in 0..gh {
            for gx in 0..gw {
                let patch = gy * gw + gx;
                let base = (ni * p + patch) * d;
                let mut o = base;
                for ci in 0..c {
                    for py in 0..ps {
                        let row = ((ni * c + ci) * h + gy * ps + py) * w + gx * ps;
                        out[o..o + ps].copy_from_slice(&xd[row..row + ps]);
                        o += ps;
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![n * p, d], out)
}

fn patchify_backward<S: Scalar>(x_dims: &[usize], ps: usize, grad: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, c, h, w) = (x_dims[0], x_dims[1], x_dims[2], x_dims[3]);
    let (gh, gw) = (h / ps, w / ps);
    let p = gh * gw;
    let d = c * ps * ps;
    let gd = grad.data();
    let mut gx = vec![S::ZERO; n * c * h * w];
    for ni in 0..n {
        for gy in 0..gh {
            for gxp in 0..gw {
                let patch = gy * gw + gxp;
                let base = (ni * p + patch) * d;
                let mut o = base;
                for ci in 0..c {
                    for py in 0..ps {
                        let row = ((ni * c + ci) * h + gy * ps + py) * w + gxp * ps;
                        for (dst, &g) in gx[row..row + ps].iter_mut().zip(&gd[o..o + ps]) {
                            *dst += g;
                        }
                        o += ps;
                    }
                }
            }
        }
    }
    Tensor::from_vec(x_dims.to_vec(), gx)
}

pub(crate) fn group_sum_forward<S: Scalar>(x: &Tensor<S>, group: usize) -> Result<Tensor<S>> {
    if x.rank() != 2 || group == 0 || x.dims()[0] % group != 0 {
        return Err(Error::InvalidArgument(format!(
            "group_sum: cannot group {:?} by {group}",
            x.dims()
        )));
    }
    let n = x.dims()[0] / group;
    let f = x.dims()[1];
    let xd = x.data();
    let mut out = vec![S::ZERO; n * f];
    for ni in 0..n {
        for gi in 0..group {
            let row = &xd[(ni * group + gi) * f..(ni * group + gi + 1) * f];
            for (o, &v) in out[ni * f..(ni + 1) * f].iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    Tensor::from_vec(vec![n, f], out)
}

fn group_sum_backward<S: Scalar>(x_dims: &[usize], group: usize, grad: &Tensor<S>) -> Result<Tensor<S>> {
    let f = x_dims[1];
    let n = x_dims[0] / group;
    let gd = grad.data();
    let mut gx = vec![S::ZERO; x_dims.iter().product()];
    for ni in 0..n {
        let grow = &gd[ni * f..(ni + 1) * f];
        for gi in 0..group {
            gx[(ni * group + gi) * f..(ni * group + gi + 1) * f].copy_from_slice(grow);
        }
    }
    Tensor::from_vec(x_dims.to_vec(), gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, -2.0, 5.0]).unwrap(), true);
        let loss = tape.sum_reduce(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn relu_grad_zero_at_negative_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![1], vec![-1.0]).unwrap(), true);
        let y = tape.relu(x).unwrap();
        let loss = tape.sum_reduce(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn second_backward_without_new_forward_errors() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::scalar(1.0f32), true);
        let loss = tape.sum_reduce(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeSpent)));
    }

    #[test]
    fn reused_node_accumulates_both_paths() {
        // loss = sum(x + x) => dloss/dx = 2
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum_reduce(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn patchify_round_trips_through_group_sum_shape() {
        let x = Tensor::<f32>::from_vec(vec![2, 1, 4, 4], (0..32).map(|v| v as f32).collect())
            .unwrap();
        let p = patchify_forward(&x, 2).unwrap();
        assert_eq!(p.dims(), &[8, 4]);
        // first patch of first image is the top-left 2x2 block
        assert_eq!(&p.data()[0..4], &[0.0, 1.0, 4.0, 5.0]);
        let s = group_sum_forward(&p, 4).unwrap();
        assert_eq!(s.dims(), &[2, 4]);
    }
}
