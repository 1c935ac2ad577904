//! Tape-style reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so every parent index is smaller
//! than its child's and a reverse sweep over the tape is a valid topological
//! order for the backward pass.

use super::logspace;
use super::tensor::Tensor;
use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softplus(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// `x * scale + shift`, with row vectors broadcast over the rows of `x`.
    AffineBroadcast {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
    },
    /// Row-wise `v - logsumexp(v)`.
    LogSoftmax(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only computation graph owned by one training step.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a backward pass: one adjoint per node reachable from the root.
#[derive(Debug)]
pub struct Adjoints {
    grads: Vec<Option<Tensor>>,
}

impl Adjoints {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Adjoint of `id`, or zeros of `like`'s shape when the node did not
    /// influence the root.
    pub fn get_or_zeros(&self, id: NodeId, like: &Tensor) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| like.zeros_like())
    }
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Inputs, parameters and constants all enter the graph as leaves.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::tanh, "tanh")?;
        Ok(self.push(Op::Tanh(a), v))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.max(0.0), "relu")?;
        Ok(self.push(Op::Relu(a), v))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::exp, "exp")?;
        Ok(self.push(Op::Exp(a), v))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::ln, "log")?;
        Ok(self.push(Op::Log(a), v))
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(softplus, "softplus")?;
        Ok(self.push(Op::Softplus(a), v))
    }

    /// Sum of all entries, as a `1 x 1` tensor.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum())?;
        Ok(self.push(Op::Sum(a), v))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.numel() as f64)?;
        Ok(self.push(Op::Mean(a), v))
    }

    pub fn affine_broadcast(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        let v = self.value(x).affine_broadcast(self.value(scale), self.value(shift))?;
        Ok(self.push(Op::AffineBroadcast { x, scale, shift }, v))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let mut out = Vec::with_capacity(t.numel());
        for r in 0..t.rows() {
            out.extend(logspace::log_softmax(t.row_slice(r))?);
        }
        let v = Tensor::from_raw(t.shape().to_vec(), out, "log_softmax")?;
        Ok(self.push(Op::LogSoftmax(a), v))
    }

    /// Multiply by a constant scalar (recorded as a leaf plus a product).
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let k = Tensor::full(self.value(a).shape().to_vec(), c)?;
        let k = self.leaf(k);
        self.mul(a, k)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: NodeId) -> Result<Adjoints> {
        if root.0 >= self.nodes.len() {
            return contract("backward: root is not a node of this graph");
        }
        if !self.value(root).is_scalar() {
            return contract(format!(
                "backward: root must be scalar, has shape {:?}",
                self.value(root).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.value(root).shape().to_vec(), 1.0)?);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let out = &node.value;
            let mut acc = |id: NodeId, contrib: Tensor| -> Result<()> {
                match &mut grads[id.0] {
                    Some(existing) => *existing = existing.add(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
                Ok(())
            };
            match node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(a), self.value(b));
                    acc(a, g.matmul(&vb.transpose()?)?)?;
                    acc(b, va.transpose()?.matmul(&g)?)?;
                }
                Op::Add(a, b) => {
                    acc(a, g.clone())?;
                    acc(b, g.clone())?;
                }
                Op::Sub(a, b) => {
                    acc(a, g.clone())?;
                    acc(b, g.scale(-1.0)?)?;
                }
                Op::Mul(a, b) => {
                    acc(a, g.mul(self.value(b))?)?;
                    acc(b, g.mul(self.value(a))?)?;
                }
                Op::Tanh(a) => acc(a, g.zip(out, |g, y| g * (1.0 - y * y), "tanh'")?)?,
                Op::Relu(a) => acc(a, g.zip(self.value(a), |g, x| if x > 0.0 { g } else { 0.0 }, "relu'")?)?,
                Op::Exp(a) => acc(a, g.mul(out)?)?,
                Op::Log(a) => acc(a, g.zip(self.value(a), |g, x| g / x, "log'")?)?,
                Op::Softplus(a) => acc(a, g.zip(self.value(a), |g, x| g * sigmoid(x), "softplus'")?)?,
                Op::Sum(a) => {
                    let ga = g.item();
                    acc(a, Tensor::full(self.value(a).shape().to_vec(), ga)?)?;
                }
                Op::Mean(a) => {
                    let va = self.value(a);
                    let ga = g.item() / va.numel() as f64;
                    acc(a, Tensor::full(va.shape().to_vec(), ga)?)?;
                }
                Op::AffineBroadcast { x, scale, shift } => {
                    let (vx, vs) = (self.value(x), self.value(scale));
                    let zero = vs.zeros_like();
                    acc(x, g.affine_broadcast(vs, &zero)?)?;
                    let gs = g.mul(vx)?.sum_rows();
                    let gs = Tensor::new(vs.shape().to_vec(), gs.into_data())?;
                    acc(scale, gs)?;
                    let gt = g.sum_rows();
                    let gt = Tensor::new(self.value(shift).shape().to_vec(), gt.into_data())?;
                    acc(shift, gt)?;
                }
                Op::LogSoftmax(a) => {
                    let c = out.cols();
                    let mut d = Vec::with_capacity(out.numel());
                    for r in 0..out.rows() {
                        let gr = g.row_slice(r);
                        let yr = out.row_slice(r);
                        let gsum: f64 = gr.iter().sum();
                        d.extend(gr.iter().zip(yr).map(|(&gi, &yi)| gi - yi.exp() * gsum));
                    }
                    debug_assert_eq!(d.len(), out.rows() * c);
                    acc(a, Tensor::from_raw(out.shape().to_vec(), d, "log_softmax'")?)?;
                }
            }
            grads[i] = Some(g);
        }
        Ok(Adjoints { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0).unwrap());
        let y = g.leaf(Tensor::scalar(2.0).unwrap());
        let r = g.mul(x, y).unwrap();
        let adj = g.backward(r).unwrap();
        assert_eq!(adj.get(x).unwrap().item(), 2.0);
        assert_eq!(adj.get(y).unwrap().item(), 3.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::row(vec![0.3, -1.2, 2.5, 0.0]).unwrap());
        let ls = g.log_softmax(v).unwrap();
        let p = g.exp(ls).unwrap();
        let s = g.sum(p).unwrap();
        assert!((g.value(s).item() - 1.0).abs() < 1e-12);
        let adj = g.backward(s).unwrap();
        assert!(adj.get(v).unwrap().data().iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::row(vec![1.0, 2.0]).unwrap());
        let t = g.tanh(v).unwrap();
        assert!(g.backward(t).is_err());
    }

    #[test]
    fn nan_is_a_hard_error() {
        let mut g = Graph::new();
        let v = g.leaf(Tensor::row(vec![-1.0]).unwrap());
        assert!(g.log(v).is_err());
    }

    #[test]
    fn unreachable_nodes_have_no_adjoint() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(1.0).unwrap());
        let b = g.leaf(Tensor::scalar(2.0).unwrap());
        let r = g.exp(a).unwrap();
        let adj = g.backward(r).unwrap();
        assert!(adj.get(b).is_none());
        assert!((adj.get(a).unwrap().item() - 1f64.exp()).abs() < 1e-15);
    }
}
