//! Reverse-mode automatic differentiation over a linear tape.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{forward_op, vjp, Op, Result, Tensor, TensorError};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

struct Node {
    value: Tensor,
    op: Option<Op>,
    inputs: Vec<usize>,
    requires_grad: bool,
    param: Option<usize>,
}

/// Records primitive applications so gradients can be replayed backwards.
///
/// Nodes that do not depend on any gradient-requiring leaf are kept for their
/// value only; backward never visits them.
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
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::DetachedGraph);
        }
        Ok(v.idx)
    }

    /// Records a leaf. Its gradient is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        let value = Tensor::new(t.shape().to_vec(), t.into_data()).expect("valid tensor");
        self.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            requires_grad,
            param: None,
        })
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Records parameter `idx` of `params` as a gradient-tracked leaf.
    pub fn param(&mut self, params: &ParamSet, idx: usize) -> Var {
        let src = &params.entries[idx].1;
        let value = Tensor::new(src.shape().to_vec(), src.data().to_vec()).expect("valid tensor");
        self.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            requires_grad: true,
            param: Some(idx),
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Applies a primitive to recorded values and records the result.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let idxs = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let value = {
            let refs: Vec<&Tensor> = idxs.iter().map(|&i| &self.nodes[i].value).collect();
            forward_op(&op, &refs)?
        };
        let requires_grad = idxs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push(Node {
            value,
            op: Some(op),
            inputs: if requires_grad { idxs } else { Vec::new() },
            requires_grad,
            param: None,
        }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Matmul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::ScalarMul(c), &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Flatten, &[a])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Op::Concat, parts)
    }
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::Slice { start, len }, &[a])
    }
    /// Splits along the leading axis into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(a, start, len)?);
            start += len;
        }
        Ok(out)
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[a])
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Softplus, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Outer, &[a, b])
    }
    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Neg, &[a])
    }
    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Recip, &[a])
    }
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::LogSoftmax, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[a])
    }
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        self.apply(Op::Conv2d { stride, pad }, &[x, w, b])
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::SliceLast { start, len }, &[a])
    }
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::ConcatLast, &[a, b])
    }
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::RowSum, &[a])
    }
    pub fn batch_outer(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::BatchOuter, &[a, b])
    }
    pub fn batch_matvec(&mut self, a: Var, v: Var) -> Result<Var> {
        self.apply(Op::BatchMatVec, &[a, v])
    }

    /// Back-propagates from a scalar `loss`, consuming the tape.
    ///
    /// Returns the gradient of every node; nodes unreachable from the loss or
    /// not requiring gradients get `None`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let li = self.check(loss)?;
        let shape = self.nodes[li].value.shape();
        if !shape.is_empty() && shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        if self.nodes[li].requires_grad {
            grads[li] = Some(vec![1.0]);
        }
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(op) = &node.op {
                let need: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
                let refs: Vec<&Tensor> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
                let local = vjp(op, &refs, &node.value, &g, &need);
                for (&j, lg) in node.inputs.iter().zip(local) {
                    if let Some(lg) = lg {
                        match grads[j].as_mut() {
                            Some(acc) => acc.iter_mut().zip(&lg).for_each(|(a, b)| *a += b),
                            None => grads[j] = Some(lg),
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }
        let params = self.nodes.iter().map(|n| n.param).collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            params,
        })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<Option<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros are reported as `None`.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    /// Accumulates gradients of recorded parameter leaves into `params`.
    /// Every parameter ends with a populated (possibly zero) grad buffer.
    pub fn accumulate_into(&self, params: &mut ParamSet) {
        for (_, t) in params.entries.iter_mut() {
            if t.grad.is_none() {
                t.zero_grad();
            }
        }
        for (node, p) in self.params.iter().enumerate() {
            if let (Some(p), Some(Some(g))) = (p, self.grads.get(node)) {
                let slot = params.entries[*p].1.grad.as_mut().expect("initialised above");
                slot.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter and returns its index. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor) -> usize {
        let name = name.into();
        assert!(self.index_of(&name).is_none(), "duplicate parameter name {name}");
        t.requires_grad = true;
        self.entries.push((name, t));
        self.entries.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        self.index_of(name)
            .map(|i| &self.entries[i].1)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.entries.iter_mut() {
            t.zero_grad();
        }
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_param_grads() {
        let mut params = ParamSet::new();
        let w = params.insert("w", Tensor::vector(vec![1.0, -1.0]));
        let mut tape = Tape::new();
        let _wv = tape.param(&params, w);
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        grads.accumulate_into(&mut params);
        assert_eq!(params.get(w).grad.as_deref(), Some(&[0.0, 0.0][..]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn foreign_var_is_detached() {
        let mut other = Tape::new();
        let v = other.leaf(Tensor::scalar(1.0));
        let mut tape = Tape::new();
        let _ = tape.leaf(Tensor::scalar(2.0));
        assert_eq!(tape.backward(v).err(), Some(TensorError::DetachedGraph));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum(x) + sum(x) → grad 2
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.5, -0.5, 3.0]).with_grad());
        let s1 = tape.sum(x).unwrap();
        let s2 = tape.sum(x).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 2.0, 2.0]);
    }
}
