use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::primitive::Primitive;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to an array recorded on a [`Tape`].
///
/// Handles are cheap to copy. Values are immutable once recorded; every
/// operation appends a new node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Option<Primitive>,
    inputs: Vec<usize>,
    tracked: bool,
}

/// Append-only record of primitive applications.
///
/// Nodes are stored in creation order, so every node's inputs precede it and
/// a single reverse sweep visits each node once.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, None, Vec::new(), true)
    }

    /// Records a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, None, Vec::new(), false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        self.check(var).expect("variable from another tape");
        &self.nodes[var.index].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    pub fn is_tracked(&self, var: Var) -> bool {
        self.check(var).is_ok() && self.nodes[var.index].tracked
    }

    /// Applies `op` to `inputs`, recording a node. The result is tracked when
    /// any input is.
    pub fn apply(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let value = {
            let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.index].value).collect();
            op.forward(&values)?
        };
        let tracked = inputs.iter().any(|v| self.nodes[v.index].tracked);
        let op = tracked.then_some(op);
        Ok(self.push(value, op, inputs.iter().map(|v| v.index).collect(), tracked))
    }

    /// Reverse sweep from a scalar `output`, seeded with 1.
    ///
    /// Returns a gradient for every tracked leaf (zeros where the output does
    /// not depend on it). A tape supports one backward pass.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        self.check(output)?;
        if self.consumed {
            return Err(AutodiffError::BackwardTwice);
        }
        let out_shape = self.nodes[output.index].value.shape();
        if !out_shape.is_empty() {
            return Err(AutodiffError::NonScalarOutput(out_shape.to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; output.index + 1];
        if self.nodes[output.index].tracked {
            grads[output.index] = Some(Tensor::scalar(1.0));
        }
        for idx in (0..=output.index).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            let Some(grad) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].tracked).collect();
            let input_grads = op.backward(&inputs, &node.value, &grad, &needs);
            for (&i, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            // Leaves keep their gradient; intermediate buffers are dropped above.
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.tracked && n.op.is_none())
            .map(|(i, n)| {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(n.value.shape()));
                (i, g)
            })
            .collect();
        Ok(Gradients { tape: self.id, leaves })
    }

    fn push(&mut self, value: Tensor, op: Option<Primitive>, inputs: Vec<usize>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            tracked,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(AutodiffError::ForeignVar);
        }
        Ok(())
    }
}

/// Convenience wrappers over [`Tape::apply`].
impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Div, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Transpose, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Primitive::Shift(c), &[a])
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Sum { axis }, &[a])
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, vec![n])?;
        self.sum(flat, 0)
    }

    pub fn broadcast(&mut self, a: Var, axis: usize, size: usize) -> Result<Var> {
        self.apply(Primitive::Broadcast { axis, size }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, parts)
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::Narrow { axis, start, len }, &[a])
    }

    /// Splits `a` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(a).to_vec();
        let dim = shape.get(axis).copied().ok_or_else(|| AutodiffError::InvalidArgument {
            op: "split",
            reason: format!("axis {axis} out of range for shape {shape:?}"),
        })?;
        if sizes.iter().sum::<usize>() != dim {
            return Err(AutodiffError::InvalidArgument {
                op: "split",
                reason: format!("sizes {sizes:?} do not add up to axis length {dim}"),
            });
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.narrow(a, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Reshape { shape }, &[a])
    }

    pub fn gather(&mut self, a: Var, rows: Arc<[usize]>) -> Result<Var> {
        self.apply(Primitive::Gather { rows }, &[a])
    }

    pub fn scatter_add(&mut self, a: Var, rows: Arc<[usize]>, size: usize) -> Result<Var> {
        self.apply(Primitive::ScatterAdd { rows, size }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Silu, &[a])
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sin, &[a])
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Cos, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sqrt, &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Abs, &[a])
    }

    pub fn safe_norm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        self.apply(Primitive::SafeNorm { axis, eps }, &[a])
    }

    pub fn cross(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Cross { axis }, &[a, b])
    }
}

/// Gradients of one backward pass, keyed by leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    leaves: Vec<(usize, Tensor)>,
}

impl Gradients {
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        if leaf.tape != self.tape {
            return None;
        }
        self.leaves
            .binary_search_by_key(&leaf.index, |(i, _)| *i)
            .ok()
            .map(|k| &self.leaves[k].1)
    }

    /// Removes and returns the gradient of `leaf`.
    pub fn take(&mut self, leaf: Var) -> Option<Tensor> {
        if leaf.tape != self.tape {
            return None;
        }
        let k = self.leaves.binary_search_by_key(&leaf.index, |(i, _)| *i).ok()?;
        Some(std::mem::replace(&mut self.leaves[k].1, Tensor::scalar(0.0)))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec1(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec())
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec1(&[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let out = tape.sum(sq, 0).unwrap();
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), Some(0.25));
    }

    #[test]
    fn norm_gradient_is_unit_vector() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec1(&[3.0, 4.0]));
        let n = tape.safe_norm(x, 0, 0.0).unwrap();
        assert_eq!(tape.value(n).item(), Some(5.0));
        let grads = tape.backward(n).unwrap();
        let g = grads.get(x).unwrap().data();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn safe_norm_gradient_vanishes_at_origin() {
        for eps in [1e-8, 0.0] {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::zeros(&[3]));
            let n = tape.safe_norm(x, 0, eps).unwrap();
            assert_eq!(tape.value(n).item(), Some(eps));
            let grads = tape.backward(n).unwrap();
            assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn three_node_chain_matches_hand_derivative() {
        // f(x) = sin(x) * x^2 at x = 0.7, f' = cos(x) x^2 + 2x sin(x)
        let x0: f64 = 0.7;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(x0));
        let s = tape.sin(x).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let f = tape.mul(s, sq).unwrap();
        let grads = tape.backward(f).unwrap();
        let expected = x0.cos() * x0 * x0 + 2.0 * x0 * x0.sin();
        assert!((grads.get(x).unwrap().item().unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec1(&[1.0, 2.0]));
        let y = tape.sigmoid(x).unwrap();
        assert!(matches!(tape.backward(y), Err(AutodiffError::NonScalarOutput(s)) if s == vec![2]));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = tape.sin(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.backward(y).unwrap_err(), AutodiffError::BackwardTwice);
    }

    #[test]
    fn constants_are_not_tracked() {
        let mut tape = Tape::new();
        let c = tape.constant(vec1(&[1.0, 2.0]));
        let x = tape.leaf(vec1(&[3.0, 4.0]));
        let cc = tape.mul(c, c).unwrap();
        assert!(!tape.is_tracked(cc));
        let y = tape.mul(cc, x).unwrap();
        assert!(tape.is_tracked(y));
        let out = tape.sum(y, 0).unwrap();
        let grads = tape.backward(out).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 4.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec1(&[1.0, 2.0]));
        let unused = tape.leaf(vec1(&[5.0]));
        let out = tape.sum(x, 0).unwrap();
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0]);
    }

    #[test]
    fn foreign_variables_are_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(Tensor::scalar(1.0));
        assert_eq!(b.sin(x).unwrap_err(), AutodiffError::ForeignVar);
    }

    #[test]
    fn split_sizes_must_cover_axis() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 5]));
        assert!(tape.split(x, 1, &[2, 2]).is_err());
        let parts = tape.split(x, 1, &[2, 3]).unwrap();
        assert_eq!(tape.shape(parts[1]), &[2, 3]);
    }
}
