//! Dense f32 tensors and a tape-based reverse-mode differentiation engine.
//!
//! Every forward pass records primitive applications onto a [`Tape`]; calling
//! [`Tape::backward`] replays the tape in exact reverse execution order and
//! accumulates vector-Jacobian products into per-tensor gradient buffers.
//! Scalar reductions (losses, means) accumulate in f64 to limit drift; all
//! stored values are f32.

mod ops;

pub use ops::{KlDirection, PrimitiveCtx};

use crate::error::{Error, Result};

/// Dense n-dimensional value in row-major order, with an optional gradient
/// slot of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Invalid(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor-new",
                detail: format!("shape {shape:?} wants {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], grad: None }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor { shape: vec![1], data: vec![v], grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated zeroed on first use.
    pub fn grad_mut(&mut self) -> &mut [f32] {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_deref_mut().unwrap()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Handle to a tensor stored on a [`Tape`].
pub type TensorId = usize;

pub(crate) struct TapeEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered record of executed primitives. Node inputs always precede the node
/// itself; backward traversal walks the list in exact reverse order.
pub struct Tape {
    pub(crate) entries: Vec<TapeEntry>,
    pub(crate) nodes: Vec<ops::Node>,
    pub(crate) grads: Vec<Option<Vec<f32>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { entries: Vec::new(), nodes: Vec::new(), grads: Vec::new() }
    }

    /// Registers an off-tape tensor (parameter, input batch, gate vector) as a
    /// leaf. Leaves participate in backward like any other tensor.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push_entry(t.shape.clone(), t.data.clone())
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                detail: format!("shape {shape:?} wants {numel} values, got {}", data.len()),
            });
        }
        Ok(self.push_entry(shape, data))
    }

    pub(crate) fn push_entry(&mut self, shape: Vec<usize>, data: Vec<f32>) -> TensorId {
        self.entries.push(TapeEntry { shape, data });
        self.grads.push(None);
        self.entries.len() - 1
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.entries[id].shape
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.entries[id].data
    }

    /// Copies a tape tensor out into an owned [`Tensor`].
    pub fn tensor(&self, id: TensorId) -> Tensor {
        Tensor {
            shape: self.entries[id].shape.clone(),
            data: self.entries[id].data.clone(),
            grad: None,
        }
    }

    /// Scalar value of a one-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> f32 {
        debug_assert_eq!(self.entries[id].data.len(), 1);
        self.entries[id].data[0]
    }

    /// Gradient of `id` from the last [`Tape::backward`] call. Tensors the
    /// loss does not reach report zeros.
    pub fn grad_of(&self, id: TensorId) -> Vec<f32> {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => vec![0.0; self.entries[id].data.len()],
        }
    }

    /// Fills gradient slots for every tensor reachable from `loss`, which
    /// must be a scalar recorded on this tape.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if loss >= self.entries.len() {
            return Err(Error::Invalid(format!("loss tensor {loss} is not on the tape")));
        }
        if self.entries[loss].data.len() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.entries[loss].shape
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss] = Some(vec![1.0]);
        let nodes = std::mem::take(&mut self.nodes);
        for node in nodes.iter().rev() {
            ops::backward_node(self, node);
        }
        self.nodes = nodes;
        Ok(())
    }

    pub(crate) fn accumulate(&mut self, id: TensorId, delta: &[f32]) {
        let slot = &mut self.grads[id];
        match slot {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += *b;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    pub(crate) fn take_grad(&self, id: TensorId) -> Option<Vec<f32>> {
        self.grads[id].clone()
    }
}

/// Row-wise temperature softmax over `[batch, classes]` logits, computed in a
/// numerically stable form (row max subtracted before exponentiation).
pub fn softmax_temperature(logits: &Tensor, tau: f32) -> Result<Tensor> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    if logits.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "softmax_temperature",
            detail: format!("expected [batch, classes], got {:?}", logits.shape()),
        });
    }
    let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        let row = &logits.data()[r * cols..(r + 1) * cols];
        softmax_row(row, tau, &mut out[r * cols..(r + 1) * cols]);
    }
    Tensor::new(vec![rows, cols], out)
}

/// Single-row stable temperature softmax into `out`.
pub(crate) fn softmax_row(row: &[f32], tau: f32, out: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b / tau));
    let mut sum = 0.0f64;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = ((v / tau) - max).exp();
        *o = e;
        sum += e as f64;
    }
    for o in out.iter_mut() {
        *o = (*o as f64 / sum) as f32;
    }
}

pub mod gradcheck;

#[cfg(test)]
mod tests;
