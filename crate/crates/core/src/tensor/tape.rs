use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::TensorError;

use super::ops::{self, OpKind};
use super::{NodeRef, Tensor};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Record {
    pub op: OpKind,
    pub inputs: Vec<u32>,
    pub shape: Vec<usize>,
    pub value: Arc<Vec<f64>>,
    pub needs_grad: bool,
}

/// Wengert tape: operations recorded in topological (insertion) order.
///
/// Single-threaded by construction. One backward pass consumes the tape;
/// a second backward is an error.
pub struct Tape {
    pub(crate) id: u64,
    pub(crate) records: Vec<Record>,
    consumed: bool,
}

/// Counters exposed for tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapeStats {
    pub records: usize,
    pub leaves: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: TAPE_IDS.fetch_add(1, Ordering::Relaxed), records: Vec::new(), consumed: false }
    }

    pub fn stats(&self) -> TapeStats {
        TapeStats {
            records: self.records.len(),
            leaves: self.records.iter().filter(|r| matches!(r.op, OpKind::Leaf)).count(),
        }
    }

    /// Registers a differentiable leaf (parameter or optimized variable).
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let node = self.push(OpKind::Leaf, vec![], t.shape().to_vec(), t.arc(), true);
        Tensor::from_arc(t.shape().to_vec(), t.arc(), Some(node))
    }

    /// Registers a non-differentiable constant.
    pub fn constant(&mut self, t: &Tensor) -> Tensor {
        let node = self.push(OpKind::Const, vec![], t.shape().to_vec(), t.arc(), false);
        Tensor::from_arc(t.shape().to_vec(), t.arc(), Some(node))
    }

    pub(crate) fn push(
        &mut self,
        op: OpKind,
        inputs: Vec<u32>,
        shape: Vec<usize>,
        value: Arc<Vec<f64>>,
        needs_grad: bool,
    ) -> NodeRef {
        let idx = self.records.len() as u32;
        self.records.push(Record { op, inputs, shape, value, needs_grad });
        NodeRef { tape: self.id, idx }
    }

    /// Resolves an input tensor to a node index, interning tape-less tensors
    /// as constants. Errors on tensors belonging to a different tape.
    pub(crate) fn intern(&mut self, t: &Tensor) -> Result<u32, TensorError> {
        match t.node() {
            Some(n) if n.tape == self.id => Ok(n.idx),
            Some(_) => Err(TensorError::TapeMismatch),
            None => {
                let node = self.push(OpKind::Const, vec![], t.shape().to_vec(), t.arc(), false);
                Ok(node.idx)
            }
        }
    }

    pub(crate) fn participates(&self, ts: &[&Tensor]) -> Result<bool, TensorError> {
        let mut any = false;
        for t in ts {
            match t.node() {
                Some(n) if n.tape == self.id => any = true,
                Some(_) => return Err(TensorError::TapeMismatch),
                None => {}
            }
        }
        Ok(any)
    }

    pub(crate) fn value_of(&self, idx: u32) -> &[f64] {
        &self.records[idx as usize].value
    }

    pub(crate) fn check_open(&self) -> Result<(), TensorError> {
        if self.consumed {
            Err(TensorError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    /// Reverse pass from a scalar loss. Touches every record exactly once,
    /// in reverse topological order. Leaves unreachable from the loss keep
    /// zero gradients (reported as zeros by [`Gradients::get_or_zeros`]).
    pub fn backward(&mut self, loss: &Tensor) -> Result<Gradients, TensorError> {
        let node = loss.node().ok_or(TensorError::NoTapeHandle)?;
        if node.tape != self.id {
            return Err(TensorError::TapeMismatch);
        }
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if loss.len() != 1 {
            return Err(TensorError::NotScalar(loss.shape().to_vec()));
        }
        self.consumed = true;

        let n = self.records.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[node.idx as usize] = Some(vec![1.0]);

        for idx in (0..=node.idx as usize).rev() {
            if !self.records[idx].needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            ops::vjp(self, idx, &dy, &mut grads)?;
            // Keep gradients only where callers can read them back.
            if matches!(self.records[idx].op, OpKind::Leaf) {
                grads[idx] = Some(dy);
            }
        }

        let shapes = self.records.iter().map(|r| r.shape.clone()).collect();
        Ok(Gradients { tape: self.id, shapes, grads })
    }
}

/// Gradient buffers keyed by tape node, produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a tensor registered on the originating tape, if any
    /// gradient reached it.
    pub fn get(&self, t: &Tensor) -> Option<Tensor> {
        let node = t.node()?;
        if node.tape != self.tape {
            return None;
        }
        let g = self.grads[node.idx as usize].as_ref()?;
        Some(Tensor::from_arc(self.shapes[node.idx as usize].clone(), Arc::new(g.clone()), None))
    }

    /// Like [`Gradients::get`] but reporting zeros for unreachable leaves.
    pub fn get_or_zeros(&self, t: &Tensor) -> Tensor {
        self.get(t).unwrap_or_else(|| Tensor::zeros(t.shape()))
    }
}

pub(crate) fn accumulate(grads: &mut [Option<Vec<f64>>], idx: u32, contrib: &[f64]) {
    let slot = &mut grads[idx as usize];
    match slot {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += ci;
            }
        }
        None => *slot = Some(contrib.to_vec()),
    }
}

/// Accumulate without the temporary buffer when the slot is empty.
pub(crate) fn grad_slot<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    idx: u32,
    len: usize,
) -> &'a mut [f64] {
    let slot = &mut grads[idx as usize];
    if slot.is_none() {
        *slot = Some(vec![0.0; len]);
    }
    slot.as_mut().unwrap()
}
