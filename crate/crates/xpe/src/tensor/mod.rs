//! Minimal deterministic tensor algebra with reverse-mode automatic
//! differentiation.
//!
//! Values are 32-bit floats stored row-major; every reduction (matmul inner
//! products, softmax row sums, normalization statistics) accumulates in
//! 64-bit intermediates. Execution is single-threaded and the op order is
//! fixed, so a given seed and config reproduce results bit-for-bit.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::finite_diff_check;
pub use tape::{Tape, ValueId};

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Shaped 32-bit float array with an optional gradient buffer.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    pub grad: Option<Vec<f32>>,
    pub trainable: bool,
    pub name: String,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || values.len() != numel {
            return Err(Error::Dimension { op: "tensor", lhs: shape, rhs: vec![values.len()] });
        }
        Ok(Self { shape, values, grad: None, trainable: false, name: name.into() })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, values: vec![0.0; numel], grad: None, trainable: false, name: name.into() }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Self { shape, values: vec![value; numel], grad: None, trainable: false, name: name.into() }
    }

    /// Gaussian init, N(0, std^2).
    pub fn randn(name: impl Into<String>, shape: Vec<usize>, std: f32, rng: &mut SeededRng) -> Self {
        let numel = shape.iter().product();
        let values = (0..numel).map(|_| rng.normal_f32(0.0, std)).collect();
        Self { shape, values, grad: None, trainable: false, name: name.into() }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn trainable(mut self) -> Self {
        self.trainable = true;
        self
    }
}

/// Shared handle to a parameter tensor. The tape binds leaves through this
/// handle so `backward` can write gradients into the owning tensor, and
/// optimizer groups can hold the same parameter the model forward uses.
#[derive(Clone)]
pub struct Param(Rc<RefCell<Tensor>>);

impl Param {
    pub fn new(tensor: Tensor) -> Self {
        Self(Rc::new(RefCell::new(tensor)))
    }

    pub fn borrow(&self) -> Ref<'_, Tensor> {
        self.0.borrow()
    }

    pub fn borrow_mut(&self) -> RefMut<'_, Tensor> {
        self.0.borrow_mut()
    }

    pub fn name(&self) -> String {
        self.0.borrow().name.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().numel()
    }

    pub fn is_trainable(&self) -> bool {
        self.0.borrow().trainable
    }

    pub fn set_trainable(&self, trainable: bool) {
        self.0.borrow_mut().trainable = trainable;
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Stable identity of the underlying allocation; used to deduplicate
    /// leaves on a tape and to check optimizer-group partitions.
    pub fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let t = self.0.borrow();
        write!(f, "Param({:?} {:?} trainable={})", t.name, t.shape, t.trainable)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_length_mismatch() {
        let err = Tensor::new("x", vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn param_identity_is_shared() {
        let p = Param::new(Tensor::zeros("w", vec![2]));
        let q = p.clone();
        assert_eq!(p.id(), q.id());
        q.borrow_mut().values[0] = 5.0;
        assert_eq!(p.borrow().values[0], 5.0);
    }
}
