//! Dense double-precision tensors with shape metadata and gradient storage.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::Error;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

pub(crate) struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
}

/// A dense tensor handle. Clones share storage; gradients accumulate
/// additively until [`Tensor::zero_grad`] is called.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl Tensor {
    /// Builds a tensor from row-major data. Rejects NaN/Inf and length
    /// mismatches at the tape boundary.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, Error> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("from_vec"));
        }
        Ok(Self::raw(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self::raw(shape.to_vec(), vec![0.0; numel], false)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Self::raw(shape.to_vec(), vec![value; numel], false)
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Self::raw(Vec::new(), vec![value], false)
    }

    /// A learnable leaf: `requires_grad` is set.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self, Error> {
        let t = Self::from_vec(shape, data)?;
        t.inner.requires_grad.set(true);
        Ok(t)
    }

    /// Uniform init in [-bound, bound], the usual fan-in scheme for layers.
    pub fn uniform_param<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self::raw(shape.to_vec(), data, true)
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        Self {
            inner: Rc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
            }),
        }
    }

    /// A fresh constant tensor with this tensor's current values and no
    /// gradient lineage.
    pub fn detached(&self) -> Self {
        Self::raw(self.shape().to_vec(), self.to_vec(), false)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Value of a one-element tensor.
    pub fn value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.inner.data.borrow()[0]
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Overwrites the stored values in place (optimizer updates, loads).
    pub fn set_data(&self, values: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "set_data length mismatch");
        d.copy_from_slice(values);
    }

    /// In-place update of the stored values.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.requires_grad.set(flag);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub(crate) fn grad_ref(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.inner.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    pub(crate) fn accumulate_grad_with(&self, len: usize, f: impl FnOnce(&mut [f64])) {
        let mut slot = self.inner.grad.borrow_mut();
        let acc = slot.get_or_insert_with(|| vec![0.0; len]);
        f(acc);
    }

    /// Pointer identity: two handles to the same storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}
