//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The design is a flat tape rebuilt every forward pass: each differentiable
//! operation on a [`Tape`] produces a fresh [`Tensor`] and records a backward
//! rule holding handles to its inputs and output. [`Tape::backward`] replays
//! the records once, in reverse order, accumulating gradients into the
//! `grad` slot of every tensor that requires them.
//!
//! Tensors are immutable after construction; gradient accumulation is the
//! only interior mutation. Element type is generic over [`Scalar`] so the
//! same graph code runs at `f32` for training and `f64` for
//! finite-difference checks.

mod check;
mod conv;
mod ops;

pub use check::{check_gradients, numeric_gradient, GradCheckReport};

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Element type of tensors: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

thread_local! {
    static NEXT_TENSOR_ID: Cell<u64> = const { Cell::new(1) };
}

fn next_id() -> u64 {
    NEXT_TENSOR_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

struct TensorInner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
}

/// A dense n-dimensional array. Cloning is cheap (shared handle).
pub struct Tensor<T: Scalar> {
    inner: Rc<TensorInner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, requires_grad={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

impl<T: Scalar> Tensor<T> {
    /// Leaf tensor that does not track gradients.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::new_impl(shape, data, false)
    }

    /// Leaf tensor that accumulates gradients (a trainable parameter).
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        Self::new_impl(shape, data, true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new_impl(shape, vec![T::zero(); n], false).expect("zeros: consistent by construction")
    }

    pub fn scalar(v: T) -> Self {
        Self::new_impl(&[1], vec![v], false).expect("scalar: consistent by construction")
    }

    fn new_impl(shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dimension(format!("zero extent in shape {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                id: next_id(),
                shape: shape.to_vec(),
                data,
                requires_grad,
                grad: RefCell::new(None),
            }),
        })
    }

    pub(crate) fn result(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(TensorInner {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "item() needs a scalar tensor, shape is {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data[0])
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Runs `f` on the current output gradient; no-op when none was set
    /// (the tensor did not contribute to the loss).
    pub(crate) fn with_grad<F: FnOnce(&[T])>(&self, f: F) {
        let slot = self.inner.grad.borrow();
        if let Some(g) = slot.as_deref() {
            f(g);
        }
    }

    /// Same values, detached from gradient tracking.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::result(self.inner.shape.clone(), self.inner.data.clone(), false)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.iter().map(|v| v.as_f64()).collect()
    }
}

/// One recorded operation: input/output ids plus the backward rule.
pub(crate) struct Record {
    pub inputs: Vec<u64>,
    pub output: u64,
    backward: Box<dyn Fn()>,
}

/// Flat operation tape. Build one per forward pass and drop it afterwards.
pub struct Tape<T: Scalar> {
    records: RefCell<Vec<Record>>,
    enabled: bool,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Tape that records backward rules.
    pub fn new() -> Self {
        Tape {
            records: RefCell::new(Vec::new()),
            enabled: true,
            _marker: std::marker::PhantomData,
        }
    }

    /// Tape for inference: operations run but nothing is recorded.
    pub fn no_grad() -> Self {
        Tape {
            records: RefCell::new(Vec::new()),
            enabled: false,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.enabled
    }

    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.borrow().is_empty()
    }

    pub(crate) fn grad_needed(&self, inputs: &[&Tensor<T>]) -> bool {
        self.enabled && inputs.iter().any(|t| t.requires_grad())
    }

    pub(crate) fn record(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, backward: Box<dyn Fn()>) {
        self.records.borrow_mut().push(Record {
            inputs: inputs.iter().map(|t| t.id()).collect(),
            output: output.id(),
            backward,
        });
    }

    /// Reverse pass from a scalar loss. Visits every record exactly once, in
    /// reverse recording order, accumulating into `grad` slots.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, shape is {:?}",
                loss.shape()
            )));
        }
        loss.accumulate_grad(&[T::one()]);
        let records = self.records.borrow();
        for rec in records.iter().rev() {
            (rec.backward)();
        }
        Ok(())
    }

    /// (input ids, output id) per record, in recording order. Test support.
    pub fn topology(&self) -> Vec<(Vec<u64>, u64)> {
        self.records
            .borrow()
            .iter()
            .map(|r| (r.inputs.clone(), r.output))
            .collect()
    }
}
