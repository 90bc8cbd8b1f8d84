//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The engine is a Wengert tape over flat row-major buffers: a forward
//! pass records primitive nodes, `Tape::backward` replays them in
//! reverse, and gradients accumulate additively into the persistent
//! [`Param`] handles that were registered as leaves.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use tape::{Tape, Var};

use std::cell::{Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::real::Real;
use crate::{Error, Result};

/// Dense n-dimensional array. Scalars have an empty shape.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                primitive: "tensor",
                detail: format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, rg: bool) {
        self.requires_grad = rg;
        if !rg {
            self.grad = None;
        }
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn scale_grad(&mut self, factor: T) {
        if let Some(g) = &mut self.grad {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// Adds `delta` into the gradient buffer. Tensors with
    /// `requires_grad == false` never accumulate.
    pub(crate) fn accumulate_grad(&mut self, delta: &[T]) {
        if !self.requires_grad {
            return;
        }
        let grad = self.grad.get_or_insert_with(|| vec![T::zero(); self.data.len()]);
        for (g, &d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }
}

/// Shared handle to a persistent tensor (a model or adapter parameter).
#[derive(Debug, Clone)]
pub struct Param<T>(Rc<RefCell<Tensor<T>>>);

impl<T: Real> Param<T> {
    pub fn new(tensor: Tensor<T>) -> Self {
        Param(Rc::new(RefCell::new(tensor)))
    }

    pub fn trainable(mut tensor: Tensor<T>) -> Self {
        tensor.set_requires_grad(true);
        Param::new(tensor)
    }

    pub fn borrow(&self) -> Ref<'_, Tensor<T>> {
        self.0.borrow()
    }

    pub fn borrow_mut(&self) -> RefMut<'_, Tensor<T>> {
        self.0.borrow_mut()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.borrow().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.borrow().numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.borrow().requires_grad()
    }

    pub fn set_requires_grad(&self, rg: bool) {
        self.borrow_mut().set_requires_grad(rg);
    }

    pub fn data_vec(&self) -> Vec<T> {
        self.borrow().data().to_vec()
    }

    pub fn set_data(&self, data: &[T]) {
        self.borrow_mut().data_mut().copy_from_slice(data);
    }

    /// Gradient as an owned vector, zeros when no gradient has flowed.
    pub fn grad_vec(&self) -> Vec<T> {
        let t = self.borrow();
        t.grad().map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); t.numel()])
    }

    pub fn zero_grad(&self) {
        self.borrow_mut().zero_grad();
    }

    /// True when the two handles point at the same tensor.
    pub fn same_as(&self, other: &Param<T>) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Deep copy with an independent backing tensor.
    pub fn deep_clone(&self) -> Param<T> {
        Param::new(self.borrow().clone())
    }
}
