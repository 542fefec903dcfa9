//! Dense f32 tensors and a reverse-mode autodiff graph.
//!
//! `Tensor` is the persistent value type (model parameters, datasets, frozen
//! buffers). `Graph` records one forward pass over borrowed leaves and
//! replays it in reverse to accumulate gradients. The graph also exposes a
//! custom-gradient hook, which is how straight-through estimators are built
//! on top of non-differentiable quantizers.

mod gemm;
mod graph;

pub use graph::{CustomSaved, Graph, Value};

use crate::error::{Error, Result};
use rand_distr::{Distribution, Normal};
use std::cell::RefCell;
use std::rc::Rc;

/// Dense row-major f32 tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

/// Shared handle used for trainable parameters: the graph holds one end to
/// sink gradients, the optimizer holds the other to apply updates.
pub type SharedTensor = Rc<RefCell<Tensor>>;

pub fn shared(t: Tensor) -> SharedTensor {
    Rc::new(RefCell::new(t))
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, v: f32) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![v; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Seeded Gaussian init.
    pub fn randn(shape: Vec<usize>, std: f32, rng: &mut impl rand::Rng) -> Self {
        let n = numel(&shape);
        let dist = Normal::new(0.0f32, std).expect("std must be finite and positive");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform init in [-a, a].
    pub fn rand_uniform(shape: Vec<usize>, a: f32, rng: &mut impl rand::Rng) -> Self {
        let n = numel(&shape);
        let data = (0..n).map(|_| rng.gen_range(-a..=a)).collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, v: bool) {
        self.requires_grad = v;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) {
        debug_assert_eq!(g.len(), self.data.len());
        let buf = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (dst, src) in buf.iter_mut().zip(g) {
            *dst += *src;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Element count implied by a shape. Empty shape denotes a scalar.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
