//! Dense row-major `f64` tensors and a define-by-run reverse-mode graph.
//!
//! [`Tensor`] is a plain value. [`Graph`] records operations on tensors and
//! computes gradients with [`Graph::backward`]. The stateless kernels in
//! [`ops`] are shared by both paths, so graph-free inference produces the
//! same bits as a tracked forward pass.

pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod ops;

pub use graph::{Graph, OpKind, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: "shape must have at least one dimension".into(),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(!shape.is_empty(), "tensor shape must have at least one dimension");
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n], grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value], grad: None }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self { shape: vec![n], data, grad: None }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Leading (batch) dimension.
    pub fn batch_size(&self) -> usize {
        self.shape[0]
    }

    /// Number of values per example: product of all but the leading dimension.
    pub fn example_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.data.len(), "gradient length must match data length");
        }
        self.grad = grad;
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.shape, shape),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone(), grad: None })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect(), grad: None }
    }

    /// Copy of example `i` along the leading dimension, keeping a leading axis of 1.
    pub fn example(&self, i: usize) -> Tensor {
        let len = self.example_len();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor { shape, data: self.data[i * len..(i + 1) * len].to_vec(), grad: None }
    }

    pub fn example_slice(&self, i: usize) -> &[f64] {
        let len = self.example_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn example_slice_mut(&mut self, i: usize) -> &mut [f64] {
        let len = self.example_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    /// Gathers the given examples (by leading index) into a new batch.
    pub fn select(&self, indices: &[usize]) -> Tensor {
        let len = self.example_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.data[i * len..(i + 1) * len]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data, grad: None }
    }

    /// Stacks equally shaped examples along a new (or existing leading) axis.
    pub fn stack(examples: &[Tensor]) -> Result<Tensor> {
        let first = examples.first().ok_or(Error::EmptyBatch)?;
        let inner: Vec<usize> =
            if first.shape[0] == 1 && first.ndim() > 1 { first.shape[1..].to_vec() } else { first.shape.clone() };
        let len: usize = inner.iter().product();
        let mut data = Vec::with_capacity(len * examples.len());
        for e in examples {
            if e.len() != len {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    detail: format!("{:?} vs {:?}", e.shape, first.shape),
                });
            }
            data.extend_from_slice(&e.data);
        }
        let mut shape = vec![examples.len()];
        shape.extend(inner);
        Tensor::new(shape, data)
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, grad: None }
    }
}
