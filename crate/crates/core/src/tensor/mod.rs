//! Minimal differentiable-operation substrate shared by both models:
//! dense, 3x3 convolution, pooling, layer norm, embedding lookup, softmax
//! and multi-head attention, each with a verified gradient, plus the Adam
//! update rule and a versioned checkpoint format.
//!
//! Training runs in f32; gradient-check tests instantiate the same ops in
//! f64.

mod adam;
mod checkpoint;
mod graph;
pub mod nn;

pub use adam::AdamState;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use graph::{Graph, NodeId};

use crate::error::Error;
use crate::Result;

pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32(self) -> f32 {
        self as f32
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/value count mismatch"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64_slice(shape: &[usize], vals: &[f64]) -> Self {
        Tensor::from_vec(shape, vals.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFiniteValue(what.to_string()))
        }
    }

    /// Rows of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().unwrap();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f32_tensor(&self) -> Tensor<f32> {
        self.map(|v| v.to_f32())
    }

    pub fn to_f64_tensor(&self) -> Tensor<f64> {
        self.map(|v| v.to_f64())
    }
}

/// L2-normalize each row of a 2-D tensor in place (plain-tensor variant
/// used outside the graph).
pub fn l2_normalize_rows<T: Scalar>(t: &mut Tensor<T>) {
    let cols = *t.shape.last().unwrap();
    for row in t.data.chunks_mut(cols) {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > T::zero() {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Numerically stable softmax of one logit row.
pub fn softmax_row<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = out.iter().copied().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}
