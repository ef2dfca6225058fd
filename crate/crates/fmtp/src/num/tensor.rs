//! Dense row-major tensors.
//!
//! A [`Tensor`] is a plain value type: shape, flat data, and an optional
//! gradient buffer of the same shape. Differentiable computation happens on a
//! [`crate::num::tape::Tape`]; tensors here are the at-rest representation for
//! parameters, inputs, and checkpoints.

use num_traits::Float;

/// Scalar element type for all numeric code. `f32` is the training/inference
/// precision; `f64` backs the finite-difference gradient suites.
pub trait Scalar: Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Contract violations raised by tensor and tape operations.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NumError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("masked_softmax: row {row} has no allowed entries")]
    FullyBlockedRow { row: usize },
    #[error("embedding lookup id {id} out of range (table has {len} rows)")]
    IdOutOfRange { id: usize, len: usize },
    #[error("cross_entropy target {target} out of range (vocabulary {vocab})")]
    TargetOutOfRange { target: usize, vocab: usize },
    #[error("cross_entropy weights must be nonnegative with a positive sum")]
    BadWeights,
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("adam_step: parameter {index} has no gradient")]
    MissingGrad { index: usize },
}

/// Shape-tagged array of real values with an optional same-shape gradient
/// accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from shape and row-major data. Panics if the element
    /// count does not match the shape product; construction sites always know
    /// both, so this is a programming error rather than an input error.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![T::zero(); n])
    }

    pub fn scalar(value: T) -> Self {
        Tensor::new(vec![1], vec![value])
    }

    /// Marks this tensor as a trainable leaf; allocates the grad buffer.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![T::zero(); self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    /// Adds `delta` into the gradient buffer (no-op for non-leaf tensors).
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        if let Some(g) = self.grad.as_deref_mut() {
            debug_assert_eq!(g.len(), delta.len());
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi = *gi + *di;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_deref_mut() {
            g.fill(T::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise conversion to another scalar type (f32 checkpoints are
    /// loaded into f64 models this way in the gradient suites).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect();
        let mut out = Tensor::new(self.shape.clone(), data);
        if self.requires_grad {
            out = out.with_grad();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_buffer_matches_shape() {
        let t = Tensor::<f32>::zeros(vec![2, 3]).with_grad();
        assert_eq!(t.grad().unwrap().len(), 6);
        assert!(t.requires_grad());
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn shape_product_must_match_data() {
        let _ = Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0]);
    }

    #[test]
    fn accumulate_and_zero() {
        let mut t = Tensor::new(vec![2], vec![0.0f64, 0.0]).with_grad();
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(t.grad().unwrap(), &[1.5, 2.5]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }
}
