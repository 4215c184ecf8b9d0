//! Dense f64 tensors.
//!
//! Values are immutable after construction: every operation allocates its
//! result. Storage is a flat row-major buffer; rank 0 (shape `[]`) holds a
//! single scalar. All constructors and operations reject non-finite values so
//! NaN/Inf can never propagate silently.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    /// Filled by `Tape::backward` for leaves that require grad.
    grad: Option<Vec<f64>>,
}

pub fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, validating element count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = element_count(&shape);
        if expected == 0 {
            return Err(Error::BadShape {
                op: "Tensor::new",
                expected: "a shape with at least one element",
                got: shape,
            });
        }
        if data.len() != expected {
            return Err(Error::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "Tensor::new",
                context: Some(format!("input contains {bad}")),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![], vec![value])
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = element_count(&shape);
        Self::new(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        let n = element_count(&shape);
        Self::new(shape, vec![value; n])
    }

    /// Standard-normal samples drawn from `rng` in flat row-major order.
    pub fn randn<R: Rng + ?Sized>(shape: Vec<usize>, rng: &mut R) -> Result<Self> {
        let n = element_count(&shape);
        let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Number of stored elements (1 for rank 0).
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects zero-element shapes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Marks this tensor as a differentiable leaf for tape use.
    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Gradient of the last scalar root with respect to this tensor, if computed.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        self.grad = grad;
    }

    /// Replaces the stored values in place, keeping the shape. Length and
    /// finiteness are validated; any attached gradient is cleared. Only
    /// detached master copies may be mutated, never tensors recorded on a
    /// live tape (the tape clones its inputs, so this cannot alias a node).
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::DataLength {
                shape: self.shape.clone(),
                expected: self.data.len(),
                got: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "Tensor::set_data",
                context: Some(format!("value {bad}")),
            });
        }
        self.data = data;
        self.grad = None;
        Ok(())
    }

    /// The single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::BadShape {
                op: "Tensor::item",
                expected: "a single-element tensor",
                got: self.shape.clone(),
            })
        }
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        if element_count(&shape) != self.data.len() {
            return Err(Error::DataLength {
                shape,
                expected: self.data.len(),
                got: element_count(&self.shape),
            });
        }
        Self::new(shape, self.data.clone())
    }

    /// Stacks equally shaped tensors along a new leading batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items.first().ok_or(Error::BadShape {
            op: "Tensor::stack",
            expected: "at least one tensor",
            got: vec![],
        })?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            if t.shape() != first.shape() {
                return Err(Error::ShapeMismatch {
                    op: "Tensor::stack",
                    left: first.shape.clone(),
                    right: t.shape.clone(),
                });
            }
            data.extend_from_slice(t.data());
        }
        Self::new(shape, data)
    }

    /// Extracts row `i` of the leading axis, dropping that axis.
    pub fn index_axis0(&self, i: usize) -> Result<Self> {
        if self.rank() == 0 || i >= self.shape[0] {
            return Err(Error::AxisOutOfRange {
                axis: i,
                shape: self.shape.clone(),
            });
        }
        let stride = self.len() / self.shape[0];
        let sub = self.data[i * stride..(i + 1) * stride].to_vec();
        Self::new(self.shape[1..].to_vec(), sub)
    }

    /// `self + scale * other`, shapes must match exactly. Pure helper for
    /// sampler state updates that never participate in a tape.
    pub fn add_scaled(&self, other: &Tensor, scale: f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "Tensor::add_scaled",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + scale * b)
            .collect();
        Self::new(self.shape.clone(), data)
    }

    /// `a * self + b`, elementwise. Pure helper (see `add_scaled`).
    pub fn affine(&self, a: f64, b: f64) -> Result<Self> {
        let data = self.data.iter().map(|v| a * v + b).collect();
        Self::new(self.shape.clone(), data)
    }

    /// Euclidean norm of the flattened data.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn new_validates_length() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::DataLength { expected: 6, got: 5, .. }));
    }

    #[test]
    fn new_rejects_nan() {
        let err = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn new_rejects_zero_element_shape() {
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn scalar_is_rank_zero() {
        let s = Tensor::scalar(2.5).unwrap();
        assert_eq!(s.rank(), 0);
        assert_eq!(s.len(), 1);
        assert_eq!(s.item().unwrap(), 2.5);
    }

    #[test]
    fn stack_and_index_roundtrip() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.index_axis0(0).unwrap(), a);
        assert_eq!(s.index_axis0(1).unwrap(), b);
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let mut r1 = ChaCha12Rng::seed_from_u64(7);
        let mut r2 = ChaCha12Rng::seed_from_u64(7);
        let a = Tensor::randn(vec![16], &mut r1).unwrap();
        let b = Tensor::randn(vec![16], &mut r2).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let r = t.reshape(vec![3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(vec![4]).is_err());
    }
}
