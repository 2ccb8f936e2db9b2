//! Dense row-major tensors.

use crate::error::{Error, Result};

/// An n-dimensional array of `f64` in row-major order, with an optional
/// gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; len],
            grad: None,
        }
    }

    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::LengthMismatch {
                context: "tensor values vs shape",
                left: values.len(),
                right: expected,
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Leading dimension, by convention the batch size.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per batch row.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, b: usize) -> &[f64] {
        let n = self.row_len();
        &self.values[b * n..(b + 1) * n]
    }

    /// A single-row view copied out as a `[1, ...]` tensor.
    pub fn slice_rows(&self, range: std::ops::Range<usize>) -> Tensor {
        let n = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = range.len();
        Tensor {
            shape,
            values: self.values[range.start * n..range.end * n].to_vec(),
            grad: None,
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::LengthMismatch {
                context: "tensor grad vs values",
                left: grad.len(),
                right: self.values.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
            && self.grad.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_length_must_match_shape() {
        assert!(Tensor::from_values(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_values(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn grad_must_match_shape() {
        let mut t = Tensor::zeros(&[2, 2]);
        assert!(t.set_grad(vec![1.0; 4]).is_ok());
        assert!(t.set_grad(vec![1.0; 3]).is_err());
    }

    #[test]
    fn row_views() {
        let t = Tensor::from_values(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(t.row(1), &[4., 5., 6.]);
        let s = t.slice_rows(1..2);
        assert_eq!(s.shape(), &[1, 3]);
        assert_eq!(s.values(), &[4., 5., 6.]);
    }
}
