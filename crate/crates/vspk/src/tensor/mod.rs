//! Dense n-dimensional tensors and the reverse-mode differentiation tape.
//!
//! Everything numeric in this crate is carried by [`Tensor`]: raw-waveform
//! volumes, convolution kernels, embeddings, logits, losses. Values are
//! 64-bit floats in row-major order. Differentiation happens through
//! [`Tape`], which records primitive operations during a forward pass and
//! replays them in reverse to accumulate gradients.

mod gradcheck;
mod tape;

pub use gradcheck::grad_check;
pub use tape::{Mode, Padding, RunningStats, Tape, TensorId};

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64` values with an optional gradient slot.
///
/// Invariants: `shape` product equals `data.len()`, and `grad`, when present,
/// has the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} wants {expect} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    /// Constant-filled tensor.
    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            grad: None,
        }
    }

    /// Single-element tensor holding `value`.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// Builds a tensor by calling `f` with each row-major flat index.
    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(f).collect(),
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Attaches a gradient buffer; must match the data length.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "gradient length {} for tensor of {} values",
                grad.len(),
                self.data.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of the flattened data.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Tensor::new(vec![2, 0], vec![]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn grad_slot_checks_length() {
        let mut t = Tensor::zeros(vec![4]);
        assert!(t.set_grad(vec![1.0; 4]).is_ok());
        assert!(t.set_grad(vec![1.0; 3]).is_err());
        assert_eq!(t.take_grad(), Some(vec![1.0; 4]));
        assert!(t.grad().is_none());
    }

    #[test]
    fn item_requires_single_element() {
        assert_eq!(Tensor::scalar(2.5).item().unwrap(), 2.5);
        assert!(Tensor::zeros(vec![2]).item().is_err());
    }
}
