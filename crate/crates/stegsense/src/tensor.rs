//! Dense row-major f64 tensors. Gradients live on the tensor itself and are
//! filled in by the graph's backward pass.

use crate::error::{Error, Result};
use crate::rng::Stream;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub(crate) grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor_new",
                format!(
                    "shape {:?} wants {} elements, data has {}",
                    shape,
                    numel,
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Uniform draw in [lo, hi) per element, row-major fill order.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Stream) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn grad_buf(&mut self) -> &mut Vec<f64> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    /// Simultaneous read access to values and write access to the gradient.
    pub(crate) fn data_and_grad(&mut self) -> (&[f64], &mut Vec<f64>) {
        let n = self.data.len();
        let grad = self.grad.get_or_insert_with(|| vec![0.0; n]);
        (&self.data, grad)
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::dim(
                "item",
                format!("expected 1 element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.shape.len() != rank {
            return Err(Error::dim(
                op,
                format!("expected rank {rank}, got shape {:?}", self.shape),
            ));
        }
        Ok(())
    }

    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        self.expect_rank(op, 4)?;
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        self.expect_rank(op, 2)?;
        Ok((self.shape[0], self.shape[1]))
    }

    /// Hard error if any stored value is NaN or infinite.
    pub fn validate_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("{context} at flat index {i} ({v})"),
                });
            }
        }
        Ok(())
    }
}
