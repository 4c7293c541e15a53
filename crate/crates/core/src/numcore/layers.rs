use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// A trainable tensor: value, accumulated gradient and momentum buffer,
/// always of the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub value: Matrix,
    #[serde(skip)]
    grad: Option<Matrix>,
    #[serde(skip)]
    momentum: Option<Matrix>,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        ParamTensor { name: name.into(), value, grad: None, momentum: None }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(name, Matrix::zeros(rows, cols))
    }

    pub fn gaussian<R: Rng + ?Sized>(name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Self::new(name, Matrix::from_vec(rows, cols, data).expect("length matches shape"))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn grad(&self) -> Matrix {
        self.grad.clone().unwrap_or_else(|| Matrix::zeros(self.value.rows(), self.value.cols()))
    }

    pub fn grad_mut(&mut self) -> &mut Matrix {
        let (r, c) = self.value.shape();
        self.grad.get_or_insert_with(|| Matrix::zeros(r, c))
    }

    pub fn accumulate_grad(&mut self, g: &Matrix) -> Result<()> {
        self.grad_mut().add_assign(g)
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn momentum(&self) -> Matrix {
        self.momentum.clone().unwrap_or_else(|| Matrix::zeros(self.value.rows(), self.value.cols()))
    }

    pub(crate) fn momentum_mut(&mut self) -> &mut Matrix {
        let (r, c) = self.value.shape();
        self.momentum.get_or_insert_with(|| Matrix::zeros(r, c))
    }
}

/// Affine map `y = x·W + b` over row-stacked samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamTensor,
    pub bias: ParamTensor,
    cache: Option<Matrix>,
}

impl Linear {
    pub fn new(weight: ParamTensor, bias: ParamTensor) -> Result<Self> {
        if bias.value.rows() != 1 || bias.value.cols() != weight.value.cols() {
            return Err(Error::ShapeMismatch {
                op: "Linear::new",
                left: weight.value.shape_str(),
                right: bias.value.shape_str(),
            });
        }
        Ok(Linear { weight, bias, cache: None })
    }

    /// Gaussian weights, zero bias.
    pub fn gaussian<R: Rng + ?Sized>(name: &str, fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            weight: ParamTensor::gaussian(format!("{name}.weight"), fan_in, fan_out, std, rng),
            bias: ParamTensor::zeros(format!("{name}.bias"), 1, fan_out),
            cache: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.cols()
    }

    /// Forward pass without recording anything.
    pub fn apply(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.in_features() {
            return Err(Error::ShapeMismatch {
                op: "linear_forward",
                left: input.shape_str(),
                right: self.weight.value.shape_str(),
            });
        }
        let mut out = input.matmul(&self.weight.value)?;
        out.add_row_broadcast(&self.bias.value)?;
        Ok(out)
    }

    /// Forward pass that keeps the input for [`Linear::backward`].
    pub fn forward(&mut self, input: &Matrix) -> Result<Matrix> {
        let out = self.apply(input)?;
        self.cache = Some(input.clone());
        Ok(out)
    }

    /// Accumulates parameter gradients from `dL/dy` and returns `dL/dx`.
    /// Consumes the recorded input.
    pub fn backward(&mut self, grad_out: &Matrix) -> Result<Matrix> {
        let input = self.cache.take().ok_or(Error::BackwardBeforeForward("linear"))?;
        if grad_out.rows() != input.rows() || grad_out.cols() != self.out_features() {
            return Err(Error::ShapeMismatch {
                op: "linear_backward",
                left: grad_out.shape_str(),
                right: format!("{}x{}", input.rows(), self.out_features()),
            });
        }
        self.weight.accumulate_grad(&input.t_matmul(grad_out)?)?;
        let db = Matrix::from_vec(1, grad_out.cols(), grad_out.column_sums())?;
        self.bias.accumulate_grad(&db)?;
        grad_out.matmul_t(&self.weight.value)
    }

    pub fn params(&self) -> [&ParamTensor; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut ParamTensor; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// `max(x, 0)`, letting NaN through so bad inputs surface in the loss.
pub fn relu_forward(m: &Matrix) -> Matrix {
    m.map(|v| if v < 0.0 { 0.0 } else { v })
}

/// `dL/dx` for `y = relu(x)`, given the forward output `y`.
pub fn relu_backward(output: &Matrix, grad: &Matrix) -> Result<Matrix> {
    output.zip_map(grad, |y, g| if y > 0.0 { g } else { 0.0 })
}
