use crate::error::Result;
use crate::tensor::Tensor;

/// The closed set of operations the model is written against.
///
/// Implemented by [`Tensor`] for tape-free evaluation and by
/// [`Var`](crate::autodiff::Var) for recording onto a gradient tape, so the
/// attention kernels, the pseudoinverse iteration and the model forward pass
/// exist once and run on either path.
pub trait TensorOps: Clone + Sized {
    fn shape(&self) -> Vec<usize>;
    /// A copy of the current value.
    fn value(&self) -> Tensor;
    fn all_finite(&self) -> bool;
    /// Brings a constant into the same execution context. Constants never
    /// receive gradients.
    fn constant(&self, value: Tensor) -> Self;
    /// Same value, gradient flow stopped.
    fn detach(&self) -> Self;

    fn matmul(&self, rhs: &Self) -> Result<Self>;
    /// `self · rhsᵀ`
    fn matmul_t(&self, rhs: &Self) -> Result<Self>;
    fn transpose(&self) -> Result<Self>;
    fn swap_leading(&self) -> Result<Self>;
    fn reshape(&self, shape: &[usize]) -> Result<Self>;

    fn add(&self, rhs: &Self) -> Result<Self>;
    fn sub(&self, rhs: &Self) -> Result<Self>;
    fn mul(&self, rhs: &Self) -> Result<Self>;
    fn scale(&self, s: f64) -> Self;
    fn add_row_bias(&self, bias: &Self) -> Result<Self>;

    fn softmax_rows(&self) -> Result<Self>;
    fn layer_norm(&self, gain: &Self, bias: &Self) -> Result<Self>;
    fn relu(&self) -> Self;
    fn gelu(&self) -> Self;
    fn abs(&self) -> Self;
    fn sum(&self) -> Self;
    fn mean(&self) -> Self;

    fn concat_last(parts: &[Self]) -> Result<Self>;
    fn slice_last(&self, start: usize, end: usize) -> Result<Self>;
    fn slice_rows(&self, start: usize, end: usize) -> Result<Self>;
    fn pad_rows(&self, rows: usize) -> Result<Self>;
    fn embedding(&self, indices: &[usize]) -> Result<Self>;

    fn segment_means(&self, m: usize) -> Result<Self>;
    fn pinv_init(&self) -> Result<Self>;
    fn sub_from_identity(&self, c: f64) -> Result<Self>;
}

impl TensorOps for Tensor {
    fn shape(&self) -> Vec<usize> {
        Tensor::shape(self).to_vec()
    }

    fn value(&self) -> Tensor {
        self.clone()
    }

    fn all_finite(&self) -> bool {
        self.is_finite()
    }

    fn constant(&self, value: Tensor) -> Self {
        value
    }

    fn detach(&self) -> Self {
        self.clone()
    }

    fn matmul(&self, rhs: &Self) -> Result<Self> {
        self.matmul_ex(rhs, false, false)
    }

    fn matmul_t(&self, rhs: &Self) -> Result<Self> {
        self.matmul_ex(rhs, false, true)
    }

    fn transpose(&self) -> Result<Self> {
        Tensor::transpose(self)
    }

    fn swap_leading(&self) -> Result<Self> {
        Tensor::swap_leading(self)
    }

    fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::reshape(self, shape)
    }

    fn add(&self, rhs: &Self) -> Result<Self> {
        Tensor::add(self, rhs)
    }

    fn sub(&self, rhs: &Self) -> Result<Self> {
        Tensor::sub(self, rhs)
    }

    fn mul(&self, rhs: &Self) -> Result<Self> {
        Tensor::mul(self, rhs)
    }

    fn scale(&self, s: f64) -> Self {
        Tensor::scale(self, s)
    }

    fn add_row_bias(&self, bias: &Self) -> Result<Self> {
        Tensor::add_row_bias(self, bias)
    }

    fn softmax_rows(&self) -> Result<Self> {
        Tensor::softmax_rows(self)
    }

    fn layer_norm(&self, gain: &Self, bias: &Self) -> Result<Self> {
        Tensor::layer_norm(self, gain, bias)
    }

    fn relu(&self) -> Self {
        Tensor::relu(self)
    }

    fn gelu(&self) -> Self {
        Tensor::gelu(self)
    }

    fn abs(&self) -> Self {
        Tensor::abs(self)
    }

    fn sum(&self) -> Self {
        Tensor::scalar(Tensor::sum(self))
    }

    fn mean(&self) -> Self {
        Tensor::scalar(Tensor::mean(self))
    }

    fn concat_last(parts: &[Self]) -> Result<Self> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::concat_last(&refs)
    }

    fn slice_last(&self, start: usize, end: usize) -> Result<Self> {
        Tensor::slice_last(self, start, end)
    }

    fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        Tensor::slice_rows(self, start, end)
    }

    fn pad_rows(&self, rows: usize) -> Result<Self> {
        Tensor::pad_rows(self, rows)
    }

    fn embedding(&self, indices: &[usize]) -> Result<Self> {
        Tensor::embedding(self, indices)
    }

    fn segment_means(&self, m: usize) -> Result<Self> {
        Tensor::segment_means(self, m)
    }

    fn pinv_init(&self) -> Result<Self> {
        Ok(Tensor::pinv_init(self)?.0)
    }

    fn sub_from_identity(&self, c: f64) -> Result<Self> {
        Tensor::sub_from_identity(self, c)
    }
}
