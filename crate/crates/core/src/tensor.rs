//! Dense row-major `f64` tensors and the numeric kernels shared by the
//! tape-free and tape-recorded execution paths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument;

pub const LAYER_NORM_EPS: f64 = 1e-5;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

/// A dense tensor of rank 0 through 4 stored contiguously in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "shape {shape:?} holds {expected} values but {} were given",
                    data.len()
                ),
            ));
        }
        if shape.len() > 4 {
            return Err(Error::invalid("tensor", format!("rank {} exceeds 4", shape.len())));
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        instrument::record_buffer(data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; len])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; len])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("from_rows", "ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..len).map(&mut f).collect())
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Views the tensor as a matrix whose rows run over all leading axes.
    pub fn row_view(&self) -> (usize, usize) {
        let cols = self.shape.last().copied().unwrap_or(1);
        if cols == 0 {
            return (0, 0);
        }
        (self.data.len() / cols, cols)
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        let (_, cols) = self.row_view();
        self.data[i * cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, cols) = self.row_view();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub(crate) fn accumulate(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::invalid(op, format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    fn require_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    /// General product `op(self) · op(rhs)` where `op` optionally transposes.
    pub fn matmul_ex(&self, rhs: &Tensor, trans_lhs: bool, trans_rhs: bool) -> Result<Tensor> {
        let (ar, ac) = self.require_matrix("matmul")?;
        let (br, bc) = rhs.require_matrix("matmul")?;
        let (m, k) = if trans_lhs { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_rhs { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &rhs.shape));
        }
        let mut out = vec![0.0; m * n];
        if m > 0 && n > 0 && k > 0 {
            let (rsa, csa) = if trans_lhs { (1, ac as isize) } else { (ac as isize, 1) };
            let (rsb, csb) = if trans_rhs { (1, bc as isize) } else { (bc as isize, 1) };
            // SAFETY: pointers and strides describe the owned buffers exactly;
            // `out` is m×n row-major and does not alias the inputs.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    self.data.as_ptr(),
                    rsa,
                    csa,
                    rhs.data.as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Ok(Self::from_parts(vec![m, n], out))
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.matmul_ex(rhs, false, false)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.require_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }

    /// Swaps the two leading axes of a rank-3 tensor: `[a, b, c] -> [b, a, c]`.
    pub fn swap_leading(&self) -> Result<Tensor> {
        let [a, b, c] = self.shape[..] else {
            return Err(Error::invalid(
                "swap_leading",
                format!("expected rank 3, got shape {:?}", self.shape),
            ));
        };
        let mut out = vec![0.0; a * b * c];
        for i in 0..a {
            for j in 0..b {
                let src = (i * b + j) * c;
                let dst = (j * a + i) * c;
                out[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
            }
        }
        Ok(Self::from_parts(vec![b, a, c], out))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.data.len() || shape.len() > 4 {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    /// `c·I − self` for a square matrix.
    pub fn sub_from_identity(&self, c: f64) -> Result<Tensor> {
        let (r, cols) = self.require_matrix("sub_from_identity")?;
        if r != cols {
            return Err(Error::invalid("sub_from_identity", format!("matrix {r}×{cols} is not square")));
        }
        let mut out = self.map(|v| -v);
        for i in 0..r {
            out.data[i * r + i] += c;
        }
        Ok(out)
    }

    /// Maximum absolute column sum.
    pub fn norm_one(&self) -> f64 {
        self.norm_one_argmax().0
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        self.norm_inf_argmax().0
    }

    pub(crate) fn norm_one_argmax(&self) -> (f64, usize) {
        let (r, c) = self.row_view();
        let mut best = (f64::NEG_INFINITY, 0);
        for j in 0..c {
            let s: f64 = (0..r).map(|i| self.data[i * c + j].abs()).sum();
            if s > best.0 {
                best = (s, j);
            }
        }
        best
    }

    pub(crate) fn norm_inf_argmax(&self) -> (f64, usize) {
        let (r, c) = self.row_view();
        let mut best = (f64::NEG_INFINITY, 0);
        for i in 0..r {
            let s: f64 = self.data[i * c..(i + 1) * c].iter().map(|v| v.abs()).sum();
            if s > best.0 {
                best = (s, i);
            }
        }
        best
    }

    /// Initial iterate for the pseudoinverse iteration: `aᵀ / (‖a‖₁‖a‖_∞)`.
    /// Returns the iterate together with the scale factor.
    pub fn pinv_init(&self) -> Result<(Tensor, f64)> {
        let (r, c) = self.require_matrix("pinv_init")?;
        if r != c {
            return Err(Error::invalid("pinv_init", format!("matrix {r}×{c} is not square")));
        }
        let denom = self.norm_one() * self.norm_inf();
        if denom == 0.0 {
            return Ok((Tensor::zeros(&[c, r]), 0.0));
        }
        let scale = 1.0 / denom;
        Ok((self.transpose()?.map(|v| v * scale), scale))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.require_same_shape(rhs, "add")?;
        Ok(self.zip_map(rhs, |a, b| a + b))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.require_same_shape(rhs, "sub")?;
        Ok(self.zip_map(rhs, |a, b| a - b))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.require_same_shape(rhs, "mul")?;
        Ok(self.zip_map(rhs, |a, b| a * b))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// Adds a length-`d` bias to every row of a `[… × d]` tensor.
    pub fn add_row_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (rows, cols) = self.row_view();
        if bias.shape != [cols] {
            return Err(Error::shape("add_row_bias", &self.shape, &bias.shape));
        }
        let mut out = self.clone();
        for i in 0..rows {
            for (o, b) in out.data[i * cols..(i + 1) * cols].iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    pub fn gelu(&self) -> Tensor {
        self.map(gelu)
    }

    pub fn abs(&self) -> Tensor {
        self.map(f64::abs)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    // ---- row-wise -------------------------------------------------------

    /// Softmax along the last axis with per-row max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        if !self.is_finite() {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let (rows, cols) = self.row_view();
        let mut out = self.clone();
        for i in 0..rows {
            let row = &mut out.data[i * cols..(i + 1) * cols];
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            let inv = 1.0 / total;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        Ok(out)
    }

    /// Layer normalisation over the last axis. Also returns the normalised
    /// input and the per-row inverse standard deviations for the backward pass.
    pub fn layer_norm_parts(&self, gain: &Tensor, bias: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>)> {
        let (rows, cols) = self.row_view();
        if gain.shape != [cols] {
            return Err(Error::shape("layer_norm", &self.shape, &gain.shape));
        }
        if bias.shape != [cols] {
            return Err(Error::shape("layer_norm", &self.shape, &bias.shape));
        }
        let mut xhat = self.clone();
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = &mut xhat.data[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let mut out = xhat.clone();
        for i in 0..rows {
            let row = &mut out.data[i * cols..(i + 1) * cols];
            for ((v, g), b) in row.iter_mut().zip(&gain.data).zip(&bias.data) {
                *v = *v * g + b;
            }
        }
        Ok((out, xhat, inv_std))
    }

    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        Ok(self.layer_norm_parts(gain, bias)?.0)
    }

    // ---- structural -----------------------------------------------------

    /// Concatenates tensors along the last axis; all leading axes must agree.
    pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_last", "no inputs"))?;
        let lead = &first.shape[..first.shape.len().saturating_sub(1)];
        for p in parts {
            if p.shape.is_empty() || &p.shape[..p.shape.len() - 1] != lead {
                return Err(Error::shape("concat_last", &first.shape, &p.shape));
            }
        }
        let rows = first.row_view().0;
        let total: usize = parts.iter().map(|p| p.row_view().1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(Self::from_parts(shape, data))
    }

    pub fn slice_last(&self, start: usize, end: usize) -> Result<Tensor> {
        let (rows, cols) = self.row_view();
        if start > end || end > cols {
            return Err(Error::invalid(
                "slice_last",
                format!("range {start}..{end} out of bounds for last extent {cols}"),
            ));
        }
        let width = end - start;
        let mut data = Vec::with_capacity(rows * width);
        for i in 0..rows {
            data.extend_from_slice(&self.data[i * cols + start..i * cols + end]);
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = width;
        Ok(Self::from_parts(shape, data))
    }

    /// Slices along the first axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let lead = *self
            .shape
            .first()
            .ok_or_else(|| Error::invalid("slice_rows", "cannot slice a scalar"))?;
        if start > end || end > lead {
            return Err(Error::invalid(
                "slice_rows",
                format!("range {start}..{end} out of bounds for leading extent {lead}"),
            ));
        }
        let stride = self.data.len() / lead.max(1);
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self::from_parts(shape, self.data[start * stride..end * stride].to_vec()))
    }

    /// Appends zero rows along the first axis until it has `rows` entries.
    pub fn pad_rows(&self, rows: usize) -> Result<Tensor> {
        let lead = self.shape.first().copied().unwrap_or(0);
        if rows < lead {
            return Err(Error::invalid("pad_rows", format!("cannot pad {lead} rows down to {rows}")));
        }
        let stride = self.data.len() / lead.max(1);
        let mut data = self.data.clone();
        data.resize(rows * stride, 0.0);
        let mut shape = self.shape.clone();
        shape[0] = rows;
        Ok(Self::from_parts(shape, data))
    }

    /// Gathers rows of a `[vocab × d]` table.
    pub fn embedding(&self, indices: &[usize]) -> Result<Tensor> {
        let (vocab, d) = self.require_matrix("embedding")?;
        let mut data = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            if ix >= vocab {
                return Err(Error::invalid(
                    "embedding",
                    format!("index {ix} out of range for table of {vocab} rows"),
                ));
            }
            data.extend_from_slice(&self.data[ix * d..(ix + 1) * d]);
        }
        Ok(Self::from_parts(vec![indices.len(), d], data))
    }

    /// Means of `m` contiguous row blocks of equal length; one pass over the input.
    pub fn segment_means(&self, m: usize) -> Result<Tensor> {
        let (n, d) = self.require_matrix("segment_means")?;
        if m == 0 || n % m != 0 {
            return Err(Error::invalid(
                "segment_means",
                format!("{n} rows cannot be split into {m} equal segments"),
            ));
        }
        let len = n / m;
        let inv = 1.0 / len as f64;
        let mut out = vec![0.0; m * d];
        for i in 0..n {
            let dst = &mut out[(i / len) * d..(i / len + 1) * d];
            for (o, v) in dst.iter_mut().zip(&self.data[i * d..(i + 1) * d]) {
                *o += v;
            }
        }
        instrument::record_segment_rows(n);
        for v in &mut out {
            *v *= inv;
        }
        Ok(Self::from_parts(vec![m, d], out))
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}
