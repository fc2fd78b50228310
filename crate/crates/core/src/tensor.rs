//! Dense row-major tensors and the handful of kernels the attention and model
//! code is built from.
//!
//! Every kernel is pure and checks its output for non-finite values, so a NaN
//! never travels silently from one layer to the next.

use std::fmt;

use num_traits::Float;
use thiserror::Error;

/// Floating-point element type a [`Tensor`] can hold.
pub trait Scalar:
    Float + std::iter::Sum + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    /// Storage size of one value in bytes.
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;

    fn to_f64(self) -> f64;
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op} needs a non-empty last dimension, got shape {shape:?}")]
    EmptyDimension { op: &'static str, shape: Vec<usize> },
    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major array with 1 to 4 dimensions.
#[derive(Clone, PartialEq, Debug)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite(op))
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        check_finite("Tensor::new", &data)?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && shape.len() <= 4,
            "tensor rank must be 1..=4"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(
            shape.to_vec(),
            values.iter().map(|&v| T::from_f64(v)).collect(),
        )
    }

    /// Single-row matrix `[1 x len]`.
    pub fn row_vector(values: Vec<T>) -> Result<Self> {
        Self::new(vec![1, values.len()], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the stored values in bytes.
    pub fn byte_size(&self) -> usize {
        self.data.len() * T::BYTES
    }

    /// Number of rows of a matrix (product of all but the last dimension).
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.cols()).unwrap_or(0)
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    /// View a tensor of any rank as a `[rows x cols]` matrix.
    pub fn as_matrix(&self) -> Self {
        Self {
            shape: vec![self.rows(), self.cols()],
            data: self.data.clone(),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let (m, n) = self.dims2("slice_rows")?;
        if start > end || end > m {
            return Err(TensorError::Parameter(format!(
                "row range {start}..{end} out of bounds for {m} rows"
            )));
        }
        Ok(Self {
            shape: vec![end - start, n],
            data: self.data[start * n..end * n].to_vec(),
        })
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Parameter("concat_rows of nothing".into()))?;
        let n = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.shape.len() != 2 || p.cols() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: vec![rows, n],
            data,
        })
    }

    /// Append one row to a matrix in place.
    pub fn push_row(&mut self, row: &[T]) -> Result<()> {
        let (_, n) = self.dims2("push_row")?;
        if row.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "push_row",
                lhs: self.shape.clone(),
                rhs: vec![row.len()],
            });
        }
        check_finite("push_row", row)?;
        self.data.extend_from_slice(row);
        self.shape[0] += 1;
        Ok(())
    }

    /// Keep the rows listed in `indices`, in that order. Duplicates are allowed.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        let (m, n) = self.dims2("gather_rows")?;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= m {
                return Err(TensorError::Parameter(format!(
                    "row {i} out of bounds for {m} rows"
                )));
            }
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Ok(Self {
            shape: vec![indices.len(), n],
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data: Vec<T> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        check_finite("add", &data)?;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Add a vector to every last-dimension slice.
    pub fn add_row(&self, bias: &Self) -> Result<Self> {
        let n = self.cols();
        if bias.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let mut data = self.data.clone();
        for chunk in data.chunks_mut(n) {
            for (v, &b) in chunk.iter_mut().zip(&bias.data) {
                *v = *v + b;
            }
        }
        check_finite("add_row", &data)?;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, factor: T) -> Result<Self> {
        self.map("scale", |v| v * factor)
    }

    pub fn relu(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v.max(T::zero())).collect(),
        }
    }

    pub fn map(&self, op: &'static str, f: impl Fn(T) -> T) -> Result<Self> {
        let data: Vec<T> = self.data.iter().map(|&v| f(v)).collect();
        check_finite(op, &data)?;
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Largest element-wise absolute difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Convert element type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [b, m, n] => Ok((b, m, n)),
            _ => Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }
}

fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for t in 0..k {
            let av = a[i * k + t];
            let brow = &b[t * p..(t + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `A[m x k] · B[k x p]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, p) = b.dims2("matmul")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * p];
    matmul_into(&a.data, &b.data, &mut out, m, k, p);
    check_finite("matmul", &out)?;
    Ok(Tensor {
        shape: vec![m, p],
        data: out,
    })
}

/// `A[m x k] · B[p x k]ᵀ` without materializing the transpose.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul_nt")?;
    let (p, k2) = b.dims2("matmul_nt")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * p];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..p {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * p + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    check_finite("matmul_nt", &out)?;
    Ok(Tensor {
        shape: vec![m, p],
        data: out,
    })
}

/// `A[b x m x k] · B[b x k x p]`, one independent product per leading index.
pub fn batched_matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ba, m, k) = a.dims3("batched_matmul")?;
    let (bb, k2, p) = b.dims3("batched_matmul")?;
    if ba != bb || k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "batched_matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); ba * m * p];
    for s in 0..ba {
        matmul_into(
            &a.data[s * m * k..(s + 1) * m * k],
            &b.data[s * k * p..(s + 1) * k * p],
            &mut out[s * m * p..(s + 1) * m * p],
            m,
            k,
            p,
        );
    }
    check_finite("batched_matmul", &out)?;
    Ok(Tensor {
        shape: vec![ba, m, p],
        data: out,
    })
}

/// Softmax of `x / sqrt(d)` along the last dimension.
pub fn scaled_softmax_rows<T: Scalar>(x: &Tensor<T>, d: usize) -> Result<Tensor<T>> {
    if d == 0 {
        return Err(TensorError::Parameter(
            "softmax scale dimension must be >= 1".into(),
        ));
    }
    let n = x.cols();
    if n == 0 {
        return Err(TensorError::EmptyDimension {
            op: "scaled_softmax_rows",
            shape: x.shape.clone(),
        });
    }
    let inv = T::one() / T::from_f64(d as f64).sqrt();
    let mut data = x.data.clone();
    for row in data.chunks_mut(n) {
        softmax_in_place(row, inv);
    }
    check_finite("scaled_softmax_rows", &data)?;
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T], inv_scale: T) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) * inv_scale).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// `(x - mean) / sqrt(var + eps) * gain + shift` over each last-dimension slice.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    shift: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if eps.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
        return Err(TensorError::Parameter(
            "layer_norm eps must be positive".into(),
        ));
    }
    let n = x.cols();
    if gain.len() != n || shift.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    if n == 0 {
        return Err(TensorError::EmptyDimension {
            op: "layer_norm",
            shape: x.shape.clone(),
        });
    }
    let count = T::from_f64(n as f64);
    let mut data = x.data.clone();
    for row in data.chunks_mut(n) {
        let mean = row.iter().copied().sum::<T>() / count;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
        let inv = T::one() / (var + eps).sqrt();
        for ((v, &g), &s) in row.iter_mut().zip(&gain.data).zip(&shift.data) {
            *v = (*v - mean) * inv * g + s;
        }
    }
    check_finite("layer_norm", &data)?;
    Ok(Tensor {
        shape: x.shape.clone(),
        data,
    })
}

/// SplitMix64 generator. The recurrence is fixed so a seed regenerates the
/// same stream everywhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)`.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0);
        (self.next_f64() * bound as f64) as usize
    }

    /// Independent child generator seeded from this stream.
    pub fn split(&mut self) -> Self {
        Self::new(self.next_u64())
    }
}

/// Tensor of values drawn uniformly from `[lo, hi)`, row-major order.
pub fn seeded_uniform<T: Scalar>(
    shape: &[usize],
    rng: &mut Rng,
    lo: f64,
    hi: f64,
) -> Result<Tensor<T>> {
    if !lo.is_finite() || !hi.is_finite() || lo >= hi {
        return Err(TensorError::Parameter(format!(
            "uniform range requires lo < hi, got [{lo}, {hi})"
        )));
    }
    if shape.is_empty() || shape.len() > 4 {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            len: 0,
        });
    }
    let count: usize = shape.iter().product();
    let data = (0..count)
        .map(|_| {
            let v = T::from_f64(lo + rng.next_f64() * (hi - lo));
            // rounding into a narrower type can land on the open bound
            if v.to_f64() >= hi {
                T::from_f64(lo)
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}
