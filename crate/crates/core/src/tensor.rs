//! Dense row-major tensors and the numeric kernels shared by the differentiable
//! graph, the inference path and the decode loop.
//!
//! Rank-2 kernels treat every leading dimension as rows: a `[s, h, d']` query
//! tensor is a `s × (h·d')` matrix as far as `matmul` and `layer_norm` care.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{FluxError, Result};

/// Element type tag, also the on-disk dtype byte of the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: DType;

    /// `C = alpha·A·B + beta·C` over strided operands.
    ///
    /// # Safety
    /// Strides and dimensions must describe in-bounds views of the slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major matrix product on raw slices.
///
/// `a` is `m×k` (stored `k×m` when `trans_a`), `b` is `k×n` (stored `n×k`
/// when `trans_b`), `c` is `m×n`. With `accumulate` the product is added to
/// `c` instead of overwriting it.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: out size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: sizes asserted above; strides describe dense row-major views.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(FluxError::dim("tensor", format!("zero dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(FluxError::dim(
                "tensor",
                format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Build from `f64` values, converting to the element type.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(
            shape.to_vec(),
            values.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )
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

    pub fn into_data(self) -> Vec<T> {
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

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has rank >= 1")
    }

    /// Product of all but the last dimension.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(FluxError::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    /// Copy of rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor<T> {
        let c = self.cols();
        let mut shape = vec![end - start];
        shape.extend_from_slice(&self.shape[1..]);
        if self.rank() == 1 {
            shape = vec![(end - start) * c];
        }
        Tensor {
            shape,
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

fn as_matrix<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    if t.rank() < 1 {
        return Err(FluxError::dim(op, "rank-0 tensor"));
    }
    Ok((t.rows(), t.cols()))
}

/// `[m×k]·[k×n] → [m×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(FluxError::dim(
            "matmul",
            format!("expected rank-2 operands, got {:?} and {:?}", a.shape, b.shape),
        ));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(FluxError::dim(
            "matmul",
            format!("inner dims {:?}·{:?}", a.shape, b.shape),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, &mut out, false);
    Tensor::new(vec![m, n], out)
}

/// `x·w + bias` for rank-2 `x` (any leading shape flattened to rows).
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (m, k) = as_matrix(x, "linear")?;
    if w.rank() != 2 || w.shape[0] != k {
        return Err(FluxError::dim(
            "linear",
            format!("input {:?} with weight {:?}", x.shape, w.shape),
        ));
    }
    let n = w.shape[1];
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, &x.data, false, &w.data, false, &mut out, false);
    if let Some(b) = bias {
        if b.len() != n {
            return Err(FluxError::dim("linear", "bias length"));
        }
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(&b.data) {
                *o += *bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Max-stabilized softmax over the last dimension.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let c = out.cols();
    for row in out.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    out
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer norm; also returns per-row mean and reciprocal std.
pub(crate) fn layer_norm_stats<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let c = x.cols();
    if gain.len() != c || bias.len() != c {
        return Err(FluxError::dim(
            "layer_norm",
            format!("width {c} with gain {:?} bias {:?}", gain.shape, bias.shape),
        ));
    }
    let eps = T::from_f64_lossy(LAYER_NORM_EPS);
    let n = T::from_usize(c).unwrap();
    let rows = x.rows();
    let mut out = x.clone();
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for row in out.data.chunks_mut(c) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rstd * gain.data[i] + bias.data[i];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    Ok((out, means, rstds))
}

pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    layer_norm_stats(x, gain, bias).map(|(out, _, _)| out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
    }
}

/// Gather rows of `table` (`[vocab, d]`) for each token id.
pub fn embed<T: Scalar>(tokens: &[u32], table: &Tensor<T>) -> Result<Tensor<T>> {
    if table.rank() != 2 {
        return Err(FluxError::dim("embed", "table must be rank 2"));
    }
    if tokens.is_empty() {
        return Err(FluxError::dim("embed", "empty token list"));
    }
    let (vocab, d) = (table.shape[0], table.shape[1]);
    let mut data = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        let t = t as usize;
        if t >= vocab {
            return Err(FluxError::Index {
                what: "token id",
                index: t,
                bound: vocab,
            });
        }
        data.extend_from_slice(table.row(t));
    }
    Tensor::new(vec![tokens.len(), d], data)
}

/// Mean negative log-likelihood of `targets` = `(row, class)` pairs under
/// row-wise softmax of `logits`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[(usize, u32)]) -> Result<T> {
    let (rows, vocab) = as_matrix(logits, "cross_entropy")?;
    if targets.is_empty() {
        return Err(FluxError::contract("cross_entropy needs at least one target"));
    }
    let mut total = 0.0f64;
    for &(r, class) in targets {
        if r >= rows {
            return Err(FluxError::Index {
                what: "target row",
                index: r,
                bound: rows,
            });
        }
        if class as usize >= vocab {
            return Err(FluxError::Index {
                what: "target id",
                index: class as usize,
                bound: vocab,
            });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        total += (lse - row[class as usize]).as_f64();
    }
    Ok(T::from_f64_lossy(total / targets.len() as f64))
}
