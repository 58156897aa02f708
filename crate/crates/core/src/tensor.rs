//! Dense row-major arrays, the handful of kernels the model needs, and a
//! deterministic counter-based RNG.
//!
//! Everything here is generic over [`Scalar`] so the same code path runs in
//! 32-bit (default) and 64-bit (oracles, gradient checks) precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Floating-point element type. Implemented for `f32` and `f64` only.
pub trait Scalar:
    Copy
    + Debug
    + Display
    + Default
    + PartialEq
    + PartialOrd
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    const PRECISION: Precision;
    const ZERO: Self;
    const ONE: Self;
    const NEG_INFINITY: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn max(self, other: Self) -> Self;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }

    /// Little-endian bytes, appended to `out`.
    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one value from exactly `Self::PRECISION.bytes()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty, $prec:expr) => {
        impl Scalar for $t {
            const PRECISION: Precision = $prec;
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const NEG_INFINITY: Self = <$t>::NEG_INFINITY;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(bytes);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, Precision::F32);
impl_scalar!(f64, Precision::F64);

/// Runtime precision selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bytes(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    /// Tag written into checkpoint headers (bit width).
    pub fn tag(self) -> u32 {
        (self.bytes() * 8) as u32
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            32 => Some(Precision::F32),
            64 => Some(Precision::F64),
            _ => None,
        }
    }

    /// `GQAKIT_PRECISION` if set to `f32`/`f64`, otherwise 32-bit.
    pub fn from_env() -> Result<Self> {
        match std::env::var("GQAKIT_PRECISION") {
            Ok(v) => v.parse(),
            Err(_) => Ok(Precision::F32),
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Argument(format!("unknown precision {other:?} (expected f32 or f64)"))),
        }
    }
}

impl Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::F32 => f.write_str("f32"),
            Precision::F64 => f.write_str("f64"),
        }
    }
}

/// Row-major dense array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![F::ZERO; n] }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::ONE;
        }
        t
    }

    /// Zero-mean normal entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| F::from_f64(rng.normal() * std)).collect();
        Self { shape: shape.to_vec(), data }
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| F::from_f64(rng.uniform(lo, hi))).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Extent of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        if self.shape.len() < 2 {
            return self.shape.first().copied().unwrap_or(1);
        }
        self.shape[1..].iter().product()
    }

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension(format!("{what}: expected a matrix, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: F) {
        let n = self.shape[1];
        self.data[r * n + c] = v;
    }

    pub fn row(&self, r: usize) -> &[F] {
        let n = self.cols();
        &self.data[r * n..(r + 1) * n]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        let n = self.cols();
        &mut self.data[r * n..(r + 1) * n]
    }

    /// Errors if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{context}: element {pos} is {}", self.data[pos])));
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                out.push(self.data[i * n + j]);
            }
        }
        Ok(Self { shape: vec![n, m], data: out })
    }

    /// Columns `[start, start + width)` as a new matrix.
    pub fn col_block(&self, start: usize, width: usize) -> Result<Self> {
        let (m, n) = self.dims2("col_block")?;
        if start + width > n {
            return Err(Error::Dimension(format!("column block {start}+{width} exceeds {n} columns")));
        }
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + start..i * n + start + width]);
        }
        Ok(Self { shape: vec![m, width], data: out })
    }

    /// Overwrites columns `[start, start + block.cols())` with `block`.
    pub fn set_col_block(&mut self, start: usize, block: &Self) -> Result<()> {
        let (m, n) = self.dims2("set_col_block")?;
        let (bm, bw) = block.dims2("set_col_block")?;
        if bm != m || start + bw > n {
            return Err(Error::Dimension(format!(
                "cannot place {bm}x{bw} block at column {start} of {m}x{n}"
            )));
        }
        for i in 0..m {
            self.data[i * n + start..i * n + start + bw].copy_from_slice(&block.data[i * bw..(i + 1) * bw]);
        }
        Ok(())
    }

    /// Adds `block` into columns `[start, start + block.cols())`.
    pub fn add_col_block(&mut self, start: usize, block: &Self) -> Result<()> {
        let (m, n) = self.dims2("add_col_block")?;
        let (bm, bw) = block.dims2("add_col_block")?;
        if bm != m || start + bw > n {
            return Err(Error::Dimension(format!(
                "cannot add {bm}x{bw} block at column {start} of {m}x{n}"
            )));
        }
        for i in 0..m {
            for (o, &b) in self.data[i * n + start..i * n + start + bw].iter_mut().zip(&block.data[i * bw..(i + 1) * bw]) {
                *o += b;
            }
        }
        Ok(())
    }

    /// Rows `[start, start + count)` as a new matrix.
    pub fn row_block(&self, start: usize, count: usize) -> Result<Self> {
        let (m, n) = self.dims2("row_block")?;
        if start + count > m {
            return Err(Error::Dimension(format!("row block {start}+{count} exceeds {m} rows")));
        }
        Ok(Self { shape: vec![count, n], data: self.data[start * n..(start + count) * n].to_vec() })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: F) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| v * s).collect() }
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::ZERO, |m, v| m.max(v.abs()))
    }

    /// Largest elementwise absolute difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<F> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).fold(F::ZERO, |m, (&a, &b)| m.max((a - b).abs())))
    }

    fn same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!("{what}: shapes {:?} and {:?} differ", self.shape, other.shape)));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        self.same_shape(other, "elementwise")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    /// Converts element type (exact when widening).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect() }
    }
}

/// `c[i,j] = sum_t a[i,t] * b[t,j]`, accumulated in `F`.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = a.dims2("matmul lhs")?;
    let (k2, n) = b.dims2("matmul rhs")?;
    if k != k2 {
        return Err(Error::Dimension(format!("matmul: inner extents {k} and {k2} differ ({m}x{k} * {k2}x{n})")));
    }
    let out = Tensor { shape: vec![m, n], data: par::rows(m, n, m * k * n, |i, row| matmul_row(a, b, i, row)) };
    out.check_finite("matmul")?;
    Ok(out)
}

/// `a^T b` without materializing the transpose.
pub fn matmul_tn<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (k, m) = a.dims2("matmul_tn lhs")?;
    let (k2, n) = b.dims2("matmul_tn rhs")?;
    if k != k2 {
        return Err(Error::Dimension(format!("matmul_tn: row counts {k} and {k2} differ")));
    }
    let data = par::rows(m, n, m * k * n, |i, row| {
        for t in 0..k {
            let av = a.data[t * m + i];
            let brow = &b.data[t * n..(t + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    let out = Tensor { shape: vec![m, n], data };
    out.check_finite("matmul_tn")?;
    Ok(out)
}

/// `a b^T` without materializing the transpose.
pub fn matmul_nt<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = a.dims2("matmul_nt lhs")?;
    let (n, k2) = b.dims2("matmul_nt rhs")?;
    if k != k2 {
        return Err(Error::Dimension(format!("matmul_nt: column counts {k} and {k2} differ")));
    }
    let data = par::rows(m, n, m * k * n, |i, row| {
        let arow = &a.data[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b.data[j * k..(j + 1) * k];
            *o = dot(arow, brow);
        }
    });
    let out = Tensor { shape: vec![m, n], data };
    out.check_finite("matmul_nt")?;
    Ok(out)
}

fn matmul_row<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, i: usize, row: &mut [F]) {
    let k = a.shape[1];
    let n = b.shape[1];
    for t in 0..k {
        let av = a.data[i * k + t];
        let brow = &b.data[t * n..(t + 1) * n];
        for (o, &bv) in row.iter_mut().zip(brow) {
            *o += av * bv;
        }
    }
}

#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = F::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Numerically stable softmax of a single row, in place.
///
/// Entries equal to `-inf` (masked positions) receive probability zero.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().fold(F::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = F::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<F: Scalar>(a: &Tensor<F>) -> Result<Tensor<F>> {
    a.dims2("softmax_rows")?;
    a.check_finite("softmax_rows input")?;
    let mut out = a.clone();
    let n = a.cols();
    if n > 0 {
        for row in out.data.chunks_mut(n) {
            softmax_in_place(row);
        }
    }
    Ok(out)
}

/// Elementwise arithmetic mean of equally shaped tensors.
pub fn mean_over<F: Scalar>(items: &[&Tensor<F>]) -> Result<Tensor<F>> {
    let first = items.first().ok_or_else(|| Error::Argument("mean_over: empty list".into()))?;
    for t in &items[1..] {
        first.same_shape(t, "mean_over")?;
    }
    // Each element is summed in f64 and rounded once so the result does not
    // depend on argument order.
    let data = (0..first.len())
        .map(|i| {
            let mut vals: Vec<f64> = items.iter().map(|t| t.data[i].to_f64()).collect();
            vals.sort_by(|a, b| a.total_cmp(b));
            let s: f64 = vals.iter().sum();
            F::from_f64(s / items.len() as f64)
        })
        .collect();
    Ok(Tensor { shape: first.shape.clone(), data })
}

/// SplitMix64 generator: a 64-bit counter passed through a fixed mixer.
///
/// Identical seeds give identical streams everywhere. Not `Sync`-shared;
/// derive children with [`Rng::fork`].
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    spare_normal: Option<f64>,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a stream label.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix64(seed ^ mix64(stream.wrapping_add(GOLDEN_GAMMA)))
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed, spare_normal: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Independent child generator for the given stream label.
    pub fn fork(&mut self, stream: u64) -> Rng {
        Rng::new(derive_seed(self.next_u64(), stream))
    }
}
