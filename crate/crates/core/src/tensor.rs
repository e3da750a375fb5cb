//! Dense sequence tensors, attention configuration and window arithmetic.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Element precision tag carried by every tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Single => "single",
            Precision::Double => "double",
        })
    }
}

/// Scalar element of a [`SeqTensor`]. Implemented for `f32` and `f64`.
pub trait Element:
    Copy
    + Default
    + Send
    + Sync
    + PartialEq
    + PartialOrd
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + 'static
{
    const PRECISION: Precision;
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
    fn zero() -> Self {
        Self::default()
    }
}

impl Element for f32 {
    const PRECISION: Precision = Precision::Single;
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Element for f64 {
    const PRECISION: Precision = Precision::Double;
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Shape `[batch, seq, heads, dim]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub dim: usize,
}

impl Shape {
    pub const fn new(batch: usize, seq: usize, heads: usize, dim: usize) -> Self {
        Shape { batch, seq, heads, dim }
    }

    pub fn numel(&self) -> usize {
        self.batch * self.seq * self.heads * self.dim
    }

    fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.seq == 0 || self.heads == 0 || self.dim == 0 {
            return Err(Error::config(format!("shape entries must be >= 1, got {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.batch, self.seq, self.heads, self.dim)
    }
}

/// Dense 4-D array `[batch, seq, heads, dim]`, row-major with seq-major
/// strides, so one `(batch, position, head)` vector is contiguous.
#[derive(Clone, PartialEq)]
pub struct SeqTensor<T> {
    data: Vec<T>,
    shape: Shape,
    strides: [usize; 4],
}

impl<T: Element> SeqTensor<T> {
    pub fn zeros(shape: Shape) -> Result<Self> {
        shape.validate()?;
        Ok(Self::from_parts(vec![T::zero(); shape.numel()], shape))
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(Error::config(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Self::from_parts(data, shape))
    }

    pub fn filled(shape: Shape, value: T) -> Result<Self> {
        shape.validate()?;
        Ok(Self::from_parts(vec![value; shape.numel()], shape))
    }

    /// Builds a tensor by evaluating `f(b, i, h, l)` for every element.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Result<Self> {
        shape.validate()?;
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..shape.batch {
            for i in 0..shape.seq {
                for h in 0..shape.heads {
                    for l in 0..shape.dim {
                        data.push(f(b, i, h, l));
                    }
                }
            }
        }
        Ok(Self::from_parts(data, shape))
    }

    /// Standard-normal entries drawn from `rng`.
    pub fn random<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Result<Self> {
        Self::from_fn(shape, |_, _, _, _| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
    }

    fn from_parts(data: Vec<T>, shape: Shape) -> Self {
        let strides = [
            shape.seq * shape.heads * shape.dim,
            shape.heads * shape.dim,
            shape.dim,
            1,
        ];
        SeqTensor { data, shape, strides }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn strides(&self) -> [usize; 4] {
        self.strides
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, i: usize, h: usize, l: usize) -> usize {
        b * self.strides[0] + i * self.strides[1] + h * self.strides[2] + l * self.strides[3]
    }

    #[inline]
    pub fn get(&self, b: usize, i: usize, h: usize, l: usize) -> T {
        self.data[self.offset(b, i, h, l)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, i: usize, h: usize, l: usize, v: T) {
        let o = self.offset(b, i, h, l);
        self.data[o] = v;
    }

    /// The `dim`-long vector at `(b, i, h)`.
    #[inline]
    pub fn row(&self, b: usize, i: usize, h: usize) -> &[T] {
        let o = self.offset(b, i, h, 0);
        &self.data[o..o + self.shape.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, b: usize, i: usize, h: usize) -> &mut [T] {
        let o = self.offset(b, i, h, 0);
        let d = self.shape.dim;
        &mut self.data[o..o + d]
    }

    pub fn map<U: Element>(&self, mut f: impl FnMut(T) -> U) -> SeqTensor<U> {
        SeqTensor::from_parts(self.data.iter().map(|&x| f(x)).collect(), self.shape)
    }

    pub fn cast<U: Element>(&self) -> SeqTensor<U> {
        self.map(|x| U::from_f64(x.to_f64()))
    }

    pub fn to_f64(&self) -> SeqTensor<f64> {
        self.cast()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.to_f64().abs()))
    }
}

impl<T: Element> fmt::Debug for SeqTensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SeqTensor")
            .field("shape", &self.shape)
            .field("precision", &T::PRECISION)
            .finish_non_exhaustive()
    }
}

/// How the `(i, j, k)` logit is formed from `q_i`, `k_j`, `k'_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitForm {
    /// `sum_l q_l k_l k'_l`.
    #[default]
    Trilinear,
    /// Sum over 3-chunks of `det([q, k, k'])`.
    SumOfDeterminants,
}

impl fmt::Display for LogitForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LogitForm::Trilinear => "trilinear",
            LogitForm::SumOfDeterminants => "det",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnConfig {
    pub n: usize,
    pub d: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    /// Window over `K`: query `i` sees `i - w1 < j <= i`.
    pub w1: usize,
    /// Window over `K'`: query `i` sees `i - w2 < k <= i`.
    pub w2: usize,
    pub scale: f64,
    pub k2_bias: f64,
    pub v2_bias: f64,
    pub logit_form: LogitForm,
    pub precision: Precision,
}

impl AttnConfig {
    /// Trilinear logits, one head, scale `1/sqrt(d)`, no biases, double precision.
    pub fn new(n: usize, d: usize, w1: usize, w2: usize) -> Self {
        AttnConfig {
            n,
            d,
            q_heads: 1,
            kv_heads: 1,
            w1,
            w2,
            scale: 1.0 / (d as f64).sqrt(),
            k2_bias: 0.0,
            v2_bias: 0.0,
            logit_form: LogitForm::Trilinear,
            precision: Precision::Double,
        }
    }

    pub fn with_heads(mut self, q_heads: usize, kv_heads: usize) -> Self {
        self.q_heads = q_heads;
        self.kv_heads = kv_heads;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn with_biases(mut self, k2_bias: f64, v2_bias: f64) -> Self {
        self.k2_bias = k2_bias;
        self.v2_bias = v2_bias;
        self
    }

    pub fn with_logit_form(mut self, form: LogitForm) -> Self {
        self.logit_form = form;
        self
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::config("n and d must be >= 1"));
        }
        if self.w1 == 0 || self.w1 > self.n {
            return Err(Error::config(format!("w1 = {} must lie in [1, n = {}]", self.w1, self.n)));
        }
        if self.w2 == 0 || self.w2 > self.n {
            return Err(Error::config(format!("w2 = {} must lie in [1, n = {}]", self.w2, self.n)));
        }
        if self.q_heads == 0 || self.kv_heads == 0 || !self.q_heads.is_multiple_of(self.kv_heads) {
            return Err(Error::config(format!(
                "q_heads = {} must be a positive multiple of kv_heads = {}",
                self.q_heads, self.kv_heads
            )));
        }
        if self.logit_form == LogitForm::SumOfDeterminants && !self.d.is_multiple_of(3) {
            return Err(Error::config(format!(
                "sum-of-determinant logits need d divisible by 3, got d = {}",
                self.d
            )));
        }
        if !self.scale.is_finite() || !self.k2_bias.is_finite() || !self.v2_bias.is_finite() {
            return Err(Error::config("scale and biases must be finite"));
        }
        Ok(())
    }

    /// Number of query heads sharing one key/value head.
    pub fn group_size(&self) -> usize {
        self.q_heads / self.kv_heads
    }

    /// Key/value head read by query head `h`.
    #[inline]
    pub fn kv_head_for(&self, h: usize) -> usize {
        h * self.kv_heads / self.q_heads
    }

    pub fn q_shape(&self, batch: usize) -> Shape {
        Shape::new(batch, self.n, self.q_heads, self.d)
    }

    pub fn kv_shape(&self, batch: usize) -> Shape {
        Shape::new(batch, self.n, self.kv_heads, self.d)
    }

    pub fn window_k(&self, i: usize) -> WindowBounds {
        window_bounds_unchecked(i, self.w1)
    }

    pub fn window_k2(&self, i: usize) -> WindowBounds {
        window_bounds_unchecked(i, self.w2)
    }
}

/// The five attention inputs, borrowed together.
#[derive(Debug, Clone, Copy)]
pub struct AttnInputs<'a, T: Element> {
    pub q: &'a SeqTensor<T>,
    pub k: &'a SeqTensor<T>,
    pub k2: &'a SeqTensor<T>,
    pub v: &'a SeqTensor<T>,
    pub v2: &'a SeqTensor<T>,
}

impl<'a, T: Element> AttnInputs<'a, T> {
    pub fn new(
        q: &'a SeqTensor<T>,
        k: &'a SeqTensor<T>,
        k2: &'a SeqTensor<T>,
        v: &'a SeqTensor<T>,
        v2: &'a SeqTensor<T>,
    ) -> Self {
        AttnInputs { q, k, k2, v, v2 }
    }

    pub fn batch(&self) -> usize {
        self.q.shape().batch
    }

    /// Validates `cfg` and that every tensor has the shape it implies.
    pub fn check(&self, cfg: &AttnConfig) -> Result<()> {
        cfg.validate()?;
        let batch = self.batch();
        let qs = cfg.q_shape(batch);
        let kvs = cfg.kv_shape(batch);
        if self.q.shape() != qs {
            return Err(Error::config(format!("Q has shape {}, expected {qs}", self.q.shape())));
        }
        for (name, t) in [("K", self.k), ("K'", self.k2), ("V", self.v), ("V'", self.v2)] {
            if t.shape() != kvs {
                return Err(Error::config(format!("{name} has shape {}, expected {kvs}", t.shape())));
            }
        }
        Ok(())
    }
}

/// Owned counterpart of [`AttnInputs`], handy for tests and the CLI.
#[derive(Debug, Clone)]
pub struct AttnTensors<T: Element> {
    pub q: SeqTensor<T>,
    pub k: SeqTensor<T>,
    pub k2: SeqTensor<T>,
    pub v: SeqTensor<T>,
    pub v2: SeqTensor<T>,
}

impl<T: Element> AttnTensors<T> {
    pub fn random<R: Rng + ?Sized>(cfg: &AttnConfig, batch: usize, rng: &mut R) -> Result<Self> {
        let qs = cfg.q_shape(batch);
        let kvs = cfg.kv_shape(batch);
        Ok(AttnTensors {
            q: SeqTensor::random(qs, rng)?,
            k: SeqTensor::random(kvs, rng)?,
            k2: SeqTensor::random(kvs, rng)?,
            v: SeqTensor::random(kvs, rng)?,
            v2: SeqTensor::random(kvs, rng)?,
        })
    }

    pub fn inputs(&self) -> AttnInputs<'_, T> {
        AttnInputs::new(&self.q, &self.k, &self.k2, &self.v, &self.v2)
    }

    pub fn cast<U: Element>(&self) -> AttnTensors<U> {
        AttnTensors {
            q: self.q.cast(),
            k: self.k.cast(),
            k2: self.k2.cast(),
            v: self.v.cast(),
            v2: self.v2.cast(),
        }
    }
}

/// Inclusive range `[lo, hi]` of attendable positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WindowBounds {
    pub lo: usize,
    pub hi: usize,
}

impl WindowBounds {
    #[inline]
    pub fn contains(&self, j: usize) -> bool {
        self.lo <= j && j <= self.hi
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.hi - self.lo + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn range(&self) -> std::ops::Range<usize> {
        self.lo..self.hi + 1
    }
}

/// Positions `j` with `i - w < j <= i`, clamped at the sequence start.
pub fn window_bounds(i: usize, w: usize, n: usize) -> Result<WindowBounds> {
    if i >= n {
        return Err(Error::domain(format!("position {i} outside sequence of length {n}")));
    }
    if w == 0 {
        return Err(Error::domain("window length must be >= 1"));
    }
    Ok(window_bounds_unchecked(i, w))
}

#[inline]
pub(crate) fn window_bounds_unchecked(i: usize, w: usize) -> WindowBounds {
    WindowBounds { lo: (i + 1).saturating_sub(w), hi: i }
}

/// The `l`-th (1-based) consecutive 3-chunk of `v`.
pub fn chunk3<T: Copy>(v: &[T], l: usize) -> Result<[T; 3]> {
    if v.is_empty() || !v.len().is_multiple_of(3) {
        return Err(Error::config(format!("vector of dim {} is not a multiple of 3", v.len())));
    }
    let p = v.len() / 3;
    if l == 0 || l > p {
        return Err(Error::domain(format!("chunk index {l} outside 1..={p}")));
    }
    let s = 3 * (l - 1);
    Ok([v[s], v[s + 1], v[s + 2]])
}
