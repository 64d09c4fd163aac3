//! Dense row-major kernels: matrices, rotary position encoding, the
//! prefix-causal mask and masked scaled dot-product attention.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("rotary encoding needs an even head dimension, got {0}")]
    OddHeadDim(usize),
    #[error("attention mask needs at least one current token")]
    EmptyQuery,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Numeric precision of a compute path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

/// Floating point element type usable by the kernels and the toy decoder.
pub trait Scalar: Float + Debug + Display + Default + Send + Sync + Sum + 'static {
    const PRECISION: Precision;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Additive value standing in for minus infinity in attention masks.
    fn mask_value() -> Self {
        Self::min_value()
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix2D<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix2D<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Shape(format!(
                "{} values cannot fill {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("matrix data"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from rows of equal width.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Self) -> Result<Self, TensorError> {
        if self.rows > 0 && other.rows > 0 && self.cols != other.cols {
            return Err(TensorError::Shape(format!(
                "cannot stack width {} on width {}",
                other.cols, self.cols
            )));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }

    /// Copies rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Returns `x · Wᵀ` where `weight` is stored as `out × in`.
    pub fn matmul_t(&self, weight: &Self) -> Self {
        assert_eq!(self.cols, weight.cols, "matmul_t inner dimension");
        let mut out = Self::zeros(self.rows, weight.rows);
        for r in 0..self.rows {
            let x = self.row(r);
            let dst = out.row_mut(r);
            for (o, w) in dst.iter_mut().zip(weight.data.chunks_exact(weight.cols)) {
                *o = dot(x, w);
            }
        }
        out
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc = acc + *x * *y;
    }
    acc
}

/// Rotates one head-sized slice in place at absolute `position`, pairing
/// adjacent lanes `(2j, 2j+1)` with frequency `base^(-2j/d)`.
pub(crate) fn rotate_in_place<T: Scalar>(x: &mut [T], position: usize, base: f64) {
    let d = x.len();
    for j in 0..d / 2 {
        let freq = base.powf(-2.0 * j as f64 / d as f64);
        let (sin, cos) = (position as f64 * freq).sin_cos();
        let (sin, cos) = (T::of(sin), T::of(cos));
        let a = x[2 * j];
        let b = x[2 * j + 1];
        x[2 * j] = a * cos - b * sin;
        x[2 * j + 1] = a * sin + b * cos;
    }
}

/// Rotary position encoding of every row of `x`; row `i` is encoded at
/// absolute position `position_offset + i`.
pub fn rope_apply<T: Scalar>(
    x: &Matrix2D<T>,
    position_offset: usize,
    rope_base: f64,
) -> Result<Matrix2D<T>, TensorError> {
    if !x.cols().is_multiple_of(2) {
        return Err(TensorError::OddHeadDim(x.cols()));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        rotate_in_place(out.row_mut(r), position_offset + r, rope_base);
    }
    Ok(out)
}

/// Additive mask over `[external prefix | current tokens]`: every prefix
/// column is visible, current tokens are causal among themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionMask {
    l_ext: usize,
    n_cur: usize,
}

impl AttentionMask {
    pub fn l_ext(&self) -> usize {
        self.l_ext
    }

    pub fn n_cur(&self) -> usize {
        self.n_cur
    }

    pub fn cols(&self) -> usize {
        self.l_ext + self.n_cur
    }

    /// Number of leading visible columns in `row`.
    pub fn visible(&self, row: usize) -> usize {
        self.l_ext + row + 1
    }

    pub fn is_visible(&self, row: usize, col: usize) -> bool {
        col < self.visible(row)
    }

    pub fn entry<T: Scalar>(&self, row: usize, col: usize) -> T {
        if self.is_visible(row, col) {
            T::zero()
        } else {
            T::mask_value()
        }
    }

    pub fn to_matrix<T: Scalar>(&self) -> Matrix2D<T> {
        Matrix2D::from_fn(self.n_cur, self.cols(), |r, c| self.entry(r, c))
    }
}

pub fn prefix_causal_mask(l_ext: usize, n_cur: usize) -> Result<AttentionMask, TensorError> {
    if n_cur == 0 {
        return Err(TensorError::EmptyQuery);
    }
    Ok(AttentionMask { l_ext, n_cur })
}

fn check_attention_shapes<T: Scalar>(
    q: &Matrix2D<T>,
    k: &Matrix2D<T>,
    v: &Matrix2D<T>,
    mask: &AttentionMask,
) -> Result<(), TensorError> {
    if q.cols() != k.cols() {
        return Err(TensorError::Shape(format!(
            "query width {} vs key width {}",
            q.cols(),
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(TensorError::Shape(format!(
            "{} keys vs {} values",
            k.rows(),
            v.rows()
        )));
    }
    if mask.n_cur() != q.rows() || mask.cols() != k.rows() {
        return Err(TensorError::Shape(format!(
            "mask {}x{} vs scores {}x{}",
            mask.n_cur(),
            mask.cols(),
            q.rows(),
            k.rows()
        )));
    }
    Ok(())
}

/// Column window of a matrix that one attention head reads.
#[derive(Clone, Copy)]
pub(crate) struct HeadView {
    pub offset: usize,
    pub width: usize,
}

/// Softmax over the visible scores of one row; masked columns carry zero
/// weight and are never materialized.
#[inline]
fn softmax_in_place<T: Scalar>(scores: &mut [T]) {
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum = sum + *s;
    }
    for s in scores.iter_mut() {
        *s = *s / sum;
    }
}

/// Masked attention for one head, writing into the head's column window of
/// `out`. Shared by [`attention`] and the decoder so both follow one
/// arithmetic path.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_head<T: Scalar>(
    q: &Matrix2D<T>,
    k: &Matrix2D<T>,
    v: &Matrix2D<T>,
    mask: &AttentionMask,
    qk: HeadView,
    vv: HeadView,
    scale: T,
    out: &mut Matrix2D<T>,
    scores: &mut Vec<T>,
) {
    for i in 0..q.rows() {
        let qi = &q.row(i)[qk.offset..qk.offset + qk.width];
        let visible = mask.visible(i);
        scores.clear();
        for j in 0..visible {
            let kj = &k.row(j)[qk.offset..qk.offset + qk.width];
            scores.push(dot(qi, kj) * scale);
        }
        softmax_in_place(scores);
        let dst = &mut out.row_mut(i)[vv.offset..vv.offset + vv.width];
        dst.iter_mut().for_each(|d| *d = T::zero());
        for (j, &p) in scores.iter().enumerate() {
            let vj = &v.row(j)[vv.offset..vv.offset + vv.width];
            for (d, x) in dst.iter_mut().zip(vj) {
                *d = *d + p * *x;
            }
        }
    }
}

/// `softmax(q kᵀ / sqrt(d_k) + mask) v` for a single head.
pub fn attention<T: Scalar>(
    q: &Matrix2D<T>,
    k: &Matrix2D<T>,
    v: &Matrix2D<T>,
    mask: &AttentionMask,
    d_k: usize,
) -> Result<Matrix2D<T>, TensorError> {
    check_attention_shapes(q, k, v, mask)?;
    let mut out = Matrix2D::zeros(q.rows(), v.cols());
    let scale = T::one() / T::of(d_k as f64).sqrt();
    attend_head(
        q,
        k,
        v,
        mask,
        HeadView {
            offset: 0,
            width: q.cols(),
        },
        HeadView {
            offset: 0,
            width: v.cols(),
        },
        scale,
        &mut out,
        &mut Vec::new(),
    );
    Ok(out)
}

/// Attention probabilities (rows of the softmax) including masked columns,
/// which come out as exact zeros.
pub fn attention_probs<T: Scalar>(
    q: &Matrix2D<T>,
    k: &Matrix2D<T>,
    mask: &AttentionMask,
    d_k: usize,
) -> Result<Matrix2D<T>, TensorError> {
    check_attention_shapes(q, k, k, mask)?;
    let scale = T::one() / T::of(d_k as f64).sqrt();
    let mut out = Matrix2D::zeros(q.rows(), k.rows());
    let mut row = Vec::with_capacity(k.rows());
    for i in 0..q.rows() {
        row.clear();
        for j in 0..k.rows() {
            let logit = dot(q.row(i), k.row(j)) * scale + mask.entry::<T>(i, j);
            row.push(logit);
        }
        softmax_in_place(&mut row);
        out.row_mut(i).copy_from_slice(&row);
    }
    Ok(out)
}
