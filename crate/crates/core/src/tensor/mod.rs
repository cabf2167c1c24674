//! Dense row-major tensors and the handful of operations the MPO code needs:
//! reshape, unfolding, axis permutation, pairwise contraction, SVD and norms.

mod linalg;
mod svd;

pub use linalg::matmul;
pub use svd::{svd, SvdResult, RANK_TOLERANCE};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Dense multi-dimensional array, row-major (last index fastest).
///
/// A tensor with an empty shape is a scalar holding exactly one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return shape_err(format!("zero extent in shape {shape:?}"));
        }
        if numel(&shape) != data.len() {
            return shape_err(format!(
                "shape {shape:?} holds {} elements, got {}",
                numel(&shape),
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel(shape)],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds a tensor by evaluating `f` at every flat (row-major) index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(f).collect(),
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
            return shape_err("ragged or empty rows");
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
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

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return shape_err(format!("index {index:?} for shape {:?}", self.shape));
        }
        let mut off = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            if i >= e {
                return Err(Error::IndexOutOfRange { index: i, len: e });
            }
            off = off * e + i;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    /// Matrix element; panics when out of range.
    pub fn at(&self, r: usize, c: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same flat data under a new shape.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Self> {
        self.clone().into_reshape(new_shape)
    }

    pub fn into_reshape(self, new_shape: &[usize]) -> Result<Self> {
        if numel(new_shape) != self.data.len() || new_shape.contains(&0) {
            return shape_err(format!(
                "cannot reshape {:?} into {new_shape:?}",
                self.shape
            ));
        }
        Ok(Self {
            shape: new_shape.to_vec(),
            data: self.data,
        })
    }

    /// Unfolding: the first `split` axes become rows, the rest columns.
    pub fn matricize(&self, split: usize) -> Result<Self> {
        if split == 0 || split >= self.rank() {
            return shape_err(format!(
                "split {split} out of range for rank {}",
                self.rank()
            ));
        }
        let rows = numel(&self.shape[..split]);
        self.reshape(&[rows, self.data.len() / rows])
    }

    /// Reorders axes: output axis `k` is input axis `axes[k]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank {
            return shape_err(format!("permutation {axes:?} for rank {rank}"));
        }
        for &a in axes {
            if a >= rank || seen[a] {
                return shape_err(format!("invalid permutation {axes:?}"));
            }
            seen[a] = true;
        }
        if axes.iter().enumerate().all(|(k, &a)| k == a) {
            return Ok(self.clone());
        }
        let new_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let mut in_strides = vec![1usize; rank];
        for k in (0..rank.saturating_sub(1)).rev() {
            in_strides[k] = in_strides[k + 1] * self.shape[k + 1];
        }
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();

        let n = self.data.len();
        let mut out = Vec::with_capacity(n);
        let last = rank - 1;
        let inner_len = new_shape[last];
        let inner_stride = strides[last];
        let mut idx = vec![0usize; rank];
        let mut base = 0usize;
        while out.len() < n {
            let mut off = base;
            for _ in 0..inner_len {
                out.push(self.data[off]);
                off += inner_stride;
            }
            // advance the odometer over all but the innermost axis
            let mut k = last;
            while k > 0 {
                k -= 1;
                idx[k] += 1;
                base += strides[k];
                if idx[k] < new_shape[k] {
                    break;
                }
                base -= strides[k] * new_shape[k];
                idx[k] = 0;
            }
        }
        Ok(Self {
            shape: new_shape,
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return shape_err("transpose needs a matrix");
        }
        self.permute(&[1, 0])
    }

    /// Sums products over the paired axes. Result axes are the free axes of
    /// `a` (in order) followed by the free axes of `b`.
    pub fn contract(a: &Self, b: &Self, axes_a: &[usize], axes_b: &[usize]) -> Result<Self> {
        if axes_a.len() != axes_b.len() {
            return shape_err("contracted axis lists differ in length");
        }
        for (&x, &y) in axes_a.iter().zip(axes_b) {
            if x >= a.rank() || y >= b.rank() {
                return shape_err(format!("axis pair ({x}, {y}) out of range"));
            }
            if a.shape[x] != b.shape[y] {
                return shape_err(format!(
                    "axis extents differ: {} vs {}",
                    a.shape[x], b.shape[y]
                ));
            }
        }
        let free_a: Vec<usize> = (0..a.rank()).filter(|k| !axes_a.contains(k)).collect();
        let free_b: Vec<usize> = (0..b.rank()).filter(|k| !axes_b.contains(k)).collect();
        if free_a.len() + axes_a.len() != a.rank() || free_b.len() + axes_b.len() != b.rank() {
            return shape_err("repeated contraction axis");
        }

        let perm_a: Vec<usize> = free_a.iter().chain(axes_a).copied().collect();
        let perm_b: Vec<usize> = axes_b.iter().chain(&free_b).copied().collect();
        let rows: usize = free_a.iter().map(|&k| a.shape[k]).product();
        let inner: usize = axes_a.iter().map(|&k| a.shape[k]).product();
        let cols: usize = free_b.iter().map(|&k| b.shape[k]).product();

        let am = a.permute(&perm_a)?.into_reshape(&[rows, inner])?;
        let bm = b.permute(&perm_b)?.into_reshape(&[inner, cols])?;
        let prod = matmul(&am, &bm)?;

        let out_shape: Vec<usize> = free_a
            .iter()
            .map(|&k| a.shape[k])
            .chain(free_b.iter().map(|&k| b.shape[k]))
            .collect();
        prod.into_reshape(&out_shape)
    }

    pub fn sum_squares(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> T {
        self.sum_squares().sqrt()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!("shapes {:?} and {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |x, y| x + y)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |x, y| x - y)
    }

    /// In-place `self += alpha * other`.
    pub(crate) fn axpy_in_place(&mut self, alpha: T, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("shapes {:?} and {:?}", self.shape, other.shape));
        }
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x += alpha * y;
        }
        Ok(())
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        Ok(self
            .sub(other)?
            .data
            .iter()
            .fold(T::zero(), |m, v| m.max(v.abs())))
    }

    /// `||self - other||_F / ||other||_F`, or the absolute norm when `other` is zero.
    pub fn relative_error(&self, reference: &Self) -> Result<T> {
        let diff = self.sub(reference)?.frobenius_norm();
        let norm = reference.frobenius_norm();
        Ok(if norm > T::zero() { diff / norm } else { diff })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }
}
