//! Dense row-major matrices.
//!
//! Storage is generic over [`Real`] (`f32` for inference, `f64` for gradient
//! checks). Every reduction accumulates in `f64` and rounds once on store, and
//! every kernel works row by row, so a row's result does not depend on how
//! many other rows are processed in the same call.

use std::fmt::Debug;
use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{bail, Result};

/// Scalar storage type.
pub trait Real:
    Copy + Default + PartialEq + PartialOrd + Debug + Send + Sync + Into<f64> + 'static
{
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;

    #[inline]
    fn f64(self) -> f64 {
        self.into()
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

#[derive(Clone, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Debug for Matrix<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix<{}>({}x{})", T::DTYPE, self.rows, self.cols)
    }
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::default(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            bail!(Config, "matrix {rows}x{cols} needs {} values, got {}", rows * cols, data.len());
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(T::from_f64(f(i, j)));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// Entries drawn from N(0, scale²).
    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        Self::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn push_row(&mut self, row: &[T]) -> Result<()> {
        if row.len() != self.cols {
            bail!(Config, "row of width {} pushed onto {}-column matrix", row.len(), self.cols);
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch {:?} x {:?}", self, other);
        let mut out = Matrix::zeros(self.rows, other.cols);
        let mut acc = vec![0.0f64; other.cols];
        for i in 0..self.rows {
            row_times_matrix_into(self.row(i), other, &mut acc);
            for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
                *o = T::from_f64(*a);
            }
        }
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, other.cols, "matmul_t shape mismatch {:?} x {:?}ᵀ", self, other);
        Matrix::from_fn(self.rows, other.rows, |i, j| dot(self.row(i), other.row(j)))
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.rows, other.rows, "t_matmul shape mismatch {:?}ᵀ x {:?}", self, other);
        let mut acc = vec![0.0f64; self.cols * other.cols];
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for (i, &ai) in a.iter().enumerate() {
                let ai = ai.f64();
                if ai == 0.0 {
                    continue;
                }
                let dst = &mut acc[i * other.cols..(i + 1) * other.cols];
                for (d, &bj) in dst.iter_mut().zip(b) {
                    *d += ai * bj.f64();
                }
            }
        }
        Matrix { rows: self.cols, cols: other.cols, data: acc.into_iter().map(T::from_f64).collect() }
    }

    pub fn transpose(&self) -> Matrix<T> {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i).f64())
    }

    pub fn slice_cols(&self, cols: Range<usize>) -> Matrix<T> {
        assert!(cols.end <= self.cols);
        let width = cols.len();
        let mut data = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[cols.clone()]);
        }
        Matrix { rows: self.rows, cols: width, data }
    }

    pub fn slice_rows(&self, rows: Range<usize>) -> Matrix<T> {
        assert!(rows.end <= self.rows);
        Matrix {
            rows: rows.len(),
            cols: self.cols,
            data: self.data[rows.start * self.cols..rows.end * self.cols].to_vec(),
        }
    }

    /// Horizontal concatenation `[a | b | ...]`.
    pub fn hcat(parts: &[&Matrix<T>]) -> Result<Matrix<T>> {
        let Some(first) = parts.first() else { bail!(Config, "hcat of zero matrices") };
        let rows = first.rows;
        if parts.iter().any(|p| p.rows != rows) {
            bail!(Config, "hcat row mismatch");
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Vertical concatenation.
    pub fn vcat(parts: &[&Matrix<T>]) -> Result<Matrix<T>> {
        let Some(first) = parts.first() else { bail!(Config, "vcat of zero matrices") };
        let cols = first.cols;
        if parts.iter().any(|p| p.cols != cols) {
            bail!(Config, "vcat column mismatch");
        }
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Matrix { rows: data.len() / cols.max(1), cols, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix<T> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| T::from_f64(f(v.f64()))).collect() }
    }

    pub fn scale(&self, s: f64) -> Matrix<T> {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.shape(), other.shape());
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| T::from_f64(a.f64() + b.f64())).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.shape(), other.shape());
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| T::from_f64(a.f64() - b.f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = T::from_f64(a.f64() + b.f64());
        }
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.f64().abs()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a.f64() - b.f64()).abs()).fold(0.0, f64::max)
    }

    /// `‖self − other‖_F / ‖other‖_F`, or the absolute error when `other` is zero.
    pub fn relative_error(&self, reference: &Matrix<T>) -> f64 {
        let diff: f64 = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (a.f64() - b.f64()).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = reference.frobenius();
        if norm == 0.0 {
            diff
        } else {
            diff / norm
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.f64().is_finite())
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| U::from_f64(v.f64())).collect() }
    }
}

/// `Σ a_i b_i` accumulated in f64.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.f64() * y.f64()).sum()
}

/// `acc = row · m`, accumulated in f64.
pub fn row_times_matrix_into<T: Real>(row: &[T], m: &Matrix<T>, acc: &mut [f64]) {
    debug_assert_eq!(row.len(), m.rows);
    debug_assert_eq!(acc.len(), m.cols);
    acc.iter_mut().for_each(|a| *a = 0.0);
    for (k, &x) in row.iter().enumerate() {
        let x = x.f64();
        if x == 0.0 {
            continue;
        }
        for (a, &w) in acc.iter_mut().zip(m.row(k)) {
            *a += x * w.f64();
        }
    }
}

/// Cosine similarity of f64 vectors; zero when either has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (d / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity of two rows; zero when either row has zero norm.
pub fn row_cosine<T: Real>(a: &[T], b: &[T]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small() {
        let a = m(2, 3, &[1., 2., 3., 4., 5., 6.]);
        let b = m(3, 2, &[7., 8., 9., 10., 11., 12.]);
        assert_eq!(a.matmul(&b).data(), &[58., 64., 139., 154.]);
        assert_eq!(a.matmul_t(&b.transpose()).data(), a.matmul(&b).data());
        assert_eq!(a.transpose().t_matmul(&b).data(), a.matmul(&b).data());
    }

    #[test]
    fn concat_and_slice() {
        let a = m(2, 2, &[1., 2., 3., 4.]);
        let b = m(2, 1, &[5., 6.]);
        let h = Matrix::hcat(&[&a, &b]).unwrap();
        assert_eq!(h.data(), &[1., 2., 5., 3., 4., 6.]);
        assert_eq!(h.slice_cols(2..3), b);
        let v = Matrix::vcat(&[&a, &a]).unwrap();
        assert_eq!(v.shape(), (4, 2));
        assert_eq!(v.slice_rows(2..4), a);
    }

    #[test]
    fn row_result_independent_of_batch() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::<f32>::gaussian(5, 7, 1.0, &mut rng);
        let w = Matrix::<f32>::gaussian(7, 3, 1.0, &mut rng);
        let full = x.matmul(&w);
        let single = x.slice_rows(3..4).matmul(&w);
        assert_eq!(full.row(3), single.row(0));
    }

    #[test]
    fn zero_norm_cosine_is_zero() {
        assert_eq!(row_cosine(&[0.0f32, 0.0], &[1.0, 2.0]), 0.0);
        assert!((row_cosine(&[1.0f32, 2.0], &[-1.0, -2.0]) + 1.0).abs() < 1e-12);
    }
}
