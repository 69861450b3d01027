//! Dense 2-D kernels in `f64`, a small reverse-mode tape over them, and a
//! finite-difference gradient checker.
//!
//! Every representation in the model (sentence, target and image features,
//! the fused sequence) is a [`Matrix`]. Multi-head attention is expressed by
//! slicing feature columns, so nothing here needs more than two dimensions.

mod gradcheck;
mod tape;

pub use gradcheck::{central_difference, grad_check, GradCheckReport};
pub use tape::{Tape, Var};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CedError, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CedError::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(CedError::shape("ragged rows"));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    /// A `1 x n` matrix holding `values`.
    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(CedError::shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        matmul_into(self, other, &mut out);
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(CedError::shape(format!(
                "matmul {}x{} by transposed {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(CedError::shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Columns `[start, start + len)` as a new matrix.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Matrix> {
        if start + len > self.cols {
            return Err(CedError::shape(format!(
                "column slice {start}..{} of {} columns",
                start + len,
                self.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, len);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + len]);
        }
        Ok(out)
    }

    /// Concatenates along the feature axis.
    pub fn concat_cols(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if parts.iter().any(|m| m.rows != rows) {
            return Err(CedError::shape("column concat with differing row counts"));
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for m in parts {
                out.row_mut(r)[offset..offset + m.cols].copy_from_slice(m.row(r));
                offset += m.cols;
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += a · b`, i-k-j loop order.
pub(crate) fn matmul_into(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    let n = b.cols;
    for i in 0..a.rows {
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
}

/// Row-wise softmax, stabilized by subtracting each row's maximum.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    if m.is_empty() {
        return Err(CedError::shape("softmax of an empty matrix"));
    }
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Per-row normalization to zero mean and unit variance (population
/// variance plus `eps`), followed by the affine `gamma`, `beta`.
pub fn layer_norm(x: &Matrix, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Matrix> {
    Ok(layer_norm_parts(x, gamma, beta, eps)?.0)
}

/// Layer norm that also returns the normalized pre-affine rows and the
/// per-row inverse standard deviation, which the tape needs for backward.
pub(crate) fn layer_norm_parts(
    x: &Matrix,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Matrix, Matrix, Vec<f64>)> {
    if x.cols < 1 {
        return Err(CedError::shape("layer norm needs at least one column"));
    }
    if gamma.len() != x.cols || beta.len() != x.cols {
        return Err(CedError::shape(format!(
            "layer norm gain/bias of length {}/{} for {} columns",
            gamma.len(),
            beta.len(),
            x.cols
        )));
    }
    if !(eps > 0.0) {
        return Err(CedError::config("eps", "layer norm epsilon must be positive"));
    }
    let n = x.cols as f64;
    let mut normalized = Matrix::zeros(x.rows, x.cols);
    let mut out = Matrix::zeros(x.rows, x.cols);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        let norm_row = normalized.row_mut(r);
        for (c, v) in row.iter().enumerate() {
            norm_row[c] = (v - mean) * istd;
        }
        let out_row = out.row_mut(r);
        for c in 0..x.cols {
            out_row[c] = normalized.data[r * x.cols + c] * gamma[c] + beta[c];
        }
    }
    Ok((out, normalized, inv_std))
}

/// Affine map `x · w (+ b)`, with `b` broadcast over rows.
pub fn linear(x: &Matrix, w: &Matrix, b: Option<&[f64]>) -> Result<Matrix> {
    let mut out = x.matmul(w)?;
    if let Some(b) = b {
        if b.len() != w.cols {
            return Err(CedError::shape(format!(
                "bias of length {} for {} output columns",
                b.len(),
                w.cols
            )));
        }
        for r in 0..out.rows {
            for (o, bv) in out.row_mut(r).iter_mut().zip(b) {
                *o += bv;
            }
        }
    }
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU; smooth, so finite differences stay clean.
pub fn gelu(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn softmax_uniform_row() {
        let s = softmax_rows(&Matrix::row_vector(&[0.0, 0.0, 0.0])).unwrap();
        for v in s.as_slice() {
            assert_close(*v, 1.0 / 3.0, 1e-15);
        }
    }

    #[test]
    fn softmax_large_logit_does_not_overflow() {
        let s = softmax_rows(&Matrix::row_vector(&[1000.0, 0.0, 0.0])).unwrap();
        assert!(s.is_finite());
        assert_close(s.get(0, 0), 1.0, 1e-15);
        assert!(s.get(0, 1) < 1e-300);
    }

    #[test]
    fn softmax_matches_reference_values() {
        // exp(1), exp(2), exp(3) normalized
        let s = softmax_rows(&Matrix::row_vector(&[1.0, 2.0, 3.0])).unwrap();
        let expected = [0.090_030_57, 0.244_728_47, 0.665_240_96];
        for (v, e) in s.as_slice().iter().zip(expected) {
            assert_close(*v, e, 1e-8);
        }
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(matches!(
            softmax_rows(&Matrix::zeros(0, 0)),
            Err(CedError::InvalidShape(_))
        ));
    }

    #[test]
    fn layer_norm_constant_row_maps_to_zero() {
        let x = Matrix::row_vector(&[5.0, 5.0, 5.0]);
        let y = layer_norm(&x, &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert_eq!(y.as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_standardized_row_is_fixed_point() {
        let x = Matrix::row_vector(&[1.0, -1.0]);
        let y = layer_norm(&x, &[1.0; 2], &[0.0; 2], 1e-12).unwrap();
        assert_close(y.get(0, 0), 1.0, 1e-10);
        assert_close(y.get(0, 1), -1.0, 1e-10);
    }

    #[test]
    fn layer_norm_hand_computed() {
        // mean 2, population variance 2/3
        let x = Matrix::row_vector(&[1.0, 2.0, 3.0]);
        let y = layer_norm(&x, &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        let s = 1.0 / (2.0f64 / 3.0 + 1e-5).sqrt();
        assert_close(y.get(0, 0), -s, 1e-12);
        assert_close(y.get(0, 1), 0.0, 1e-12);
        assert_close(y.get(0, 2), s, 1e-12);
        assert_close(y.get(0, 2), 1.22474, 1e-5);
    }

    #[test]
    fn layer_norm_rejects_bad_shapes() {
        let x = Matrix::zeros(2, 0);
        assert!(layer_norm(&x, &[], &[], 1e-5).is_err());
        let x = Matrix::zeros(2, 3);
        assert!(layer_norm(&x, &[1.0; 2], &[0.0; 3], 1e-5).is_err());
    }

    #[test]
    fn linear_examples() {
        let w = Matrix::from_rows(&[vec![1.5, -2.0], vec![0.25, 4.0]]).unwrap();
        assert_eq!(linear(&Matrix::identity(2), &w, None).unwrap(), w);

        let x = Matrix::row_vector(&[1.0, 2.0]);
        let y = linear(&x, &Matrix::identity(2), Some(&[10.0, 10.0])).unwrap();
        assert_eq!(y.as_slice(), &[11.0, 12.0]);

        let w = Matrix::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(linear(&x, &w, None).unwrap().as_slice(), &[13.0, 16.0]);

        assert!(linear(&Matrix::zeros(1, 3), &w, None).is_err());
        assert!(linear(&x, &w, Some(&[1.0])).is_err());
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert_close(gelu_derivative(x), fd, 1e-8);
        }
    }

    fn matrix_strategy() -> impl Strategy<Value = Matrix> {
        (1usize..6, 1usize..7).prop_flat_map(|(r, c)| {
            prop::collection::vec(-50.0f64..50.0, r * c)
                .prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(m in matrix_strategy()) {
            let s = softmax_rows(&m).unwrap();
            for r in 0..s.rows() {
                let sum: f64 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
                prop_assert!(s.row(r).iter().all(|&v| v > 0.0 && v <= 1.0));
            }
        }

        #[test]
        fn softmax_shift_invariant(m in matrix_strategy(), shift in -100.0f64..100.0) {
            let a = softmax_rows(&m).unwrap();
            let b = softmax_rows(&m.map(|v| v + shift)).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        }

        #[test]
        fn layer_norm_rows_have_zero_mean(m in matrix_strategy()) {
            let c = m.cols();
            let y = layer_norm(&m, &vec![1.0; c], &vec![0.0; c], 1e-5).unwrap();
            for r in 0..y.rows() {
                let mean: f64 = y.row(r).iter().sum::<f64>() / c as f64;
                prop_assert!(mean.abs() < 1e-10);
            }
        }

        #[test]
        fn linear_is_additive(
            a in prop::collection::vec(-10.0f64..10.0, 6),
            b in prop::collection::vec(-10.0f64..10.0, 6),
            w in prop::collection::vec(-10.0f64..10.0, 12),
            bias in prop::collection::vec(-10.0f64..10.0, 4),
        ) {
            let x1 = Matrix::from_vec(2, 3, a).unwrap();
            let x2 = Matrix::from_vec(2, 3, b).unwrap();
            let w = Matrix::from_vec(3, 4, w).unwrap();
            let lhs = linear(&x1.add(&x2).unwrap(), &w, Some(&bias)).unwrap();
            let rhs = linear(&x1, &w, Some(&bias)).unwrap()
                .add(&linear(&x2, &w, Some(&bias)).unwrap()).unwrap();
            let bias_rows = linear(&Matrix::zeros(2, 3), &w, Some(&bias)).unwrap();
            let rhs = rhs.sub(&bias_rows).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
        }
    }
}
