//! Dense vectors and matrices, activations, and the similarity primitives
//! every other module is built from. All arithmetic is `f64`.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{LaprError, Result};

/// Norm below which a vector is treated as zero.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    /// Wraps `data`, rejecting NaN and infinite entries.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(LaprError::invalid(format!("non-finite entry at index {i}")));
        }
        Ok(Vector(data))
    }

    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub(crate) fn from_raw(data: Vec<f64>) -> Self {
        Vector(data)
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(LaprError::invalid(format!("matrix shape {rows}x{cols} has a zero side")));
        }
        if data.len() != rows * cols {
            return Err(LaprError::invalid(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(LaprError::invalid("matrix has non-finite entries"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LaprError::invalid("ragged rows"));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    /// `out = self * x + bias`. Shapes are the caller's responsibility.
    pub(crate) fn affine_into(&self, bias: &[f64], x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(bias.len(), self.rows);
        debug_assert_eq!(out.len(), self.rows);
        for ((o, row), b) in out.iter_mut().zip(self.data.chunks_exact(self.cols)).zip(bias) {
            *o = dot(row, x) + b;
        }
    }

    /// `out += selfᵀ * y`.
    pub(crate) fn add_transpose_mul(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (row, &yi) in self.data.chunks_exact(self.cols).zip(y) {
            if yi != 0.0 {
                axpy(yi, row, out);
            }
        }
    }

    /// `self += alpha * u vᵀ`.
    pub(crate) fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (row, &ui) in self.data.chunks_exact_mut(self.cols).zip(u) {
            let a = alpha * ui;
            if a != 0.0 {
                axpy(a, v, row);
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vector> {
    if v.is_empty() {
        return Err(LaprError::invalid("softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(LaprError::invalid("softmax input has non-finite entries"));
    }
    let mut out = vec![0.0; v.len()];
    softmax_into(v, &mut out);
    Ok(Vector(out))
}

pub(crate) fn softmax_into(v: &[f64], out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(v) {
        *o = (x - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// `log Σ exp(v_i)`, stable for large magnitudes.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Scales `v` to unit Euclidean norm. Vectors with norm below [`NORM_EPS`]
/// come back unchanged.
pub fn l2_normalize(v: &[f64]) -> Vector {
    let n = norm(v);
    if n < NORM_EPS {
        return Vector(v.to_vec());
    }
    Vector(v.iter().map(|x| x / n).collect())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LaprError::invalid(format!(
            "cosine of vectors with dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na < NORM_EPS || nb < NORM_EPS {
        return Err(LaprError::degenerate("cosine similarity with a zero-norm operand"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `W x + b` with shape checks.
pub fn affine_forward(w: &Matrix, b: &[f64], x: &[f64]) -> Result<Vector> {
    if w.cols != x.len() || w.rows != b.len() {
        return Err(LaprError::invalid(format!(
            "affine shapes: W {}x{}, b {}, x {}",
            w.rows,
            w.cols,
            b.len(),
            x.len()
        )));
    }
    let mut out = vec![0.0; w.rows];
    w.affine_into(b, x, &mut out);
    Ok(Vector(out))
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_examples() {
        assert!(close(&softmax(&[0.0, 0.0]).unwrap(), &[0.5, 0.5], 1e-15));
        assert!(close(&softmax(&[1000.0, 0.0]).unwrap(), &[1.0, 0.0], 1e-12));
        // exp(1), exp(2), exp(3) over their sum, evaluated by hand.
        let (e1, e2, e3) = (1f64.exp(), 2f64.exp(), 3f64.exp());
        let s = e1 + e2 + e3;
        let expected = [e1 / s, e2 / s, e3 / s];
        let got = softmax(&[1.0, 2.0, 3.0]).unwrap();
        assert!(close(&got, &expected, 1e-15));
        assert!(close(&got, &[0.09003057, 0.24472847, 0.66524096], 1e-8));
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(matches!(softmax(&[]), Err(LaprError::InvalidArgument(_))));
    }

    #[test]
    fn normalize_examples() {
        assert!(close(&l2_normalize(&[3.0, 4.0]), &[0.6, 0.8], 1e-15));
        assert_eq!(l2_normalize(&[0.0, 0.0]).as_slice(), &[0.0, 0.0]);
        assert!(close(&l2_normalize(&[1.0; 4]), &[0.5; 4], 1e-15));
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[2.0, 0.0], &[2.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(LaprError::DegenerateVector(_))
        ));
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 0.0]),
            Err(LaprError::InvalidArgument(_))
        ));
    }

    #[test]
    fn affine_examples() {
        let out = affine_forward(&Matrix::identity(2), &[0.0, 0.0], &[3.0, 5.0]).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 5.0]);
        let w = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(affine_forward(&w, &[1.0, 1.0], &[1.0, 1.0]).unwrap().as_slice(), &[4.0, 8.0]);
        let out = affine_forward(&Matrix::zeros(2, 3), &[7.0, 7.0], &[-1.0, 9.0, 2.5]).unwrap();
        assert_eq!(out.as_slice(), &[7.0, 7.0]);
        assert!(affine_forward(&w, &[1.0], &[1.0, 1.0]).is_err());
        assert!(affine_forward(&w, &[1.0, 1.0], &[1.0]).is_err());
    }

    #[test]
    fn vector_rejects_non_finite() {
        assert!(Vector::new(vec![1.0, f64::NAN]).is_err());
        assert!(Vector::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn matrix_shape_checks() {
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Matrix::new(0, 2, vec![]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_on_simplex(v in prop::collection::vec(-1e6f64..1e6, 1..20)) {
            let p = softmax(&v).unwrap();
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn softmax_shift_invariant(v in prop::collection::vec(-50f64..50.0, 1..12), c in -100f64..100.0) {
            let p = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(q.iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn cosine_self_and_bounds(
            a in prop::collection::vec(-10f64..10.0, 1..16),
            seed in prop::collection::vec(-10f64..10.0, 16),
            alpha in 0.001f64..1000.0,
        ) {
            prop_assume!(norm(&a) > 1e-6);
            prop_assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() <= 1e-12);
            let b = &seed[..a.len()];
            prop_assume!(norm(b) > 1e-6);
            let c = cosine_similarity(&a, b).unwrap();
            prop_assert!(c.abs() <= 1.0 + 1e-12);
            prop_assert!((c - cosine_similarity(b, &a).unwrap()).abs() <= 1e-15);
            let scaled: Vec<f64> = a.iter().map(|x| x * alpha).collect();
            prop_assert!((cosine_similarity(&scaled, b).unwrap() - c).abs() <= 1e-12);
        }
    }
}
