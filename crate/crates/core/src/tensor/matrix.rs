use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix with `f32` storage.
///
/// Reductions (dot products, means, variances) accumulate in `f64` and are
/// rounded once on store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Contract(format!(
                    "row {i} has length {} (expected {cols})",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f32]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in diag.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics, so handle the empty-column case separately.
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    /// Copy of the rows at `indices`, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::Range {
                    what: "row",
                    index: i,
                    limit: self.rows,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Contract(format!(
                "matmul shape mismatch: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        self.matmul_t(&other.transpose())
    }

    /// `self · otherᵀ`, the layout used by linear layers (`other` is `out × in`).
    pub fn matmul_t(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Contract(format!(
                "matmul_t shape mismatch: {:?} x {:?}ᵀ",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            let dst = &mut out.data[i * other.rows..(i + 1) * other.rows];
            for (j, d) in dst.iter_mut().enumerate() {
                *d = dot(a, other.row(j)) as f32;
            }
        }
        Ok(out)
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &Matrix) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::Contract(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f32) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f32]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::Contract(format!(
                "bias length {} does not match {} columns",
                bias.len(),
                self.cols
            )));
        }
        for row in self.data.chunks_exact_mut(self.cols.max(1)) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Column means accumulated in `f64`.
    pub fn column_means(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.cols];
        for row in self.row_iter() {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v as f64;
            }
        }
        let n = self.rows.max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// `self · selfᵀ` in `f64`, row-major `rows × rows`.
    pub fn gram_f64(&self) -> Vec<f64> {
        let n = self.rows;
        let mut g = vec![0.0f64; n * n];
        for i in 0..n {
            for j in i..n {
                let v = dot(self.row(i), self.row(j));
                g[i * n + j] = v;
                g[j * n + i] = v;
            }
        }
        g
    }

    /// `selfᵀ · self` in `f64`, row-major `cols × cols`.
    pub fn cross_f64(&self) -> Vec<f64> {
        let n = self.cols;
        let mut g = vec![0.0f64; n * n];
        for row in self.row_iter() {
            for i in 0..n {
                let ri = row[i] as f64;
                if ri == 0.0 {
                    continue;
                }
                let dst = &mut g[i * n..(i + 1) * n];
                for (d, &rj) in dst[i..].iter_mut().zip(&row[i..]) {
                    *d += ri * rj as f64;
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                g[i * n + j] = g[j * n + i];
            }
        }
        g
    }
}

/// Dot product with `f64` accumulation.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    // Four independent accumulators keep the loop pipelined without changing
    // the result between runs.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] as f64 * b[i] as f64;
        acc[1] += a[i + 1] as f64 * b[i + 1] as f64;
        acc[2] += a[i + 2] as f64 * b[i + 2] as f64;
        acc[3] += a[i + 3] as f64 * b[i + 3] as f64;
    }
    let mut tail = 0.0f64;
    for i in 4 * chunks..a.len().min(b.len()) {
        tail += a[i] as f64 * b[i] as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    softmax_rows_in_place(&mut out);
    out
}

pub fn softmax_rows_in_place(m: &mut Matrix) {
    let cols = m.cols;
    if cols == 0 {
        return;
    }
    for row in m.data.chunks_exact_mut(cols) {
        softmax_slice(row);
    }
}

pub(crate) fn softmax_slice(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut exps = Vec::with_capacity(row.len());
    let mut sum = 0.0f64;
    for &v in row.iter() {
        let e = ((v - max) as f64).exp();
        sum += e;
        exps.push(e);
    }
    for (v, e) in row.iter_mut().zip(exps) {
        *v = (e / sum) as f32;
    }
}

/// Per-row layer normalization with affine parameters.
pub fn layer_norm(m: &Matrix, weight: &[f32], bias: &[f32], eps: f64) -> Result<Matrix> {
    if weight.len() != m.cols || bias.len() != m.cols {
        return Err(Error::Contract(format!(
            "layer norm parameters of length {}/{} for {} columns",
            weight.len(),
            bias.len(),
            m.cols
        )));
    }
    let mut out = Matrix::zeros(m.rows, m.cols);
    let n = m.cols as f64;
    for r in 0..m.rows {
        let row = m.row(r);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = row
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let inv = 1.0 / (var + eps).sqrt();
        let dst = out.row_mut(r);
        for (((d, &v), &w), &b) in dst.iter_mut().zip(row).zip(weight).zip(bias) {
            *d = (((v as f64 - mean) * inv) * w as f64 + b as f64) as f32;
        }
    }
    Ok(out)
}

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_symmetric_pair() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let s = softmax_rows(&m);
        assert_eq!(s.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let m = Matrix::from_rows(&[vec![1000.0, 1000.0, 1000.0]]).unwrap();
        let s = softmax_rows(&m);
        for &v in s.row(0) {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-7);
        }
    }

    #[test]
    fn softmax_of_logs_recovers_proportions() {
        let m = Matrix::from_rows(&[vec![1f32.ln(), 2f32.ln(), 3f32.ln()]]).unwrap();
        let s = softmax_rows(&m);
        let expected = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for (&v, &e) in s.row(0).iter().zip(&expected) {
            assert_abs_diff_eq!(v as f64, e, epsilon = 1e-6);
        }
        let sum: f64 = s.row(0).iter().map(|&v| v as f64).sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.as_slice(), &[19.0, 22.0, 43.0, 50.0]);
        assert!(a.matmul(&Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn gram_and_cross_agree_with_matmul() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 0.5], vec![-1.0, 0.0, 3.0]]).unwrap();
        let g = a.gram_f64();
        let g_ref = a.matmul_t(&a).unwrap();
        for (x, y) in g.iter().zip(g_ref.as_slice()) {
            assert_abs_diff_eq!(*x, *y as f64, epsilon = 1e-6);
        }
        let c = a.cross_f64();
        let c_ref = a.transpose().matmul_t(&a.transpose()).unwrap();
        for (x, y) in c.iter().zip(c_ref.as_slice()) {
            assert_abs_diff_eq!(*x, *y as f64, epsilon = 1e-6);
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        let out = layer_norm(&m, &[1.0; 4], &[0.0; 4], 0.0).unwrap();
        let mean: f64 = out.row(0).iter().map(|&v| v as f64).sum::<f64>() / 4.0;
        let var: f64 = out.row(0).iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-5);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        // GELU(1) = 0.5 * (1 + erf(1/sqrt 2)) = 0.841344746...
        assert_abs_diff_eq!(gelu(1.0), 0.841_344_7, epsilon = 1e-6);
    }

    #[test]
    fn cosine_of_zero_vector_is_none() {
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_none());
        assert_abs_diff_eq!(cosine(&[1.0, 0.0], &[-2.0, 0.0]).unwrap(), -1.0);
    }
}
