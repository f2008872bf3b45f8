//! Dense numeric kernels: matrix products, a max-subtracted softmax and
//! single-query scaled dot-product attention over a retained key subset.
//!
//! Storage is `f32`; every reduction (dot products, softmax normaliser,
//! attention-weighted sums) accumulates in `f64`.

use crate::error::{Error, Result};

/// Row-major dense matrix of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("matrix contains non-finite entries"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Empty matrix with a fixed column count, grown with [`Matrix::push_row`].
    pub fn with_cols(cols: usize) -> Self {
        Matrix {
            rows: 0,
            cols,
            data: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::invalid(format!(
                "row of length {} pushed into matrix with {} columns",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Keeps only the rows whose index satisfies `keep`, preserving order.
    pub(crate) fn retain_rows(&mut self, mut keep: impl FnMut(usize) -> bool) {
        let cols = self.cols;
        let mut write = 0;
        for read in 0..self.rows {
            if keep(read) {
                if write != read {
                    self.data
                        .copy_within(read * cols..(read + 1) * cols, write * cols);
                }
                write += 1;
            }
        }
        self.rows = write;
        self.data.truncate(write * cols);
    }
}

/// One softmax row over the currently retained positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbRow(pub Vec<f32>);

impl ProbRow {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().map(|&p| f64::from(p)).sum()
    }
}

/// Dot product with `f64` accumulation in index order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::invalid(format!(
            "matmul dimension mismatch: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let row = vec_matmul(a.row(i), b);
        out.data[i * b.cols..(i + 1) * b.cols].copy_from_slice(&row);
    }
    Ok(out)
}

/// Row vector times matrix: `x (1×k) · m (k×n)`.
pub fn vec_matmul(x: &[f32], m: &Matrix) -> Vec<f32> {
    debug_assert_eq!(x.len(), m.rows);
    let mut acc = vec![0.0f64; m.cols];
    for (k, &xk) in x.iter().enumerate() {
        let xk = f64::from(xk);
        for (a, &w) in acc.iter_mut().zip(m.row(k)) {
            *a += xk * f64::from(w);
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

pub fn softmax_row(logits: &[f32]) -> Result<ProbRow> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax over an empty row"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("softmax over non-finite logits"));
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&x| (f64::from(x) - f64::from(max)).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbRow(exps.into_iter().map(|e| (e / total) as f32).collect()))
}

/// Result of one query attending to a set of retained keys.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub output: Vec<f32>,
    pub probs: ProbRow,
}

pub fn attention_step(
    query: &[f32],
    keys: &Matrix,
    values: &Matrix,
    scale: f32,
) -> Result<AttentionOutput> {
    if keys.rows == 0 {
        return Err(Error::invalid("attention over an empty key set"));
    }
    if keys.rows != values.rows || keys.cols != values.cols || keys.cols != query.len() {
        return Err(Error::invalid(format!(
            "attention shape mismatch: q {}, keys {}x{}, values {}x{}",
            query.len(),
            keys.rows,
            keys.cols,
            values.rows,
            values.cols
        )));
    }
    let logits: Vec<f32> = (0..keys.rows)
        .map(|i| (dot(query, keys.row(i)) * f64::from(scale)) as f32)
        .collect();
    let probs = softmax_row(&logits)?;
    let mut acc = vec![0.0f64; values.cols];
    for (i, &p) in probs.0.iter().enumerate() {
        let p = f64::from(p);
        for (a, &v) in acc.iter_mut().zip(values.row(i)) {
            *a += p * f64::from(v);
        }
    }
    Ok(AttentionOutput {
        output: acc.into_iter().map(|v| v as f32).collect(),
        probs,
    })
}
