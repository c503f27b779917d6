use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
///
/// Every weight, activation and decomposition factor in the crate is carried
/// by this type. Products accumulate in a fixed order (ascending inner index)
/// so results are bit-reproducible across runs and platforms.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 36 {
            f.debug_list()
                .entries(self.data.chunks(self.cols.max(1)))
                .finish()?;
        }
        Ok(())
    }
}

/// `out += a · b` for row-major `a` (n×k) and `b` (k×m). Four output rows
/// share each pass over a row of `b`; every element still sums over `k` in
/// ascending order.
fn gemm_into(a: &[f64], k: usize, b: &[f64], m: usize, out: &mut [f64]) {
    if m == 0 || k == 0 {
        return;
    }
    let mut a_rows = a.chunks_exact(k);
    let mut blocks = out.chunks_exact_mut(4 * m);
    for block in &mut blocks {
        let (r0, rest) = block.split_at_mut(m);
        let (r1, rest) = rest.split_at_mut(m);
        let (r2, r3) = rest.split_at_mut(m);
        let (a0, a1, a2, a3) = (
            a_rows.next().unwrap(),
            a_rows.next().unwrap(),
            a_rows.next().unwrap(),
            a_rows.next().unwrap(),
        );
        for (kk, b_row) in b.chunks_exact(m).enumerate() {
            let (x0, x1, x2, x3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
            let (r0, r1, r2, r3) = (&mut r0[..m], &mut r1[..m], &mut r2[..m], &mut r3[..m]);
            for (j, &bj) in b_row[..m].iter().enumerate() {
                r0[j] += x0 * bj;
                r1[j] += x1 * bj;
                r2[j] += x2 * bj;
                r3[j] += x3 * bj;
            }
        }
    }
    for (row, a_row) in blocks.into_remainder().chunks_exact_mut(m).zip(a_rows) {
        for (&x, b_row) in a_row.iter().zip(b.chunks_exact(m)) {
            for (o, &bj) in row.iter_mut().zip(b_row) {
                *o += x * bj;
            }
        }
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting empty extents,
    /// length mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Argument(format!(
                "matrix extents must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite entry {} at ({}, {})",
                data[pos],
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Unchecked constructor for internal results whose shape is known.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_parts(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self::from_parts(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in diag.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_parts(rows, cols, data)
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape(
                "matmul",
                format!("{}x{} · {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        let mut out = vec![0.0; self.rows * rhs.cols];
        gemm_into(&self.data, self.cols, &rhs.data, rhs.cols, &mut out);
        Ok(Matrix::from_parts(self.rows, rhs.cols, out))
    }

    /// `self · rhsᵀ`.
    pub fn matmul_nt(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::shape(
                "matmul_nt",
                format!("{}x{} · ({}x{})ᵀ", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        self.matmul(&rhs.transpose())
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn matmul_tn(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::shape(
                "matmul_tn",
                format!("({}x{})ᵀ · {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        self.transpose().matmul(rhs)
    }

    fn check_same_shape(&self, rhs: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(
                op,
                format!("{}x{} vs {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        Ok(())
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_map(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_map(rhs, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_map(rhs, "hadamard", |a, b| a * b)
    }

    pub fn zip_map(
        &self,
        rhs: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        self.check_same_shape(rhs, op)?;
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix::from_parts(self.rows, self.cols, data))
    }

    pub fn add_assign(&mut self, rhs: &Matrix) -> Result<()> {
        self.check_same_shape(rhs, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub_assign(&mut self, rhs: &Matrix) -> Result<()> {
        self.check_same_shape(rhs, "sub_assign")?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a -= b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_parts(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference; panics on shape mismatch.
    pub fn max_abs_diff(&self, rhs: &Matrix) -> f64 {
        assert_eq!(self.shape(), rhs.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&rhs.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `‖self − rhs‖_F / max(‖rhs‖_F, tiny)`.
    pub fn rel_frobenius_diff(&self, rhs: &Matrix) -> f64 {
        assert_eq!(self.shape(), rhs.shape(), "rel_frobenius_diff shape mismatch");
        let diff: f64 = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        diff / rhs.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    /// Copies out the block `[r0, r0+nr) × [c0, c0+nc)`.
    pub fn block(&self, r0: usize, nr: usize, c0: usize, nc: usize) -> Matrix {
        assert!(r0 + nr <= self.rows && c0 + nc <= self.cols, "block out of range");
        let mut data = Vec::with_capacity(nr * nc);
        for i in r0..r0 + nr {
            data.extend_from_slice(&self.data[i * self.cols + c0..i * self.cols + c0 + nc]);
        }
        Matrix::from_parts(nr, nc, data)
    }
}
