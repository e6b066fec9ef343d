//! Dense matrices and per-frame log-posterior grids.

use crate::error::{FdtError, Result};

/// Id reserved for the blank symbol in every grid and label sequence.
pub const BLANK: u32 = 0;

/// Tolerance on `|logsumexp(row)|` for a row to count as normalized.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

/// `log(exp(a) + exp(b))` without overflow.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// `log(sum(exp(v)))`; `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FdtError::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(FdtError::DimensionMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn add_at(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] += value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
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

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(FdtError::DimensionMismatch(format!(
                "{}x{} += {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Per-frame log distribution over `V` word pieces plus blank (column 0).
#[derive(Clone, Debug, PartialEq)]
pub struct LogPosteriorGrid {
    values: Matrix,
}

impl LogPosteriorGrid {
    /// Wraps a matrix whose rows must already be normalized log-distributions.
    pub fn new(values: Matrix) -> Result<Self> {
        let grid = Self::from_scores(values)?;
        for t in 0..grid.frames() {
            let log_sum = log_sum_exp(grid.row(t));
            if !(log_sum.abs() <= NORMALIZATION_TOLERANCE) {
                return Err(FdtError::NotNormalized { row: t, log_sum });
            }
        }
        Ok(grid)
    }

    /// Wraps arbitrary per-frame log scores without checking normalization.
    ///
    /// The lattice kernels never assume normalized rows, so this is the entry
    /// point for treating individual log-posterior entries as free variables.
    pub fn from_scores(values: Matrix) -> Result<Self> {
        if values.rows() == 0 {
            return Err(FdtError::DimensionMismatch("grid has no frames".into()));
        }
        if values.cols() < 2 {
            return Err(FdtError::DimensionMismatch("grid needs a blank and at least one piece".into()));
        }
        if values.as_slice().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(FdtError::Format("grid contains NaN or +inf".into()));
        }
        Ok(Self { values })
    }

    /// Row-wise log-softmax of unnormalized logits.
    pub fn from_logits(logits: &Matrix) -> Result<Self> {
        let mut values = logits.clone();
        for t in 0..values.rows() {
            let row = values.row_mut(t);
            let norm = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= norm;
            }
        }
        Self::from_scores(values)
    }

    /// Number of frames `T`.
    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    /// Number of non-blank pieces `V`.
    pub fn vocab_size(&self) -> usize {
        self.values.cols() - 1
    }

    /// `V + 1`.
    pub fn num_classes(&self) -> usize {
        self.values.cols()
    }

    #[inline]
    pub fn log_prob(&self, frame: usize, id: u32) -> f64 {
        self.values.get(frame, id as usize)
    }

    #[inline]
    pub fn row(&self, frame: usize) -> &[f64] {
        self.values.row(frame)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.values
    }

    pub fn into_matrix(self) -> Matrix {
        self.values
    }

    /// Frames `start..=end` (inclusive) as their own grid.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<LogPosteriorGrid> {
        if start > end || end >= self.frames() {
            return Err(FdtError::DimensionMismatch(format!(
                "frame span {start}..={end} outside {} frames",
                self.frames()
            )));
        }
        Ok(Self { values: self.values.slice_rows(start, end + 1) })
    }

    /// Posterior probabilities `exp(row)`.
    pub fn probs(&self) -> Matrix {
        let mut out = self.values.clone();
        for v in out.as_mut_slice() {
            *v = v.exp();
        }
        out
    }

    pub(crate) fn check_label(&self, labels: &[u32]) -> Result<()> {
        let max = self.vocab_size();
        for &id in labels {
            if id == BLANK || id as usize > max {
                return Err(FdtError::InvalidLabel { id, max });
            }
        }
        Ok(())
    }
}

/// Chains a gradient taken w.r.t. log-posterior entries through a row-wise
/// log-softmax, giving the gradient w.r.t. the underlying logits.
pub fn log_posterior_grad_to_logits(grid: &LogPosteriorGrid, grad_logp: &Matrix) -> Result<Matrix> {
    if grad_logp.rows() != grid.frames() || grad_logp.cols() != grid.num_classes() {
        return Err(FdtError::DimensionMismatch(format!(
            "gradient is {}x{}, grid is {}x{}",
            grad_logp.rows(),
            grad_logp.cols(),
            grid.frames(),
            grid.num_classes()
        )));
    }
    let mut out = grad_logp.clone();
    for t in 0..grid.frames() {
        let total: f64 = grad_logp.row(t).iter().sum();
        if total == 0.0 && grad_logp.row(t).iter().all(|g| *g == 0.0) {
            continue;
        }
        for (j, g) in out.row_mut(t).iter_mut().enumerate() {
            *g -= grid.row(t)[j].exp() * total;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_add_handles_infinities() {
        assert_eq!(log_add(f64::NEG_INFINITY, -1.0), -1.0);
        assert_eq!(log_add(f64::NEG_INFINITY, f64::NEG_INFINITY), f64::NEG_INFINITY);
        assert!((log_add(0.5f64.ln(), 0.5f64.ln())).abs() < 1e-15);
    }

    #[test]
    fn log_sum_exp_large_values() {
        let v = log_sum_exp(&[1234.0, 1232.0]);
        assert!((v - 1234.126928011042972).abs() < 1e-12);
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(LogPosteriorGrid::new(m), Err(FdtError::NotNormalized { .. })));
    }

    #[test]
    fn from_logits_normalizes() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.0, 0.0, 0.0]]).unwrap();
        let g = LogPosteriorGrid::from_logits(&m).unwrap();
        assert!(LogPosteriorGrid::new(g.matrix().clone()).is_ok());
        assert!((g.log_prob(1, 2) + 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logit_chain_rule_removes_row_mean_direction() {
        let m = Matrix::from_rows(&[vec![0.3, -0.2, 1.0]]).unwrap();
        let g = LogPosteriorGrid::from_logits(&m).unwrap();
        let grad = Matrix::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        let out = log_posterior_grad_to_logits(&g, &grad).unwrap();
        let sum: f64 = out.row(0).iter().sum();
        assert!(sum.abs() < 1e-12);
    }
}
