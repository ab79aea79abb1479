use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::pruning::Mask;

/// Compressed sparse row matrix.
///
/// `row_ptr[r]..row_ptr[r + 1]` indexes the entries of row `r` in `col_idx`
/// and `values`. Column indices are strictly increasing within a row and no
/// explicit zeros are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<T: Scalar = f32> {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<T>,
}

impl<T: Scalar> CsrMatrix<T> {
    /// Stores the non-zero entries of a 2-D tensor that the mask keeps.
    pub fn from_masked(dense: &Tensor<T>, mask: Option<&Mask>) -> Result<Self> {
        if dense.rank() != 2 {
            return Err(Error::Shape {
                op: "to_csr",
                left: dense.shape().to_vec(),
                right: vec![],
            });
        }
        if let Some(m) = mask {
            if m.shape() != dense.shape() {
                return Err(Error::Shape {
                    op: "to_csr",
                    left: dense.shape().to_vec(),
                    right: m.shape().to_vec(),
                });
            }
        }
        let (rows, cols) = (dense.shape()[0], dense.shape()[1]);
        Ok(Self::from_fn(rows, cols, |i| {
            let keep = mask.is_none_or(|m| m.keep()[i]);
            let v = dense.data()[i];
            (keep && v != T::zero()).then_some(v)
        }))
    }

    /// Like [`CsrMatrix::from_masked`] but stores the transpose, so that
    /// `x · W` becomes a row-wise sparse mat-vec with the result.
    pub fn from_masked_transposed(dense: &Tensor<T>, mask: Option<&Mask>) -> Result<Self> {
        let csr = Self::from_masked(dense, mask)?;
        Ok(csr.transpose())
    }

    fn from_fn(rows: usize, cols: usize, entry: impl Fn(usize) -> Option<T>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for r in 0..rows {
            for c in 0..cols {
                if let Some(v) = entry(r * cols + c) {
                    col_idx.push(c as u32);
                    values.push(v);
                }
            }
            row_ptr.push(values.len());
        }
        CsrMatrix {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[u32] {
        &self.col_idx
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Entries `(col, value)` of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .zip(&self.values[span])
            .map(|(&c, &v)| (c as usize, v))
    }

    pub fn to_dense(&self) -> Tensor<T> {
        let mut out = Tensor::zeros(&[self.rows, self.cols]);
        let data = out.data_mut();
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                data[r * self.cols + c] = v;
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.col_idx {
            counts[c as usize + 1] += 1;
        }
        for i in 0..self.cols {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0u32; self.nnz()];
        let mut values = vec![T::zero(); self.nnz()];
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                let slot = next[c];
                col_idx[slot] = r as u32;
                values[slot] = v;
                next[c] += 1;
            }
        }
        CsrMatrix {
            rows: self.cols,
            cols: self.rows,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// `y = M x`.
    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return Err(Error::Shape {
                op: "csr_matvec",
                left: vec![self.rows, self.cols],
                right: vec![x.len()],
            });
        }
        let mut y = vec![T::zero(); self.rows];
        self.matvec_into(x, &mut y);
        Ok(y)
    }

    /// `y = M x` without shape checks; `x.len() == cols`, `y.len() == rows`.
    pub(crate) fn matvec_into(&self, x: &[T], y: &mut [T]) {
        for (r, out) in y.iter_mut().enumerate() {
            let (start, end) = (self.row_ptr[r], self.row_ptr[r + 1]);
            let mut acc = T::zero();
            for (&c, &v) in self.col_idx[start..end].iter().zip(&self.values[start..end]) {
                acc += v * x[c as usize];
            }
            *out = acc;
        }
    }

    /// `dx += Mᵀ dy`.
    pub(crate) fn matvec_transpose_acc(&self, dy: &[T], dx: &mut [T]) {
        for (r, &g) in dy.iter().enumerate() {
            for (c, v) in self.row(r) {
                dx[c] += v * g;
            }
        }
    }

    /// `M · X` for a dense `[cols, n]` right-hand side.
    pub fn matmul(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 2 || x.shape()[0] != self.cols {
            return Err(Error::Shape {
                op: "csr_matmul",
                left: vec![self.rows, self.cols],
                right: x.shape().to_vec(),
            });
        }
        let n = x.shape()[1];
        let mut out = vec![T::zero(); self.rows * n];
        let xd = x.data();
        for r in 0..self.rows {
            let orow = &mut out[r * n..(r + 1) * n];
            for (c, v) in self.row(r) {
                for (o, &xv) in orow.iter_mut().zip(&xd[c * n..(c + 1) * n]) {
                    *o += v * xv;
                }
            }
        }
        Tensor::new(vec![self.rows, n], out)
    }

    /// Checks the structural invariants; used by tests and after loading.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Invalid(format!("csr: {msg}")));
        if self.row_ptr.len() != self.rows + 1 || self.row_ptr[0] != 0 {
            return bad("row_ptr length or origin");
        }
        if *self.row_ptr.last().unwrap() != self.nnz() || self.col_idx.len() != self.nnz() {
            return bad("row_ptr end does not match nnz");
        }
        for r in 0..self.rows {
            let (s, e) = (self.row_ptr[r], self.row_ptr[r + 1]);
            if s > e {
                return bad("row_ptr decreasing");
            }
            let cols = &self.col_idx[s..e];
            if cols.windows(2).any(|w| w[0] >= w[1]) || cols.iter().any(|&c| c as usize >= self.cols) {
                return bad("column indices not strictly increasing");
            }
        }
        if self.values.iter().any(|&v| v == T::zero()) {
            return bad("explicit zero stored");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_matrix_has_no_entries() {
        let m = CsrMatrix::from_masked(&Tensor::<f32>::zeros(&[3, 4]), None).unwrap();
        assert_eq!(m.nnz(), 0);
        assert_eq!(m.row_ptr(), &[0, 0, 0, 0]);
        m.validate().unwrap();
    }

    #[test]
    fn identity_layout() {
        let mut eye = Tensor::<f32>::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 4 + i] = 1.0;
        }
        let m = CsrMatrix::from_masked(&eye, None).unwrap();
        assert_eq!(m.nnz(), 4);
        assert_eq!(m.col_idx(), &[0, 1, 2, 3]);
        assert_eq!(m.matvec(&[1.0, -2.0, 3.5, 0.25]).unwrap(), vec![1.0, -2.0, 3.5, 0.25]);
    }

    #[test]
    fn single_entry_matvec() {
        let mut t = Tensor::<f32>::zeros(&[3, 5]);
        t.data_mut()[1 * 5 + 3] = 2.5;
        let m = CsrMatrix::from_masked(&t, None).unwrap();
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(m.matvec(&x).unwrap(), vec![0.0, 10.0, 0.0]);
    }

    #[test]
    fn mask_drops_entries() {
        let t = Tensor::<f32>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let mask = Mask::new(vec![2, 2], vec![true, false, false, true]);
        let m = CsrMatrix::from_masked(&t, Some(&mask)).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.to_dense().data(), &[1.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn transpose_matches_dense() {
        let t = Tensor::<f32>::from_rows(&[&[1.0, 0.0, 2.0], &[0.0, 3.0, 0.0]]).unwrap();
        let m = CsrMatrix::from_masked(&t, None).unwrap().transpose();
        m.validate().unwrap();
        assert_eq!(m.to_dense().data(), &[1.0, 0.0, 0.0, 3.0, 2.0, 0.0]);
    }

    #[test]
    fn shape_errors() {
        let m = CsrMatrix::from_masked(&Tensor::<f32>::zeros(&[2, 3]), None).unwrap();
        assert!(m.matvec(&[1.0; 2]).is_err());
        assert!(m.matmul(&Tensor::zeros(&[2, 2])).is_err());
    }
}
