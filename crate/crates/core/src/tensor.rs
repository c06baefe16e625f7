//! Row-major matrices and strided views over them.
//!
//! Only what the transformer needs: owned matrices, transposable/sliceable
//! views, and a bounds-checked GEMM entry point.

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn view(&self) -> View<'_, S> {
        View::new(&self.data, self.rows, self.cols)
    }

    pub fn view_mut(&mut self) -> ViewMut<'_, S> {
        ViewMut::new(&mut self.data, self.rows, self.cols)
    }

    pub fn add_assign(&mut self, other: &Mat<S>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Copies rows `start..start + n` into a new matrix.
    pub fn slice_rows(&self, start: usize, n: usize) -> Mat<S> {
        Mat::from_vec(n, self.cols, self.data[start * self.cols..(start + n) * self.cols].to_vec())
    }
}

/// Immutable strided 2-D view.
#[derive(Debug, Clone, Copy)]
pub struct View<'a, S> {
    data: &'a [S],
    offset: usize,
    pub rows: usize,
    pub cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, S: Scalar> View<'a, S> {
    /// Dense row-major view.
    pub fn new(data: &'a [S], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "view exceeds storage");
        Self { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    /// Column block `start..start + n`.
    pub fn cols(self, start: usize, n: usize) -> Self {
        assert!(start + n <= self.cols);
        Self { offset: self.offset + start * self.cs, cols: n, ..self }
    }

    /// Row block `start..start + n`.
    pub fn rows(self, start: usize, n: usize) -> Self {
        assert!(start + n <= self.rows);
        Self { offset: self.offset + start * self.rs, rows: n, ..self }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[self.offset + r * self.rs + c * self.cs]
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "view out of bounds");
        }
    }

    pub fn to_mat(&self) -> Mat<S> {
        let mut out = Mat::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[r * self.cols + c] = self.at(r, c);
            }
        }
        out
    }
}

/// Mutable strided 2-D view.
#[derive(Debug)]
pub struct ViewMut<'a, S> {
    data: &'a mut [S],
    offset: usize,
    pub rows: usize,
    pub cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, S: Scalar> ViewMut<'a, S> {
    pub fn new(data: &'a mut [S], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "view exceeds storage");
        Self { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn cols(self, start: usize, n: usize) -> Self {
        assert!(start + n <= self.cols);
        Self { offset: self.offset + start * self.cs, cols: n, ..self }
    }

    pub fn rows(self, start: usize, n: usize) -> Self {
        assert!(start + n <= self.rows);
        Self { offset: self.offset + start * self.rs, rows: n, ..self }
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "view out of bounds");
        }
    }
}

/// `c <- alpha * a b + beta * c`.
pub fn gemm<S: Scalar>(alpha: S, a: View<'_, S>, b: View<'_, S>, beta: S, c: ViewMut<'_, S>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "gemm output shape mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    a.check();
    b.check();
    c.check();
    if k == 0 {
        for r in 0..m {
            for col in 0..n {
                let i = c.offset + r * c.rs + col * c.cs;
                c.data[i] = if beta == S::zero() { S::zero() } else { c.data[i] * beta };
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked above against their backing
    // slices, and `c` is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        S::gemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Allocating product `a b`.
pub fn matmul<S: Scalar>(a: View<'_, S>, b: View<'_, S>) -> Mat<S> {
    let mut out = Mat::zeros(a.rows, b.cols);
    gemm(S::one(), a, b, S::zero(), out.view_mut());
    out
}

/// In-place numerically stable softmax over each row's first `valid` entries
/// (the rest are set to zero).
pub fn softmax_row<S: Scalar>(row: &mut [S], valid: impl Fn(usize) -> bool) {
    let mut max = S::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if valid(j) && v > max {
            max = v;
        }
    }
    if max == S::neg_infinity() {
        row.iter_mut().for_each(|v| *v = S::zero());
        return;
    }
    let mut sum = S::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if valid(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = S::zero();
        }
    }
    let inv = S::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
        let mut out = Mat::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for k in 0..a.cols {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.data[i * b.cols + j] = s;
            }
        }
        out
    }

    fn assert_close(a: &Mat<f64>, b: &Mat<f64>) {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols));
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn gemm_matches_naive_including_transposes_and_blocks() {
        let a = Mat::from_vec(3, 4, (0..12).map(|v| v as f64 * 0.5 - 2.0).collect());
        let b = Mat::from_vec(4, 2, (0..8).map(|v| (v as f64).sin()).collect());
        assert_close(&matmul(a.view(), b.view()), &naive(&a, &b));

        let bt = b.view().t().to_mat();
        let via_t = matmul(a.view(), bt.view().t());
        assert_close(&via_t, &naive(&a, &b));

        // column block of a times row block of b
        let blk = matmul(a.view().cols(1, 2), b.view().rows(1, 2));
        let a2 = a.view().cols(1, 2).to_mat();
        let b2 = b.view().rows(1, 2).to_mat();
        assert_close(&blk, &naive(&a2, &b2));
    }

    #[test]
    fn gemm_accumulates_with_beta() {
        let a = Mat::from_vec(2, 2, vec![1.0f32, 2.0, 3.0, 4.0]);
        let mut c = Mat::from_vec(2, 2, vec![1.0f32; 4]);
        gemm(1.0, a.view(), a.view(), 1.0, c.view_mut());
        assert_eq!(c.data, vec![8.0, 11.0, 16.0, 23.0]);
    }

    #[test]
    fn softmax_masks_invalid_entries() {
        let mut row = vec![1.0f64, 2.0, 3.0];
        softmax_row(&mut row, |j| j != 2);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(row[2], 0.0);
        assert!(row[1] > row[0]);
    }
}
