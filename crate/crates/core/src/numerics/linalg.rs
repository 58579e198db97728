/// Borrowed strided matrix view for [`gemm`].
#[derive(Clone, Copy, Debug)]
pub(crate) struct Mat<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> Mat<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { data, rows, cols, rs: cols as isize, cs: 1 }
    }

    /// Transposed view; no copy.
    pub fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }
}

/// `out = a · b + beta · out`, `out` row-major.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, out: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    assert_eq!(out.len(), a.rows * b.cols, "gemm output size");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the views were built from slices whose lengths cover every
    // index reachable from the given dims and strides, and `out` has exactly
    // `a.rows * b.cols` elements laid out row-major.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 - 2.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sqrt()).collect(); // 3x4
        let mut out = vec![0.0; 8];
        gemm(Mat::row_major(&a, 2, 3), Mat::row_major(&b, 3, 4), &mut out, 0.0);
        for i in 0..2 {
            for j in 0..4 {
                let naive: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert!((out[i * 4 + j] - naive).abs() < 1e-12);
            }
        }
        // (b^T a^T)^T == a b
        let mut out_t = vec![0.0; 8];
        gemm(Mat::row_major(&b, 3, 4).t(), Mat::row_major(&a, 2, 3).t(), &mut out_t, 0.0);
        for i in 0..2 {
            for j in 0..4 {
                assert!((out_t[j * 2 + i] - out[i * 4 + j]).abs() < 1e-12);
            }
        }
    }
}
