//! Minimal dense row-major matrices over `f32`/`f64` with BLAS-style products.
//!
//! Everything the transformer needs reduces to `C += alpha * op(A) * op(B)` on
//! small matrices, so this module stays deliberately thin: a [`Scalar`] trait
//! that dispatches to `matrixmultiply`'s sgemm/dgemm, and a [`Mat`] container.

use std::fmt::Debug;

use num_traits::Float;

/// Floating-point element type usable by the model (`f32` for training, `f64`
/// for gradient checks).
pub trait Scalar:
    Float + Debug + Default + Send + Sync + std::iter::Sum + std::ops::AddAssign + std::ops::SubAssign + std::ops::MulAssign + 'static
{
    /// Raw strided GEMM: `C = alpha * A B + beta * C`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing (A/B vs C)
    /// matrices of the given dimensions.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64(v: f64) -> f32 {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn from_f64(v: f64) -> f64 {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// Copy of rows `[start, end)`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self::from_vec(end - start, self.cols, self.data[start * self.cols..end * self.cols].to_vec())
    }

    /// Copy of columns `[start, start + width)`.
    pub fn slice_cols(&self, start: usize, width: usize) -> Self {
        let mut out = Self::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    /// Writes `src` into columns `[start, start + src.cols)`.
    pub fn set_cols(&mut self, start: usize, src: &Mat<T>) {
        assert_eq!(src.rows, self.rows);
        for r in 0..self.rows {
            let cols = src.cols;
            self.row_mut(r)[start..start + cols].copy_from_slice(src.row(r));
        }
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

    pub fn add_assign(&mut self, other: &Mat<T>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Mat<U> {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect() }
    }

    pub fn max_abs_diff(&self, other: &Mat<T>) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).fold(0.0, f64::max)
    }
}

/// `C = alpha * op(A) * op(B) + beta * C` where `op` optionally transposes.
pub fn gemm<T: Scalar>(alpha: T, a: &Mat<T>, trans_a: bool, b: &Mat<T>, trans_b: bool, beta: T, c: &mut Mat<T>) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "inner dimensions differ");
    assert_eq!((c.rows, c.cols), (m, n), "output shape mismatch");
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: shapes checked above; `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// `op(A) * op(B)` into a fresh matrix.
pub fn matmul<T: Scalar>(a: &Mat<T>, trans_a: bool, b: &Mat<T>, trans_b: bool) -> Mat<T> {
    let m = if trans_a { a.cols } else { a.rows };
    let n = if trans_b { b.rows } else { b.cols };
    let mut c = Mat::zeros(m, n);
    gemm(T::one(), a, trans_a, b, trans_b, T::zero(), &mut c);
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
        let mut c = Mat::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for k in 0..a.cols {
                    s += a.at(i, k) * b.at(k, j);
                }
                c.data[i * b.cols + j] = s;
            }
        }
        c
    }

    #[test]
    fn transposed_products_match_naive() {
        let a = Mat::from_vec(3, 4, (0..12).map(|v| v as f64 * 0.5 - 2.0).collect());
        let b = Mat::from_vec(4, 2, (0..8).map(|v| (v as f64).sin()).collect());
        let expect = naive(&a, &b);
        assert!(matmul(&a, false, &b, false).max_abs_diff(&expect) < 1e-12);
        let at = a.transpose();
        let bt = b.transpose();
        assert!(matmul(&at, true, &b, false).max_abs_diff(&expect) < 1e-12);
        assert!(matmul(&a, false, &bt, true).max_abs_diff(&expect) < 1e-12);
        assert!(matmul(&at, true, &bt, true).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn column_slices_round_trip() {
        let a = Mat::from_vec(2, 6, (0..12).map(|v| v as f32).collect());
        let mid = a.slice_cols(2, 3);
        assert_eq!(mid.row(1), &[8.0, 9.0, 10.0]);
        let mut b = Mat::zeros(2, 6);
        b.set_cols(2, &mid);
        assert_eq!(b.at(1, 3), 9.0);
        assert_eq!(b.at(1, 0), 0.0);
    }
}
