//! Dense row-major kernels used by the transformer.
//!
//! Matrix products go through `matrixmultiply`, which accepts arbitrary
//! strides, so per-head column blocks and transposes are plain views.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type of the model. Training runs in `f32`; the
/// same code instantiated at `f64` backs numerical gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` over raw strided storage.
    ///
    /// # Safety
    /// Pointers and strides must address valid, non-overlapping storage for
    /// the stated shapes.
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

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Read-only strided matrix view.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> View<'a, T> {
    /// Row-major `rows x cols` matrix.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            assert!(
                (rows - 1) * rs + (cols - 1) * cs < data.len(),
                "view out of bounds"
            );
        }
        View {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    /// Columns `start..start + width` of a row-major matrix with `ld` columns.
    pub fn cols_of(data: &'a [T], rows: usize, ld: usize, start: usize, width: usize) -> Self {
        Self::strided(&data[start..], rows, width, ld, 1)
    }

    pub fn t(self) -> Self {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// Mutable strided matrix view.
pub struct ViewMut<'a, T> {
    data: &'a mut [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> ViewMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a mut [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            assert!(
                (rows - 1) * rs + (cols - 1) * cs < data.len(),
                "view out of bounds"
            );
        }
        ViewMut {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    pub fn cols_of(data: &'a mut [T], rows: usize, ld: usize, start: usize, width: usize) -> Self {
        Self::strided(&mut data[start..], rows, width, ld, 1)
    }
}

/// `c = alpha * a * b + beta * c`.
pub fn gemm<T: Scalar>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output shape mismatch");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: view constructors bounds-checked every addressed element and
    // `c` is uniquely borrowed.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        )
    }
}

/// Row-major `out = x * w + bias` for `x: rows x k`, `w: k x n`.
pub fn linear<T: Scalar>(
    x: &[T],
    rows: usize,
    k: usize,
    w: &[T],
    bias: &[T],
    n: usize,
    out: &mut [T],
) {
    for row in out.chunks_exact_mut(n) {
        row.copy_from_slice(bias);
    }
    gemm(
        T::one(),
        View::new(x, rows, k),
        View::new(w, k, n),
        T::one(),
        ViewMut::new(out, rows, n),
    );
}

/// Layer normalization over rows of width `d`; stores per-row mean and
/// reciprocal standard deviation for the backward pass.
pub fn layer_norm<T: Scalar>(
    x: &[T],
    d: usize,
    gamma: &[T],
    beta: &[T],
    out: &mut [T],
    mean: &mut [T],
    rstd: &mut [T],
) {
    let eps = T::lit(1e-5);
    let inv_d = T::one() / T::from_usize(d).unwrap();
    for (r, (xr, or)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let m = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - m) * (v - m)).sum::<T>() * inv_d;
        let s = T::one() / (var + eps).sqrt();
        for i in 0..d {
            or[i] = (xr[i] - m) * s * gamma[i] + beta[i];
        }
        mean[r] = m;
        rstd[r] = s;
    }
}

/// Backward of [`layer_norm`]: accumulates into `dx`, `dgamma`, `dbeta`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    dout: &[T],
    x: &[T],
    d: usize,
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
    dx: &mut [T],
    mut dgamma: Option<(&mut [T], &mut [T])>,
) {
    let inv_d = T::one() / T::from_usize(d).unwrap();
    for (r, ((dor, xr), dxr)) in dout
        .chunks_exact(d)
        .zip(x.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        let (m, s) = (mean[r], rstd[r]);
        let mut sum_dn = T::zero();
        let mut sum_dn_n = T::zero();
        for i in 0..d {
            let n = (xr[i] - m) * s;
            let dn = dor[i] * gamma[i];
            sum_dn += dn;
            sum_dn_n += dn * n;
            if let Some((dg, db)) = dgamma.as_mut() {
                dg[i] += dor[i] * n;
                db[i] += dor[i];
            }
        }
        let mean_dn = sum_dn * inv_d;
        let mean_dn_n = sum_dn_n * inv_d;
        for i in 0..d {
            let n = (xr[i] - m) * s;
            let dn = dor[i] * gamma[i];
            dxr[i] += (dn - mean_dn - n * mean_dn_n) * s;
        }
    }
}

pub fn relu<T: Scalar>(x: T) -> T {
    x.max(T::zero())
}

/// Numerically stable softmax written in place.
pub fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// `log(sum(exp(xs)))`.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    max + xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Adds each row of `x` (`rows x n`) into `acc` (length `n`).
pub fn add_col_sums<T: Scalar>(x: &[T], n: usize, acc: &mut [T]) {
    for row in x.chunks_exact(n) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_with_transposed_views() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0f64; 4];
        gemm(
            1.0,
            View::new(&a, 2, 3),
            View::new(&b, 3, 2),
            0.0,
            ViewMut::new(&mut c, 2, 2),
        );
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // a^T a, 3x3
        let mut d = [0.0f64; 9];
        gemm(
            1.0,
            View::new(&a, 2, 3).t(),
            View::new(&a, 2, 3),
            0.0,
            ViewMut::new(&mut d, 3, 3),
        );
        assert_eq!(d, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }

    #[test]
    fn column_block_views() {
        // 2x4 matrix, take columns 1..3
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let id = [1.0f32, 0.0, 0.0, 1.0];
        let mut c = [0.0f32; 4];
        gemm(
            1.0,
            View::cols_of(&a, 2, 4, 1, 2),
            View::new(&id, 2, 2),
            0.0,
            ViewMut::new(&mut c, 2, 2),
        );
        assert_eq!(c, [2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.0f32, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0]), 1);
    }

    #[test]
    fn layer_norm_backward_matches_differences() {
        let x: Vec<f64> = vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.4, 0.9, 1.7];
        let gamma = vec![1.1, 0.9, -0.5, 1.3];
        let beta = vec![0.0; 4];
        let w: Vec<f64> = vec![0.2, -0.7, 1.5, 0.3, -1.1, 0.6, 0.4, 0.8];
        let loss = |x: &[f64]| {
            let mut out = vec![0.0; 8];
            let (mut m, mut s) = (vec![0.0; 2], vec![0.0; 2]);
            layer_norm(x, 4, &gamma, &beta, &mut out, &mut m, &mut s);
            out.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut out = vec![0.0; 8];
        let (mut m, mut s) = (vec![0.0; 2], vec![0.0; 2]);
        layer_norm(&x, 4, &gamma, &beta, &mut out, &mut m, &mut s);
        let mut dx = vec![0.0; 8];
        layer_norm_backward(&w, &x, 4, &gamma, &m, &s, &mut dx, None);
        for i in 0..8 {
            let mut xp = x.clone();
            xp[i] += 1e-6;
            let mut xm = x.clone();
            xm[i] -= 1e-6;
            let fd = (loss(&xp) - loss(&xm)) / 2e-6;
            assert!(
                (fd - dx[i]).abs() < 1e-6,
                "coordinate {i}: {fd} vs {}",
                dx[i]
            );
        }
    }
}
