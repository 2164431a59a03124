//! Dense kernels shared by the encoder: a strided GEMM over `f32`/`f64`
//! (backed by `matrixmultiply`) and a few row-wise helpers.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of encoder tensors. Training runs in `f32`;
/// gradient checks run the identical code in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `C <- alpha * A B + beta * C` with arbitrary element strides.
    ///
    /// # Safety
    /// Every index reachable through the given shape and strides must be
    /// inside the respective slice; [`gemm`] checks this before calling.
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

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
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
}

/// A strided matrix view: `(slice, offset, row stride, column stride)`.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    /// Row-major `rows x cols` matrix.
    pub fn rm(data: &'a [T], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub fn rm_t(data: &'a [T], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rs: 1,
            cs: cols,
        }
    }

    pub fn at(data: &'a [T], offset: usize, rs: usize, cs: usize) -> Self {
        Self { data, offset, rs, cs }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `C[m x n] <- A[m x k] B[k x n] + beta * C`, with C described by
/// `(c_offset, rsc, csc)` inside `c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: &mut [T],
    c_offset: usize,
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c_offset + (m - 1) * rsc + (n - 1) * csc < c.len());
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[c_offset + i * rsc + j * csc];
                *v = beta * *v;
            }
        }
        return;
    }
    assert!(a.last_index(m, k) < a.data.len());
    assert!(b.last_index(k, n) < b.data.len());
    // SAFETY: bounds of all three operands were checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Row-major `C[m x n] (+)= A[m x k] B[k x n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, acc: bool) {
    let beta = if acc { T::one() } else { T::zero() };
    gemm(m, k, n, View::rm(a, k), View::rm(b, n), beta, c, 0, n, 1);
}

/// Row-major `C[k x n] += A[m x k]^T B[m x n]` (weight-gradient shape).
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    gemm(k, m, n, View::rm_t(a, k), View::rm(b, n), T::one(), c, 0, n, 1);
}

/// Row-major `C[m x k] (+)= A[m x n] B[k x n]^T` (input-gradient shape).
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize, acc: bool) {
    let beta = if acc { T::one() } else { T::zero() };
    gemm(m, n, k, View::rm(a, n), View::rm_t(b, n), beta, c, 0, k, 1);
}

pub fn add_row_bias<T: Scalar>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

pub fn col_sum_acc<T: Scalar>(x: &[T], out: &mut [T]) {
    for row in x.chunks_exact(out.len()) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += *v;
        }
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// `ln(sum(exp(row)))` computed around the row maximum.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let want = naive(&a, &b, m, k, n);
        let mut c = vec![0.0; m * n];
        matmul(&a, &b, &mut c, m, k, n, false);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));

        // A^T B with A stored as [k x m] equals naive(A^T, B)
        let at: Vec<f64> = (0..k * m).map(|i| (i as f64).cos()).collect();
        let mut a_t = vec![0.0; m * k];
        for i in 0..k {
            for j in 0..m {
                a_t[j * k + i] = at[i * m + j];
            }
        }
        let want = naive(&a_t, &b, m, k, n);
        let mut c = vec![1.0; m * n];
        matmul_tn_acc(&at, &b, &mut c, k, m, n);
        assert!(c.iter().zip(&want).all(|(x, y)| (x - 1.0 - y).abs() < 1e-12));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut row = vec![1e4f64, 0.0, -1e4];
        softmax_in_place(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|v| v.is_finite()));
        assert!((log_sum_exp(&[1e4f64, 1e4]) - (1e4 + 2f64.ln())).abs() < 1e-9);
    }
}
