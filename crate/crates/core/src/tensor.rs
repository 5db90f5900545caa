//! Dense row-major kernels shared by the model's forward and backward passes.
//!
//! Everything here works on plain slices. Matrix products go through
//! `matrixmultiply`, which takes arbitrary row/column strides, so transposed
//! and per-head views never need a copy.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Floating-point element type of a model. Production code uses `f32`; the
/// gradient-check oracle instantiates the same model with `f64`.
pub trait Scalar:
    Float + FromPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    /// # Safety
    /// Caller guarantees every strided index stays in bounds of the pointees.
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

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion")
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

/// A strided 2-D view description: `offset + r * row_stride + c * col_stride`.
#[derive(Debug, Clone, Copy)]
pub struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl View {
    /// Contiguous row-major matrix.
    pub fn dense(rows: usize, cols: usize) -> Self {
        View { offset: 0, rows, cols, row_stride: cols, col_stride: 1 }
    }

    /// Column block `[col0, col0 + width)` of a row-major matrix with `ld` columns.
    pub fn cols_of(rows: usize, ld: usize, col0: usize, width: usize) -> Self {
        View { offset: col0, rows, cols: width, row_stride: ld, col_stride: 1 }
    }

    pub fn t(self) -> Self {
        View {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `c = alpha * a·b + beta * c` over strided views, bounds-checked.
pub fn gemm<T: Scalar>(
    alpha: T,
    a: &[T],
    av: View,
    b: &[T],
    bv: View,
    beta: T,
    c: &mut [T],
    cv: View,
) {
    assert_eq!(av.cols, bv.rows, "inner dimension mismatch");
    assert_eq!(av.rows, cv.rows, "row mismatch");
    assert_eq!(bv.cols, cv.cols, "column mismatch");
    let (m, k, n) = (av.rows, av.cols, bv.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for r in 0..m {
            for col in 0..n {
                let i = cv.offset + r * cv.row_stride + col * cv.col_stride;
                c[i] = c[i] * beta;
            }
        }
        return;
    }
    assert!(av.last_index() < a.len(), "a view out of bounds");
    assert!(bv.last_index() < b.len(), "b view out of bounds");
    assert!(cv.last_index() < c.len(), "c view out of bounds");
    // SAFETY: all three views were bounds-checked above and `c` is uniquely borrowed.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}

/// `out (m×n) = a (m×k) · b (k×n)`, all dense.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    gemm(T::one(), a, View::dense(m, k), b, View::dense(k, n), T::zero(), out, View::dense(m, n));
}

/// `out (m×n) += a (m×k) · bᵀ` where `b` is stored `n×k`.
pub fn matmul_bt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    gemm(
        T::one(),
        a,
        View::dense(m, k),
        b,
        View::dense(n, k).t(),
        T::one(),
        out,
        View::dense(m, n),
    );
}

/// `out (k×n) += aᵀ · b` where `a` is `m×k` and `b` is `m×n`.
pub fn matmul_at_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    gemm(
        T::one(),
        a,
        View::dense(m, k).t(),
        b,
        View::dense(m, n),
        T::one(),
        out,
        View::dense(k, n),
    );
}

pub fn add_row_bias<T: Scalar>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v = *v + *b;
        }
    }
}

pub fn col_sum_acc<T: Scalar>(x: &[T], out: &mut [T]) {
    for row in x.chunks_exact(out.len()) {
        for (o, v) in out.iter_mut().zip(row) {
            *o = *o + *v;
        }
    }
}

pub fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Per-row layer norm. Writes normalized rows into `xhat`, the affine output into
/// `out`, and the reciprocal standard deviation per row into `rstd`.
pub fn layer_norm<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    out: &mut [T],
    xhat: &mut [T],
    rstd: &mut [T],
) {
    let d = gamma.len();
    let eps = T::from_f64_lossy(LN_EPS);
    let inv_d = T::one() / T::from_usize(d).unwrap();
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let base = r * d;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[base + c] = h;
            out[base + c] = h * gamma[c] + beta[c];
        }
    }
}

/// Backward of [`layer_norm`]; accumulates into `dx`, `dgamma`, `dbeta`.
pub fn layer_norm_backward<T: Scalar>(
    dout: &[T],
    xhat: &[T],
    rstd: &[T],
    gamma: &[T],
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let d = gamma.len();
    let inv_d = T::one() / T::from_usize(d).unwrap();
    for r in 0..rstd.len() {
        let base = r * d;
        let mut sum_dh = T::zero();
        let mut sum_dh_xhat = T::zero();
        for c in 0..d {
            let g = dout[base + c];
            dgamma[c] = dgamma[c] + g * xhat[base + c];
            dbeta[c] = dbeta[c] + g;
            let dh = g * gamma[c];
            sum_dh = sum_dh + dh;
            sum_dh_xhat = sum_dh_xhat + dh * xhat[base + c];
        }
        for c in 0..d {
            let dh = dout[base + c] * gamma[c];
            dx[base + c] = dx[base + c]
                + rstd[r] * (dh - inv_d * sum_dh - xhat[base + c] * inv_d * sum_dh_xhat);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(GELU_A);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

/// In-place numerically stable softmax over one row. Entries equal to
/// `-inf` receive probability zero.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// `log(sum(exp(row)))`, stable.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}
