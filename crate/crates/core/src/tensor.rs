//! Dense row-major tensors and the handful of kernels the model is built from.
//!
//! Everything is deliberately sequential with a fixed reduction order per
//! output element, so repeated runs produce bit-identical results. The same
//! kernels are instantiated at `f32` (the model's native precision) and `f64`
//! (the shadow path used by numerical checks).

use serde::{Deserialize, Serialize};

use crate::error::{KanacError, Result};

/// Scalar type the kernels are generic over. `f32` is the model's working
/// precision; `f64` exists for high-precision shadow evaluation.
pub trait Real:
    Copy
    + Default
    + PartialOrd
    + Send
    + Sync
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn from_usize(v: usize) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn powf(self, e: Self) -> Self;
    fn max_val(self, other: Self) -> Self;
    fn is_finite_val(self) -> bool;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline(always)]
            fn from_f32(v: f32) -> Self {
                v as $t
            }
            #[inline(always)]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline(always)]
            fn from_usize(v: usize) -> Self {
                v as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline(always)]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline(always)]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline(always)]
            fn sin(self) -> Self {
                self.sin()
            }
            #[inline(always)]
            fn cos(self) -> Self {
                self.cos()
            }
            #[inline(always)]
            fn powf(self, e: Self) -> Self {
                self.powf(e)
            }
            #[inline(always)]
            fn max_val(self, other: Self) -> Self {
                self.max(other)
            }
            #[inline(always)]
            fn is_finite_val(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// Dense row-major tensor of 32-bit reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(KanacError::domain(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix (first dim; 1 for vectors).
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Row width when viewed as a matrix (product of trailing dims).
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            self.shape.first().copied().unwrap_or(0)
        }
    }
}

/// Widen an `f32` slice into the working scalar type.
pub fn widen<R: Real>(src: &[f32]) -> Vec<R> {
    src.iter().map(|&v| R::from_f32(v)).collect()
}

/// out[m x n] = a[m x k] . b[k x n], overwriting `out`.
///
/// The inner loop walks rows of `b` (saxpy order) so both operands stream
/// sequentially; the per-element summation order over `k` is fixed.
pub fn matmul<R: Real>(out: &mut [R], a: &[R], b: &[R], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for (out_row, a_row) in out.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        out_row.fill(R::ZERO);
        for (&a_ik, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (o, &b_kj) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * b_kj;
            }
        }
    }
}

/// dx[m x k] += dy[m x n] . w^T, with w stored [k x n].
pub fn matmul_acc_bt<R: Real>(dx: &mut [R], dy: &[R], w: &[R], m: usize, k: usize, n: usize) {
    debug_assert_eq!(dx.len(), m * k);
    debug_assert_eq!(dy.len(), m * n);
    debug_assert_eq!(w.len(), k * n);
    for (dx_row, dy_row) in dx.chunks_exact_mut(k).zip(dy.chunks_exact(n)) {
        for (d, w_row) in dx_row.iter_mut().zip(w.chunks_exact(n)) {
            let mut acc = R::ZERO;
            for (&g, &wv) in dy_row.iter().zip(w_row) {
                acc += g * wv;
            }
            *d += acc;
        }
    }
}

/// dw[k x n] += x^T . dy, with x stored [m x k] and dy [m x n].
pub fn matmul_acc_at<R: Real>(dw: &mut [R], x: &[R], dy: &[R], m: usize, k: usize, n: usize) {
    debug_assert_eq!(dw.len(), k * n);
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(dy.len(), m * n);
    for (x_row, dy_row) in x.chunks_exact(k).zip(dy.chunks_exact(n)) {
        for (&x_ik, dw_row) in x_row.iter().zip(dw.chunks_exact_mut(n)) {
            for (d, &g) in dw_row.iter_mut().zip(dy_row) {
                *d += x_ik * g;
            }
        }
    }
}

/// RMS normalization of one row: y = x * inv * w with inv = 1/sqrt(mean(x^2) + eps).
/// Returns `inv` for the backward pass.
pub fn rmsnorm_row<R: Real>(out: &mut [R], x: &[R], weight: &[R], eps: R) -> R {
    let mut sum_sq = R::ZERO;
    for &v in x {
        sum_sq += v * v;
    }
    let inv = R::ONE / (sum_sq / R::from_usize(x.len()) + eps).sqrt();
    for ((o, &v), &w) in out.iter_mut().zip(x).zip(weight) {
        *o = v * inv * w;
    }
    inv
}

/// Gradient of `rmsnorm_row` with respect to its input, accumulated into `dx`.
/// `dy` is the gradient at the output, `x` the original input, `inv` the
/// saved reciprocal RMS, `weight` the scale vector.
pub fn rmsnorm_row_backward<R: Real>(
    dx: &mut [R],
    dweight: &mut [R],
    dy: &[R],
    x: &[R],
    weight: &[R],
    inv: R,
) {
    let n = R::from_usize(x.len());
    let mut dot = R::ZERO;
    for ((&g, &w), &v) in dy.iter().zip(weight).zip(x) {
        dot += g * w * v;
    }
    let coef = inv * inv * inv / n * dot;
    for (((d, &g), &w), &v) in dx.iter_mut().zip(dy).zip(weight).zip(x) {
        *d += g * w * inv - coef * v;
    }
    for ((dw, &g), &v) in dweight.iter_mut().zip(dy).zip(x) {
        *dw += g * v * inv;
    }
}

/// Rotary position encoding applied in place to one head vector.
/// Adjacent element pairs (2j, 2j+1) are rotated by pos * base^(-2j/head_dim);
/// a trailing odd element is left untouched.
pub fn rope_rotate<R: Real>(head: &mut [R], pos: usize, base: R, inverse: bool) {
    let head_dim = head.len();
    let pairs = head_dim / 2;
    for j in 0..pairs {
        let exponent = R::from_usize(2 * j) / R::from_usize(head_dim);
        let theta = base.powf(-exponent) * R::from_usize(pos);
        let (sin, cos) = (theta.sin(), theta.cos());
        let sin = if inverse { -sin } else { sin };
        let x0 = head[2 * j];
        let x1 = head[2 * j + 1];
        head[2 * j] = x0 * cos - x1 * sin;
        head[2 * j + 1] = x0 * sin + x1 * cos;
    }
}

/// Numerically-stable softmax over one row, in place.
pub fn softmax_row<R: Real>(row: &mut [R]) {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.max_val(v);
    }
    let mut sum = R::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = R::ONE / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// log(sum(exp(row))) without shifting the inputs out of their scale.
pub fn log_sum_exp<R: Real>(row: &[R]) -> R {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.max_val(v);
    }
    let mut sum = R::ZERO;
    for &v in row {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

#[inline(always)]
pub fn silu<R: Real>(x: R) -> R {
    x / (R::ONE + (-x).exp())
}

/// d/dx silu(x) = sigmoid(x) * (1 + x * (1 - sigmoid(x))).
#[inline(always)]
pub fn silu_derivative<R: Real>(x: R) -> R {
    let sig = R::ONE / (R::ONE + (-x).exp());
    sig * (R::ONE + x * (R::ONE - sig))
}
