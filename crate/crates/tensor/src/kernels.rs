//! Plain slice kernels shared by the graph ops and by callers that need the
//! same arithmetic outside a graph (prompt lookup, evaluation).

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// Norm below which a vector is treated as zero by [`cosine_distance`].
pub const MIN_NORM: f64 = 1e-12;

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn max_offset(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs
    }
}

/// `c[m×n] = a[m×k]·b[k×n] + beta·c` where `a` and `b` are strided views
/// (row stride, column stride) and `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_strides: (usize, usize),
    b: &[T],
    b_strides: (usize, usize),
    beta: T,
    c: &mut [T],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v = *v * beta);
        return;
    }
    assert!(max_offset(m, k, a_strides) < a.len(), "gemm lhs out of bounds");
    assert!(max_offset(k, n, b_strides) < b.len(), "gemm rhs out of bounds");
    T::gemm_raw(m, k, n, a, a_strides, b, b_strides, beta, &mut c[..m * n]);
}

pub fn dot<T: Scalar>(u: &[T], v: &[T]) -> T {
    u.iter().zip(v).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
}

pub fn norm<T: Scalar>(u: &[T]) -> T {
    dot(u, u).sqrt()
}

/// `1 − u·v / (‖u‖‖v‖)`, in [0, 2].
pub fn cosine_distance<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(TensorError::Dimension {
            op: "cosine_distance",
            lhs: vec![u.len()].into(),
            rhs: vec![v.len()].into(),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu.as_f64() <= MIN_NORM || nv.as_f64() <= MIN_NORM {
        return Err(TensorError::Degenerate(format!(
            "cosine distance of a zero-norm vector (norms {nu}, {nv})"
        )));
    }
    Ok(T::one() - dot(u, v) / (nu * nv))
}

/// Max-stabilized softmax of one contiguous row, written into `out`.
pub fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// `log Σ exp(row)`, max-stabilized.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + total.ln()
}

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_SQRT_2_OVER_PI);
    let inner = c * (x + T::of(GELU_CUBIC) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_SQRT_2_OVER_PI);
    let a = T::of(GELU_CUBIC);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// Index of the largest entry; first one wins on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposed_views() {
        // a = [[1,2],[3,4]], read transposed.
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [1.0f64, 0.0, 0.0, 1.0];
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, &a, (1, 2), &b, (2, 1), 0.0, &mut c);
        assert_eq!(c, [1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut out = [0.0f32; 2];
        softmax_row(&[1000.0f32, 0.0], &mut out);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!((out[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cosine_rejects_zero_vectors() {
        assert!(matches!(
            cosine_distance(&[0.0f64, 0.0], &[1.0, 0.0]),
            Err(TensorError::Degenerate(_))
        ));
    }
}
