//! Plain (non-differentiable) tensor kernels shared by the inference path and
//! the tape ops, so both paths compute bit-identical forward values.

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, Axis, Ix2, IxDyn};

use crate::parallel;

pub const SQRT_2PI: f64 = 2.5066282746310002;

/// Standard normal kernel `phi(t) = exp(-t^2/2) / sqrt(2*pi)`.
#[inline]
pub fn normal_kernel(t: f64) -> f64 {
    (-0.5 * t * t).exp() / SQRT_2PI
}

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Derivative of the exact GELU.
#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * (-0.5 * x * x).exp() / SQRT_2PI
}

/// Row-wise softmax over the last axis, with row-max subtraction.
pub fn softmax_last(x: &ArrayViewD<f64>) -> ArrayD<f64> {
    let mut out = x.to_owned();
    softmax_last_inplace(&mut out.view_mut());
    out
}

pub fn softmax_last_inplace(x: &mut ArrayViewMutD<f64>) {
    let last = x.ndim() - 1;
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    let _ = last;
}

/// Row-wise log-softmax over the last axis (stable).
pub fn log_softmax_last(x: &ArrayViewD<f64>) -> ArrayD<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter() {
            sum += (*v - max).exp();
        }
        let lse = max + sum.ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Layer normalization over the last axis with learned scale/offset.
///
/// `weight` and `bias` have the length of the last axis.
pub fn layer_norm(
    x: &ArrayViewD<f64>,
    weight: &[f64],
    bias: &[f64],
    eps: f64,
) -> ArrayD<f64> {
    let mut out = x.to_owned();
    let d = *x.shape().last().expect("layer_norm on 0-d input") as f64;
    for mut row in out.rows_mut() {
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * weight[j] + bias[j];
        }
    }
    out
}

/// Matrix product of stacked 2-D operands.
///
/// `a` has shape `[.., m, k]`; `b` is either `[k, n]` (shared across the
/// leading dims) or `[.., k, n]` with identical leading dims. The leading dims
/// are scheduled across threads; every output block is disjoint so the result
/// is identical to the sequential path.
pub fn matmul(a: &ArrayViewD<f64>, b: &ArrayViewD<f64>) -> ArrayD<f64> {
    matmul_impl(a, b, true)
}

/// Sequential twin of [`matmul`] for benchmarking.
pub fn matmul_seq(a: &ArrayViewD<f64>, b: &ArrayViewD<f64>) -> ArrayD<f64> {
    matmul_impl(a, b, false)
}

fn matmul_impl(a: &ArrayViewD<f64>, b: &ArrayViewD<f64>, par: bool) -> ArrayD<f64> {
    let a_nd = a.ndim();
    let b_nd = b.ndim();
    assert!(a_nd >= 2 && b_nd >= 2, "matmul operands must be >= 2-d");
    let (m, k) = (a.shape()[a_nd - 2], a.shape()[a_nd - 1]);
    let (kb, n) = (b.shape()[b_nd - 2], b.shape()[b_nd - 1]);
    assert_eq!(k, kb, "matmul inner dims differ: {k} vs {kb}");

    let lead: Vec<usize> = a.shape()[..a_nd - 2].to_vec();
    let batch: usize = lead.iter().product();
    let b_batched = b_nd > 2;
    if b_batched {
        assert_eq!(
            &b.shape()[..b_nd - 2],
            &lead[..],
            "matmul leading dims differ"
        );
    }

    let a_flat = a
        .to_shape((batch, m, k))
        .expect("matmul: non-contiguous lhs")
        .into_owned();
    let b_flat = if b_batched {
        b.to_shape((batch, k, n)).expect("matmul: rhs shape").into_owned()
    } else {
        b.to_shape((1, k, n)).expect("matmul: rhs shape").into_owned()
    };

    let mut out = ArrayD::zeros(IxDyn(&[batch, m, n]));
    {
        let run = |p: usize, slot: &mut ndarray::ArrayViewMut2<f64>| {
            let ap = a_flat.index_axis(Axis(0), p);
            let bp = b_flat.index_axis(Axis(0), if b_batched { p } else { 0 });
            slot.assign(&ap.dot(&bp));
        };
        let mut views: Vec<ndarray::ArrayViewMut2<f64>> = out
            .axis_iter_mut(Axis(0))
            .map(|v| v.into_dimensionality::<Ix2>().unwrap())
            .collect();
        if par {
            parallel::for_each_indexed(&mut views, |p, v| run(p, v));
        } else {
            parallel::for_each_indexed_seq(&mut views, |p, v| run(p, v));
        }
    }

    let mut out_shape = lead;
    out_shape.push(m);
    out_shape.push(n);
    out.into_shape_with_order(IxDyn(&out_shape)).unwrap()
}

/// Swap the last two axes.
pub fn transpose_last2(x: &ArrayViewD<f64>) -> ArrayD<f64> {
    let nd = x.ndim();
    let mut perm: Vec<usize> = (0..nd).collect();
    perm.swap(nd - 2, nd - 1);
    x.view().permuted_axes(IxDyn(&perm)).to_owned()
}

/// Reduce `grad` (shaped like the broadcast output) back to `target_shape`.
///
/// Implements the usual reverse of right-aligned numpy broadcasting: sum over
/// the extra leading axes, then over axes where the target length is 1.
pub fn reduce_to_shape(grad: &ArrayViewD<f64>, target_shape: &[usize]) -> ArrayD<f64> {
    let mut g = grad.to_owned();
    while g.ndim() > target_shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..target_shape.len() {
        if target_shape[ax] == 1 && g.shape()[ax] != 1 {
            let summed = g.sum_axis(Axis(ax));
            g = summed.insert_axis(Axis(ax));
        }
    }
    debug_assert_eq!(g.shape(), target_shape);
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = arr2(&[[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0], [1000.0, 1000.0, 999.0]]).into_dyn();
        let s = softmax_last(&x.view());
        for row in s.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
            assert!(row.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn log_softmax_matches_softmax_log() {
        let x = arr2(&[[0.3, -1.2, 2.0]]).into_dyn();
        let ls = log_softmax_last(&x.view());
        let s = softmax_last(&x.view());
        for (a, b) in ls.iter().zip(s.iter()) {
            assert_abs_diff_eq!(*a, b.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn gelu_reference_values() {
        assert_abs_diff_eq!(gelu_scalar(0.0), 0.0, epsilon = 1e-15);
        // x * Phi(x) at x = 1: Phi(1) = 0.8413447460685429
        assert_abs_diff_eq!(gelu_scalar(1.0), 0.8413447460685429, epsilon = 1e-12);
        assert_abs_diff_eq!(gelu_scalar(-1.0), -(1.0 - 0.8413447460685429), epsilon = 1e-12);
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let x = arr2(&[[1.0, 2.0, 3.0, 4.0]]).into_dyn();
        let w = vec![1.0; 4];
        let b = vec![0.0; 4];
        let y = layer_norm(&x.view(), &w, &b, 1e-6);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-4);
    }

    #[test]
    fn matmul_weight_and_batched() {
        let a = ndarray::Array::from_shape_vec((2, 2, 3), (0..12).map(|v| v as f64).collect())
            .unwrap()
            .into_dyn();
        let w = arr2(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).into_dyn();
        let y = matmul(&a.view(), &w.view());
        assert_eq!(y.shape(), &[2, 2, 2]);
        // row [0,1,2] * w -> [0+2, 1+2]
        assert_eq!(y[[0, 0, 0]], 2.0);
        assert_eq!(y[[0, 0, 1]], 3.0);

        let b = ndarray::Array::from_shape_vec((2, 3, 2), (0..12).map(|v| v as f64).collect())
            .unwrap()
            .into_dyn();
        let yb = matmul(&a.view(), &b.view());
        assert_eq!(yb.shape(), &[2, 2, 2]);
        let y_seq = matmul_seq(&a.view(), &b.view());
        assert_eq!(yb, y_seq);
    }

    #[test]
    fn reduce_to_shape_broadcast_axes() {
        let g = ndarray::Array::ones((4, 3, 5)).into_dyn();
        let r = reduce_to_shape(&g.view(), &[3, 1]);
        assert_eq!(r.shape(), &[3, 1]);
        assert_eq!(r[[0, 0]], 20.0);
    }
}
