//! Differentiable tensor operations recorded on a [`Tape`](crate::autodiff::Tape).
//!
//! Every operation computes its result eagerly and, when gradients are
//! enabled, pushes a closure implementing the exact adjoint. Summation order
//! inside each operation is fixed, so results are bitwise reproducible run to
//! run on the same build.

mod conv;
mod elementwise;
mod norm;
mod pool;
mod scan;
mod shape;

pub use conv::{conv2d, ConvSpec};
pub use elementwise::{
    add, add_scalar, exp_op, mean_all, mul, neg, relu, scale, sigmoid_op, silu, softplus_op, sub,
    sum_all,
};
pub use norm::{batch_norm_eval, batch_norm_train, layer_norm_channels, BatchStats};
pub use pool::{
    avg_pool2d, bilinear_resize, global_avg_pool, global_max_pool, pool_height_to_1,
    pool_width_to_1,
};
pub use scan::{
    cross_merge, cross_scan, direction_slice, selective_scan, stack_directions, NUM_DIRECTIONS,
};
pub use shape::{
    channel_shuffle_op, concat_channels, replicate_pad, reshape, shuffle_index_map, split_channels,
};

/// NumPy-style broadcast of two shapes (trailing alignment).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "shapes {a:?} and {b:?} are not broadcastable"
        );
        out[i] = da.max(db);
    }
    out
}

/// Row-major strides with 0 on axes broadcast from size 1 (right-aligned
/// against `out`).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - shape.len();
    let mut contiguous = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        contiguous[i] = acc;
        acc *= shape[i];
    }
    let mut strides = vec![0usize; rank];
    for i in 0..rank {
        if i >= offset {
            let d = shape[i - offset];
            strides[i] = if d == 1 { 0 } else { contiguous[i - offset] };
        }
    }
    strides
}

/// Sum `grad` (shaped `from`) down to `to` (summing broadcast axes).
pub(crate) fn reduce_to_shape<E: crate::elem::Scalar>(
    grad: &crate::tensor::Tensor<E>,
    to: &[usize],
) -> crate::tensor::Tensor<E> {
    use crate::tensor::Tensor;
    let from = grad.shape();
    if from == to {
        return grad.clone();
    }
    let rank = from.len();
    let offset = rank - to.len();
    let numel_to: usize = to.iter().product();
    let mut out = vec![E::ZERO; numel_to];
    let strides_to = broadcast_strides(to, from);
    let mut idx = vec![0usize; rank];
    for &g in grad.data() {
        let mut pos = 0usize;
        for i in 0..rank {
            pos += idx[i] * strides_to[i];
        }
        out[pos] += g;
        // increment multi-index
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < from[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    let _ = offset;
    Tensor::new(to, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shape(&[2, 3, 4, 5], &[2, 3, 1, 1]), vec![2, 3, 4, 5]);
        assert_eq!(broadcast_shape(&[4, 5], &[2, 3, 4, 5]), vec![2, 3, 4, 5]);
        assert_eq!(broadcast_shape(&[1], &[7]), vec![7]);
    }

    #[test]
    #[should_panic]
    fn incompatible_shapes_panic() {
        broadcast_shape(&[2, 3], &[4, 3]);
    }

    #[test]
    fn reduce_to_shape_sums_broadcast_axes() {
        use crate::tensor::Tensor;
        let g: Tensor<f64> = Tensor::new(&[2, 2, 2], (1..=8).map(|v| v as f64).collect());
        let r = reduce_to_shape(&g, &[2, 1, 1]);
        assert_eq!(r.data(), &[1.0 + 2.0 + 3.0 + 4.0, 5.0 + 6.0 + 7.0 + 8.0]);
        // right-aligned: [2] matches the last axis, so axes 0 and 1 are summed
        let r2 = reduce_to_shape(&g, &[2]);
        assert_eq!(r2.data(), &[1.0 + 3.0 + 5.0 + 7.0, 2.0 + 4.0 + 6.0 + 8.0]);
    }
}
