//! Channel-axis reshaping: concatenation and channel shuffle.

use crate::autodiff::{Grads, Tape, Var};
use crate::elem::Scalar;
use crate::tensor::Tensor;

/// Concatenate along the channel axis; all inputs share (B,H,W).
pub fn concat_channels<E: Scalar>(tape: &Tape<E>, xs: &[Var]) -> Var {
    assert!(!xs.is_empty());
    if xs.len() == 1 {
        return xs[0];
    }
    let values: Vec<Tensor<E>> = xs.iter().map(|&v| tape.value(v)).collect();
    let (b, _, h, w) = values[0].dims4();
    let mut channels = Vec::with_capacity(values.len());
    for v in &values {
        let (vb, vc, vh, vw) = v.dims4();
        assert!(
            vb == b && vh == h && vw == w,
            "concat: mismatched shapes {:?} vs {:?}",
            v.shape(),
            values[0].shape()
        );
        channels.push(vc);
    }
    let c_total: usize = channels.iter().sum();
    let plane = h * w;
    let mut out = vec![E::ZERO; b * c_total * plane];
    for bi in 0..b {
        let mut c_off = 0usize;
        for (v, &vc) in values.iter().zip(&channels) {
            let src = &v.data()[bi * vc * plane..(bi + 1) * vc * plane];
            let dst = &mut out[(bi * c_total + c_off) * plane..(bi * c_total + c_off + vc) * plane];
            dst.copy_from_slice(src);
            c_off += vc;
        }
    }
    let inputs: Vec<Var> = xs.to_vec();
    tape.push(
        Tensor::new(&[b, c_total, h, w], out),
        move |g, grads: &mut Grads<E>| {
            let mut c_off = 0usize;
            for (&input, &vc) in inputs.iter().zip(&channels) {
                let mut part = vec![E::ZERO; b * vc * plane];
                for bi in 0..b {
                    let src = &g.data()
                        [(bi * c_total + c_off) * plane..(bi * c_total + c_off + vc) * plane];
                    part[bi * vc * plane..(bi + 1) * vc * plane].copy_from_slice(src);
                }
                grads.add(input, Tensor::new(&[b, vc, h, w], part));
                c_off += vc;
            }
        },
    )
}

/// Index map of the channel shuffle: output channel `i` reads input channel
/// `(i mod g) * (C/g) + i div g`, the reshape(g, C/g) -> transpose -> flatten
/// permutation.
pub fn shuffle_index_map(channels: usize, groups: usize) -> Vec<usize> {
    assert!(
        groups > 0 && channels % groups == 0,
        "groups {groups} must divide channels {channels}"
    );
    let per = channels / groups;
    (0..channels).map(|i| (i % groups) * per + i / groups).collect()
}

/// Edge-replicating spatial padding.
pub fn replicate_pad<E: Scalar>(tape: &Tape<E>, x: Var, ph: usize, pw: usize) -> Var {
    if ph == 0 && pw == 0 {
        return x;
    }
    let vx = tape.value(x);
    let (b, c, h, w) = vx.dims4();
    let (oh, ow) = (h + 2 * ph, w + 2 * pw);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut out = vec![E::ZERO; b * c * oh * ow];
    for bc in 0..b * c {
        let src = &vx.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for oi in 0..oh {
            let ih = clamp(oi as isize - ph as isize, h);
            for oj in 0..ow {
                let iw = clamp(oj as isize - pw as isize, w);
                dst[oi * ow + oj] = src[ih * w + iw];
            }
        }
    }
    let shape = vx.shape().to_vec();
    tape.push(
        Tensor::new(&[b, c, oh, ow], out),
        move |g, grads: &mut Grads<E>| {
            let mut dx = vec![E::ZERO; shape.iter().product()];
            for bc in 0..b * c {
                let gs = &g.data()[bc * oh * ow..(bc + 1) * oh * ow];
                let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
                for oi in 0..oh {
                    let ih = clamp(oi as isize - ph as isize, h);
                    for oj in 0..ow {
                        let iw = clamp(oj as isize - pw as isize, w);
                        dst[ih * w + iw] += gs[oi * ow + oj];
                    }
                }
            }
            grads.add(x, Tensor::new(&shape, dx));
        },
    )
}

/// View with a new shape (same element count).
pub fn reshape<E: Scalar>(tape: &Tape<E>, x: Var, shape: &[usize]) -> Var {
    let vx = tape.value(x);
    let old_shape = vx.shape().to_vec();
    let out = vx.reshaped(shape);
    tape.push(out, move |g, grads: &mut Grads<E>| {
        grads.add(x, g.reshaped(&old_shape));
    })
}

/// Split along the channel axis into parts of the given sizes.
pub fn split_channels<E: Scalar>(tape: &Tape<E>, x: Var, sizes: &[usize]) -> Vec<Var> {
    let vx = tape.value(x);
    let (b, c, h, w) = vx.dims4();
    assert_eq!(sizes.iter().sum::<usize>(), c, "split sizes must sum to {c}");
    let plane = h * w;
    let mut outs = Vec::with_capacity(sizes.len());
    let mut c_off = 0usize;
    for &vc in sizes {
        let mut part = vec![E::ZERO; b * vc * plane];
        for bi in 0..b {
            let src = &vx.data()[(bi * c + c_off) * plane..(bi * c + c_off + vc) * plane];
            part[bi * vc * plane..(bi + 1) * vc * plane].copy_from_slice(src);
        }
        let off = c_off;
        let out = tape.push(
            Tensor::new(&[b, vc, h, w], part),
            move |g, grads: &mut Grads<E>| {
                let mut dx = vec![E::ZERO; b * c * plane];
                for bi in 0..b {
                    let dst = &mut dx[(bi * c + off) * plane..(bi * c + off + vc) * plane];
                    dst.copy_from_slice(&g.data()[bi * vc * plane..(bi + 1) * vc * plane]);
                }
                grads.add(x, Tensor::new(&[b, c, h, w], dx));
            },
        );
        outs.push(out);
        c_off += vc;
    }
    outs
}

/// Channel shuffle (B,C,H,W) -> (B,C,H,W).
pub fn channel_shuffle_op<E: Scalar>(tape: &Tape<E>, x: Var, groups: usize) -> Var {
    let vx = tape.value(x);
    let (b, c, h, w) = vx.dims4();
    let map = shuffle_index_map(c, groups);
    if groups == 1 {
        return x;
    }
    let plane = h * w;
    let mut out = vec![E::ZERO; vx.numel()];
    for bi in 0..b {
        for (oc, &ic) in map.iter().enumerate() {
            let src = &vx.data()[(bi * c + ic) * plane..(bi * c + ic + 1) * plane];
            out[(bi * c + oc) * plane..(bi * c + oc + 1) * plane].copy_from_slice(src);
        }
    }
    let shape = vx.shape().to_vec();
    tape.push(Tensor::new(&shape, out), move |g, grads: &mut Grads<E>| {
        let mut dx = vec![E::ZERO; shape.iter().product()];
        for bi in 0..b {
            for (oc, &ic) in map.iter().enumerate() {
                let src = &g.data()[(bi * c + oc) * plane..(bi * c + oc + 1) * plane];
                dx[(bi * c + ic) * plane..(bi * c + ic + 1) * plane].copy_from_slice(src);
            }
        }
        grads.add(x, Tensor::new(&shape, dx));
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::sum_all;

    #[test]
    fn shuffle_matches_spec_example_c4_g2() {
        // C=4, g=2: (c0,c1,c2,c3) -> (c0,c2,c1,c3)
        assert_eq!(shuffle_index_map(4, 2), vec![0, 2, 1, 3]);
    }

    #[test]
    fn shuffle_g1_is_identity() {
        assert_eq!(shuffle_index_map(6, 1), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn shuffle_g3_then_g2_recovers_original_order() {
        // compose the index maps for C=6
        let m3 = shuffle_index_map(6, 3);
        let m2 = shuffle_index_map(6, 2);
        let composed: Vec<usize> = (0..6).map(|i| m3[m2[i]]).collect();
        assert_eq!(composed, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn concat_then_backward_splits_gradient() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::full(&[1, 2, 1, 2], 1.0));
        let b = tape.leaf(Tensor::full(&[1, 1, 1, 2], 5.0));
        let y = concat_channels(&tape, &[a, b]);
        assert_eq!(tape.shape(y), vec![1, 3, 1, 2]);
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 1.0, 1.0, 5.0, 5.0]);
        let s = sum_all(&tape, y);
        let mut grads = tape.backward(s);
        assert_eq!(grads.take(a).unwrap().shape(), &[1, 2, 1, 2]);
        assert_eq!(grads.take(b).unwrap().shape(), &[1, 1, 1, 2]);
    }

    #[test]
    fn shuffle_op_permutes_planes_and_inverts_in_backward() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(
            &[1, 4, 1, 1],
            vec![10.0, 20.0, 30.0, 40.0],
        ));
        let y = channel_shuffle_op(&tape, x, 2);
        assert_eq!(tape.value(y).data(), &[10.0, 30.0, 20.0, 40.0]);
    }
}
