//! Pooling and resampling.

use crate::autodiff::{Grads, Tape, Var};
use crate::elem::Scalar;
use crate::tensor::Tensor;

/// (B,C,H,W) -> (B,C,1,1), mean over the spatial plane.
pub fn global_avg_pool<E: Scalar>(tape: &Tape<E>, x: Var) -> Var {
    let vx = tape.value(x);
    let (b, c, h, w) = vx.dims4();
    let plane = h * w;
    let inv = E::ONE / E::from_f64(plane as f64);
    let mut out = vec![E::ZERO; b * c];
    for (i, o) in out.iter_mut().enumerate() {
        let src = &vx.data()[i * plane..(i + 1) * plane];
        let mut acc = E::ZERO;
        for &v in src {
            acc += v;
        }
        *o = acc * inv;
    }
    let shape = vx.shape().to_vec();
    tape.push(Tensor::new(&[b, c, 1, 1], out), move |g, grads: &mut Grads<E>| {
        let mut dx = vec![E::ZERO; shape.iter().product()];
        for (i, &gv) in g.data().iter().enumerate() {
            let gs = gv * inv;
            for v in &mut dx[i * plane..(i + 1) * plane] {
                *v = gs;
            }
        }
        grads.add(x, Tensor::new(&shape, dx));
    })
}

/// (B,C,H,W) -> (B,C,1,1), max over the spatial plane. Gradient routes to the
/// first maximal element.
pub fn global_max_pool<E: Scalar>(tape: &Tape<E>, x: Var) -> Var {
    let vx = tape.value(x);
    let (b, c, h, w) = vx.dims4();
    let plane = h * w;
    let mut out = vec![E::ZERO; b * c];
    let mut argmax = vec![0usize; b * c];
    for i in 0..b * c {
        let src = &vx.data()[i * plane..(i + 1) * plane];
        let mut best = src[0];
        let mut bi = 0usize;
        for (j, &v) in src.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                bi = j;
            }
        }
        out[i] = best;
        argmax[i] = bi;
    }
    let shape = vx.shape().to_vec();
    tape.push(Tensor::new(&[b, c, 1, 1], out), move |g, grads: &mut Grads<E>| {
        let mut dx = vec![E::ZERO; shape.iter().product()];
        for (i, &gv) in g.data().iter().enumerate() {
            dx[i * plane + argmax[i]] += gv;
        }
        grads.add(x, Tensor::new(&shape, dx));
    })
}

/// (B,C,H,W) -> (B,C,1,W), mean over height.
pub fn pool_height_to_1<E: Scalar>(tape: &Tape<E>, x: Var) -> Var {
    let vx = tape.value(x);
    let (b, c, h, w) = vx.dims4();
    let inv = E::ONE / E::from_f64(h as f64);
    let mut out = vec![E::ZERO; b * c * w];
    for bc in 0..b * c {
        let src = &vx.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * w..(bc + 1) * w];
        for hi in 0..h {
            for wi in 0..w {
                dst[wi] += src[hi * w + wi];
            }
        }
        for v in dst.iter_mut() {
            *v = *v * inv;
        }
    }
    let shape = vx.shape().to_vec();
    tape.push(Tensor::new(&[b, c, 1, w], out), move |g, grads: &mut Grads<E>| {
        let mut dx = vec![E::ZERO; shape.iter().product()];
        for bc in 0..b * c {
            let gs = &g.data()[bc * w..(bc + 1) * w];
            let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
            for hi in 0..h {
                for wi in 0..w {
                    dst[hi * w + wi] = gs[wi] * inv;
                }
            }
        }
        grads.add(x, Tensor::new(&shape, dx));
    })
}

/// (B,C,H,W) -> (B,C,H,1), mean over width.
pub fn pool_width_to_1<E: Scalar>(tape: &Tape<E>, x: Var) -> Var {
    let vx = tape.value(x);
    let (b, c, h, w) = vx.dims4();
    let inv = E::ONE / E::from_f64(w as f64);
    let mut out = vec![E::ZERO; b * c * h];
    for bc in 0..b * c {
        let src = &vx.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * h..(bc + 1) * h];
        for hi in 0..h {
            let mut acc = E::ZERO;
            for wi in 0..w {
                acc += src[hi * w + wi];
            }
            dst[hi] = acc * inv;
        }
    }
    let shape = vx.shape().to_vec();
    tape.push(Tensor::new(&[b, c, h, 1], out), move |g, grads: &mut Grads<E>| {
        let mut dx = vec![E::ZERO; shape.iter().product()];
        for bc in 0..b * c {
            let gs = &g.data()[bc * h..(bc + 1) * h];
            let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
            for hi in 0..h {
                let gv = gs[hi] * inv;
                for wi in 0..w {
                    dst[hi * w + wi] = gv;
                }
            }
        }
        grads.add(x, Tensor::new(&shape, dx));
    })
}

/// Non-overlapping k x k average pooling; input spatial dims must divide by k.
pub fn avg_pool2d<E: Scalar>(tape: &Tape<E>, x: Var, k: usize) -> Var {
    if k == 1 {
        return x;
    }
    let vx = tape.value(x);
    let (b, c, h, w) = vx.dims4();
    assert!(
        h % k == 0 && w % k == 0,
        "avg_pool2d: {h}x{w} not divisible by {k}"
    );
    let (oh, ow) = (h / k, w / k);
    let inv = E::ONE / E::from_f64((k * k) as f64);
    let mut out = vec![E::ZERO; b * c * oh * ow];
    for bc in 0..b * c {
        let src = &vx.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = E::ZERO;
                for di in 0..k {
                    for dj in 0..k {
                        acc += src[(oi * k + di) * w + oj * k + dj];
                    }
                }
                dst[oi * ow + oj] = acc * inv;
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
                    for oj in 0..ow {
                        let gv = gs[oi * ow + oj] * inv;
                        for di in 0..k {
                            for dj in 0..k {
                                dst[(oi * k + di) * w + oj * k + dj] = gv;
                            }
                        }
                    }
                }
            }
            grads.add(x, Tensor::new(&shape, dx));
        },
    )
}

/// Bilinear interpolation to (out_h, out_w), half-pixel centers
/// (align_corners = false convention).
pub fn bilinear_resize<E: Scalar>(tape: &Tape<E>, x: Var, out_h: usize, out_w: usize) -> Var {
    let vx = tape.value(x);
    let (b, c, h, w) = vx.dims4();
    if out_h == h && out_w == w {
        return x;
    }
    // Precompute taps per output row / column.
    let taps = |in_n: usize, out_n: usize| -> Vec<(usize, usize, f64)> {
        let scale = in_n as f64 / out_n as f64;
        (0..out_n)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(in_n - 1);
                let i1 = (i0 + 1).min(in_n - 1);
                let frac = (src - i0 as f64).clamp(0.0, 1.0);
                (i0, i1, frac)
            })
            .collect()
    };
    let row_taps = taps(h, out_h);
    let col_taps = taps(w, out_w);
    let mut out = vec![E::ZERO; b * c * out_h * out_w];
    for bc in 0..b * c {
        let src = &vx.data()[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * out_h * out_w..(bc + 1) * out_h * out_w];
        for (oi, &(r0, r1, fr)) in row_taps.iter().enumerate() {
            for (oj, &(c0, c1, fc)) in col_taps.iter().enumerate() {
                let v00 = src[r0 * w + c0].to_f64();
                let v01 = src[r0 * w + c1].to_f64();
                let v10 = src[r1 * w + c0].to_f64();
                let v11 = src[r1 * w + c1].to_f64();
                let top = v00 * (1.0 - fc) + v01 * fc;
                let bot = v10 * (1.0 - fc) + v11 * fc;
                dst[oi * out_w + oj] = E::from_f64(top * (1.0 - fr) + bot * fr);
            }
        }
    }
    let shape = vx.shape().to_vec();
    tape.push(
        Tensor::new(&[b, c, out_h, out_w], out),
        move |g, grads: &mut Grads<E>| {
            let mut dx = vec![E::ZERO; shape.iter().product()];
            for bc in 0..b * c {
                let gs = &g.data()[bc * out_h * out_w..(bc + 1) * out_h * out_w];
                let dst = &mut dx[bc * h * w..(bc + 1) * h * w];
                for (oi, &(r0, r1, fr)) in row_taps.iter().enumerate() {
                    for (oj, &(c0, c1, fc)) in col_taps.iter().enumerate() {
                        let gv = gs[oi * out_w + oj].to_f64();
                        dst[r0 * w + c0] += E::from_f64(gv * (1.0 - fr) * (1.0 - fc));
                        dst[r0 * w + c1] += E::from_f64(gv * (1.0 - fr) * fc);
                        dst[r1 * w + c0] += E::from_f64(gv * fr * (1.0 - fc));
                        dst[r1 * w + c1] += E::from_f64(gv * fr * fc);
                    }
                }
            }
            grads.add(x, Tensor::new(&shape, dx));
        },
    )
}
