//! 2D convolution with stride, zero padding, dilation and groups.
//!
//! Three execution paths share one contract: a depthwise direct path, a
//! pointwise GEMM path for 1x1/stride-1 convolutions, and a general
//! im2col+GEMM path. Dispatch is deterministic, so repeated runs produce
//! bitwise-identical results.

use crate::autodiff::{Grads, Tape, Var};
use crate::elem::Scalar;
use crate::tensor::Tensor;

/// Geometry of a convolution. Weight layout is (out_c, in_c/groups, kh, kw).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            pad: (0, 0),
            dilation: (1, 1),
            groups: 1,
        }
    }
}

impl ConvSpec {
    pub fn same_padding(kh: usize, kw: usize, dilation: (usize, usize)) -> Self {
        Self {
            stride: (1, 1),
            pad: (dilation.0 * (kh - 1) / 2, dilation.1 * (kw - 1) / 2),
            dilation,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn out_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad.0).checked_sub(self.dilation.0 * (kh - 1) + 1);
        let ow = (w + 2 * self.pad.1).checked_sub(self.dilation.1 * (kw - 1) + 1);
        let oh = oh.map(|v| v / self.stride.0 + 1).unwrap_or(0);
        let ow = ow.map(|v| v / self.stride.1 + 1).unwrap_or(0);
        (oh, ow)
    }
}

/// Strided GEMM: C[m,n] (+)= alpha * A[m,k] * B[k,n] with explicit strides.
fn gemm_strided<E: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
    a: &[E],
    rsa: isize,
    csa: isize,
    b: &[E],
    rsb: isize,
    csb: isize,
    beta: E,
    c: &mut [E],
) {
    // Fall back to the row-major gemm when strides are contiguous, otherwise
    // do the small reorder ourselves; matrixmultiply supports strides but we
    // keep the unsafe surface in one place (elem::Scalar::gemm).
    let row_major = rsa == k as isize && csa == 1 && rsb == n as isize && csb == 1;
    if row_major {
        E::gemm(m, k, n, alpha, a, b, beta, c);
        return;
    }
    // materialize the strided operands contiguously
    let mut ac = vec![E::ZERO; m * k];
    for i in 0..m {
        for j in 0..k {
            ac[i * k + j] = a[(i as isize * rsa + j as isize * csa) as usize];
        }
    }
    let mut bc = vec![E::ZERO; k * n];
    for i in 0..k {
        for j in 0..n {
            bc[i * n + j] = b[(i as isize * rsb + j as isize * csb) as usize];
        }
    }
    E::gemm(m, k, n, alpha, &ac, &bc, beta, c);
}

/// Gather a padded/strided/dilated patch matrix for one (batch, group).
/// Output layout: (in_cg*kh*kw, oh*ow) row-major.
#[allow(clippy::too_many_arguments)]
fn im2col<E: Scalar>(
    x: &[E],
    col: &mut [E],
    in_c: usize,
    h: usize,
    w: usize,
    b: usize,
    g: usize,
    in_cg: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: &ConvSpec,
) {
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let (dh, dw) = spec.dilation;
    let base_c = g * in_cg;
    let plane = h * w;
    let x_b = &x[b * in_c * plane..];
    let mut row = 0usize;
    for ci in 0..in_cg {
        let x_c = &x_b[(base_c + ci) * plane..(base_c + ci + 1) * plane];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                row += 1;
                for oi in 0..oh {
                    let ih = (oi * sh + ki * dh) as isize - ph as isize;
                    let dst_row = &mut dst[oi * ow..(oi + 1) * ow];
                    if ih < 0 || ih >= h as isize {
                        for v in dst_row.iter_mut() {
                            *v = E::ZERO;
                        }
                        continue;
                    }
                    let x_row = &x_c[ih as usize * w..(ih as usize + 1) * w];
                    for (oj, v) in dst_row.iter_mut().enumerate() {
                        let iw = (oj * sw + kj * dw) as isize - pw as isize;
                        *v = if iw < 0 || iw >= w as isize {
                            E::ZERO
                        } else {
                            x_row[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch matrix back into the input gradient.
#[allow(clippy::too_many_arguments)]
fn col2im<E: Scalar>(
    col: &[E],
    dx: &mut [E],
    in_c: usize,
    h: usize,
    w: usize,
    b: usize,
    g: usize,
    in_cg: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: &ConvSpec,
) {
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.pad;
    let (dh, dw) = spec.dilation;
    let base_c = g * in_cg;
    let plane = h * w;
    let dx_b = &mut dx[b * in_c * plane..(b + 1) * in_c * plane];
    let mut row = 0usize;
    for ci in 0..in_cg {
        let dx_c = &mut dx_b[(base_c + ci) * plane..(base_c + ci + 1) * plane];
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                row += 1;
                for oi in 0..oh {
                    let ih = (oi * sh + ki * dh) as isize - ph as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let iw = (oj * sw + kj * dw) as isize - pw as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        dx_c[ih as usize * w + iw as usize] += src[oi * ow + oj];
                    }
                }
            }
        }
    }
}

fn forward<E: Scalar>(
    x: &Tensor<E>,
    wt: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    spec: &ConvSpec,
) -> Tensor<E> {
    let (bsz, in_c, h, w) = x.dims4();
    let (out_c, in_cg, kh, kw) = wt.dims4();
    assert_eq!(in_c % spec.groups, 0, "groups must divide in channels");
    assert_eq!(out_c % spec.groups, 0, "groups must divide out channels");
    assert_eq!(in_cg, in_c / spec.groups, "weight shape mismatch");
    let (oh, ow) = spec.out_size(h, w, kh, kw);
    assert!(oh > 0 && ow > 0, "empty convolution output for input {h}x{w}");
    let mut out = vec![E::ZERO; bsz * out_c * oh * ow];
    let depthwise = spec.groups == in_c && out_c == in_c;
    let pointwise = kh == 1
        && kw == 1
        && spec.groups == 1
        && spec.stride == (1, 1)
        && spec.pad == (0, 0);

    if depthwise {
        let (sh, sw) = spec.stride;
        let (ph, pw) = spec.pad;
        let (dh, dw) = spec.dilation;
        let plane_in = h * w;
        let plane_out = oh * ow;
        for b in 0..bsz {
            for c in 0..in_c {
                let xs = &x.data()[(b * in_c + c) * plane_in..(b * in_c + c + 1) * plane_in];
                let ws = &wt.data()[c * kh * kw..(c + 1) * kh * kw];
                let os = &mut out[(b * out_c + c) * plane_out..(b * out_c + c + 1) * plane_out];
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = E::ZERO;
                        for ki in 0..kh {
                            let ih = (oi * sh + ki * dh) as isize - ph as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let iw = (oj * sw + kj * dw) as isize - pw as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                acc += ws[ki * kw + kj] * xs[ih as usize * w + iw as usize];
                            }
                        }
                        os[oi * ow + oj] = acc;
                    }
                }
            }
        }
    } else if pointwise {
        let hw = h * w;
        for b in 0..bsz {
            let xs = &x.data()[b * in_c * hw..(b + 1) * in_c * hw];
            let os = &mut out[b * out_c * hw..(b + 1) * out_c * hw];
            E::gemm(out_c, in_c, hw, E::ONE, wt.data(), xs, E::ZERO, os);
        }
    } else {
        let out_cg = out_c / spec.groups;
        let k = in_cg * kh * kw;
        let mut col = vec![E::ZERO; k * oh * ow];
        for b in 0..bsz {
            for g in 0..spec.groups {
                im2col(
                    x.data(),
                    &mut col,
                    in_c,
                    h,
                    w,
                    b,
                    g,
                    in_cg,
                    kh,
                    kw,
                    oh,
                    ow,
                    spec,
                );
                let wts = &wt.data()[g * out_cg * k..(g + 1) * out_cg * k];
                let os = &mut out[(b * out_c + g * out_cg) * oh * ow
                    ..(b * out_c + (g + 1) * out_cg) * oh * ow];
                E::gemm(out_cg, k, oh * ow, E::ONE, wts, &col, E::ZERO, os);
            }
        }
    }

    if let Some(bias) = bias {
        assert_eq!(bias.numel(), out_c);
        let plane = oh * ow;
        for b in 0..bsz {
            for c in 0..out_c {
                let bv = bias.data()[c];
                for v in &mut out[(b * out_c + c) * plane..(b * out_c + c + 1) * plane] {
                    *v = *v + bv;
                }
            }
        }
    }
    Tensor::new(&[bsz, out_c, oh, ow], out)
}

fn backward<E: Scalar>(
    grad_y: &Tensor<E>,
    x: &Tensor<E>,
    wt: &Tensor<E>,
    has_bias: bool,
    spec: &ConvSpec,
) -> (Tensor<E>, Tensor<E>, Option<Tensor<E>>) {
    let (bsz, in_c, h, w) = x.dims4();
    let (out_c, in_cg, kh, kw) = wt.dims4();
    let (_, _, oh, ow) = grad_y.dims4();
    let mut dx = vec![E::ZERO; x.numel()];
    let mut dw = vec![E::ZERO; wt.numel()];
    let depthwise = spec.groups == in_c && out_c == in_c;
    let pointwise = kh == 1
        && kw == 1
        && spec.groups == 1
        && spec.stride == (1, 1)
        && spec.pad == (0, 0);

    if depthwise {
        let (sh, sw) = spec.stride;
        let (ph, pw) = spec.pad;
        let (dh, dw_) = spec.dilation;
        let plane_in = h * w;
        let plane_out = oh * ow;
        for b in 0..bsz {
            for c in 0..in_c {
                let gy = &grad_y.data()
                    [(b * out_c + c) * plane_out..(b * out_c + c + 1) * plane_out];
                let xs = &x.data()[(b * in_c + c) * plane_in..(b * in_c + c + 1) * plane_in];
                let ws = &wt.data()[c * kh * kw..(c + 1) * kh * kw];
                let dxs = &mut dx[(b * in_c + c) * plane_in..(b * in_c + c + 1) * plane_in];
                let dws = &mut dw[c * kh * kw..(c + 1) * kh * kw];
                for oi in 0..oh {
                    for oj in 0..ow {
                        let g = gy[oi * ow + oj];
                        for ki in 0..kh {
                            let ih = (oi * sh + ki * dh) as isize - ph as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let iw = (oj * sw + kj * dw_) as isize - pw as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let xi = ih as usize * w + iw as usize;
                                dxs[xi] += g * ws[ki * kw + kj];
                                dws[ki * kw + kj] += g * xs[xi];
                            }
                        }
                    }
                }
            }
        }
    } else if pointwise {
        let hw = h * w;
        for b in 0..bsz {
            let gy = &grad_y.data()[b * out_c * hw..(b + 1) * out_c * hw];
            let xs = &x.data()[b * in_c * hw..(b + 1) * in_c * hw];
            // dW += gy (out_c x hw) * xs^T (hw x in_c)
            gemm_strided(
                out_c,
                hw,
                in_c,
                E::ONE,
                gy,
                hw as isize,
                1,
                xs,
                1,
                hw as isize,
                E::ONE,
                &mut dw,
            );
            // dX = W^T (in_c x out_c) * gy (out_c x hw)
            let dxs = &mut dx[b * in_c * hw..(b + 1) * in_c * hw];
            gemm_strided(
                in_c,
                out_c,
                hw,
                E::ONE,
                wt.data(),
                1,
                in_c as isize,
                gy,
                hw as isize,
                1,
                E::ZERO,
                dxs,
            );
        }
    } else {
        let out_cg = out_c / spec.groups;
        let k = in_cg * kh * kw;
        let mut col = vec![E::ZERO; k * oh * ow];
        let mut dcol = vec![E::ZERO; k * oh * ow];
        for b in 0..bsz {
            for g in 0..spec.groups {
                im2col(
                    x.data(),
                    &mut col,
                    in_c,
                    h,
                    w,
                    b,
                    g,
                    in_cg,
                    kh,
                    kw,
                    oh,
                    ow,
                    spec,
                );
                let gy = &grad_y.data()[(b * out_c + g * out_cg) * oh * ow
                    ..(b * out_c + (g + 1) * out_cg) * oh * ow];
                // dW_g += gy (out_cg x ohow) * col^T (ohow x k)
                let dwg = &mut dw[g * out_cg * k..(g + 1) * out_cg * k];
                gemm_strided(
                    out_cg,
                    oh * ow,
                    k,
                    E::ONE,
                    gy,
                    (oh * ow) as isize,
                    1,
                    &col,
                    1,
                    (oh * ow) as isize,
                    E::ONE,
                    dwg,
                );
                // dcol = W_g^T (k x out_cg) * gy (out_cg x ohow)
                let wts = &wt.data()[g * out_cg * k..(g + 1) * out_cg * k];
                gemm_strided(
                    k,
                    out_cg,
                    oh * ow,
                    E::ONE,
                    wts,
                    1,
                    k as isize,
                    gy,
                    (oh * ow) as isize,
                    1,
                    E::ZERO,
                    &mut dcol,
                );
                col2im(
                    &dcol, &mut dx, in_c, h, w, b, g, in_cg, kh, kw, oh, ow, spec,
                );
            }
        }
    }

    let dbias = if has_bias {
        let plane = oh * ow;
        let mut db = vec![E::ZERO; out_c];
        for b in 0..bsz {
            for (c, dbc) in db.iter_mut().enumerate() {
                let gy = &grad_y.data()[(b * out_c + c) * plane..(b * out_c + c + 1) * plane];
                for &g in gy {
                    *dbc += g;
                }
            }
        }
        Some(Tensor::new(&[out_c], db))
    } else {
        None
    };
    (
        Tensor::new(x.shape(), dx),
        Tensor::new(wt.shape(), dw),
        dbias,
    )
}

/// Differentiable 2D convolution.
pub fn conv2d<E: Scalar>(
    tape: &Tape<E>,
    x: Var,
    weight: Var,
    bias: Option<Var>,
    spec: ConvSpec,
) -> Var {
    let vx = tape.value(x);
    let vw = tape.value(weight);
    let vb = bias.map(|b| tape.value(b));
    let out = forward(&vx, &vw, vb.as_ref(), &spec);
    tape.push(out, move |g, grads: &mut Grads<E>| {
        let (dx, dw, db) = backward(g, &vx, &vw, vb.is_some(), &spec);
        grads.add(x, dx);
        grads.add(weight, dw);
        if let (Some(b), Some(db)) = (bias, db) {
            grads.add(b, db);
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::sum_all;

    /// Naive six-loop reference convolution, independent of the GEMM path.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_naive(
        x: &Tensor<f64>,
        wt: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
        spec: &ConvSpec,
    ) -> Tensor<f64> {
        let (bsz, in_c, h, w) = x.dims4();
        let (out_c, in_cg, kh, kw) = wt.dims4();
        let (oh, ow) = spec.out_size(h, w, kh, kw);
        let out_cg = out_c / spec.groups;
        let mut out = vec![0.0; bsz * out_c * oh * ow];
        for b in 0..bsz {
            for oc in 0..out_c {
                let g = oc / out_cg;
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = bias.map(|bt| bt.data()[oc]).unwrap_or(0.0);
                        for ci in 0..in_cg {
                            let ic = g * in_cg + ci;
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ih = (oi * spec.stride.0 + ki * spec.dilation.0) as isize
                                        - spec.pad.0 as isize;
                                    let iw = (oj * spec.stride.1 + kj * spec.dilation.1) as isize
                                        - spec.pad.1 as isize;
                                    if ih < 0 || ih >= h as isize || iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    acc += x.data()
                                        [((b * in_c + ic) * h + ih as usize) * w + iw as usize]
                                        * wt.data()[((oc * in_cg + ci) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        out[((b * out_c + oc) * oh + oi) * ow + oj] = acc;
                    }
                }
            }
        }
        Tensor::new(&[bsz, out_c, oh, ow], out)
    }

    fn rng_fill(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn gemm_path_matches_naive_reference() {
        let cases = vec![
            // (x shape, w shape, spec)
            ([2, 3, 7, 5], [4, 3, 3, 3], ConvSpec::same_padding(3, 3, (1, 1))),
            ([1, 4, 6, 6], [4, 1, 3, 1], ConvSpec {
                stride: (1, 1),
                pad: (1, 0),
                dilation: (1, 1),
                groups: 4,
            }),
            ([1, 4, 6, 6], [4, 1, 1, 3], ConvSpec {
                stride: (1, 1),
                pad: (0, 2),
                dilation: (1, 2),
                groups: 4,
            }),
            ([2, 6, 5, 5], [8, 6, 1, 1], ConvSpec::default()),
            ([1, 3, 9, 9], [5, 3, 3, 3], ConvSpec {
                stride: (2, 2),
                pad: (1, 1),
                dilation: (1, 1),
                groups: 1,
            }),
            // dilation larger than the spatial extent exercises heavy padding
            ([1, 2, 4, 4], [2, 1, 3, 1], ConvSpec {
                stride: (1, 1),
                pad: (6, 0),
                dilation: (6, 1),
                groups: 2,
            }),
            // grouped, non-depthwise
            ([1, 4, 5, 5], [6, 2, 3, 3], ConvSpec {
                stride: (1, 1),
                pad: (1, 1),
                dilation: (1, 1),
                groups: 2,
            }),
        ];
        for (i, (xs, ws, spec)) in cases.into_iter().enumerate() {
            let x = rng_fill(&xs, 10 + i as u64);
            let w = rng_fill(&ws, 100 + i as u64);
            let bias = rng_fill(&[ws[0]], 200 + i as u64);
            let want = conv2d_naive(&x, &w, Some(&bias), &spec);
            let got = forward(&x, &w, Some(&bias), &spec);
            let diff = want.max_abs_diff(&got).expect("same shape");
            assert!(diff < 1e-12, "case {i}: diff {diff}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let specs = vec![
            ([1, 2, 5, 5], [3, 2, 3, 3], ConvSpec::same_padding(3, 3, (1, 1))),
            ([1, 3, 4, 4], [3, 1, 3, 1], ConvSpec {
                stride: (1, 1),
                pad: (2, 0),
                dilation: (2, 1),
                groups: 3,
            }),
            ([2, 3, 4, 4], [4, 3, 1, 1], ConvSpec::default()),
            ([1, 2, 6, 6], [4, 2, 3, 3], ConvSpec {
                stride: (2, 2),
                pad: (1, 1),
                dilation: (1, 1),
                groups: 1,
            }),
        ];
        for (ci, (xs, ws, spec)) in specs.into_iter().enumerate() {
            let x0 = rng_fill(&xs, 7 + ci as u64);
            let w0 = rng_fill(&ws, 70 + ci as u64);
            let b0 = rng_fill(&[ws[0]], 700 + ci as u64);

            let tape: Tape<f64> = Tape::new();
            let x = tape.leaf(x0.clone());
            let w = tape.leaf(w0.clone());
            let b = tape.leaf(b0.clone());
            let y = conv2d(&tape, x, w, Some(b), spec);
            let s = sum_all(&tape, y);
            let mut grads = tape.backward(s);
            let gx = grads.take(x).unwrap();
            let gw = grads.take(w).unwrap();
            let gb = grads.take(b).unwrap();

            let f = |xt: &Tensor<f64>, wt: &Tensor<f64>, bt: &Tensor<f64>| -> f64 {
                forward(xt, wt, Some(bt), &spec).data().iter().sum()
            };
            let eps = 1e-6;
            // spot-check a handful of coordinates in each operand
            for probe in 0..6 {
                let i = (probe * 37) % x0.numel();
                let mut xp = x0.clone();
                xp.data_mut()[i] += eps;
                let mut xm = x0.clone();
                xm.data_mut()[i] -= eps;
                let fd = (f(&xp, &w0, &b0) - f(&xm, &w0, &b0)) / (2.0 * eps);
                assert!(
                    (gx.data()[i] - fd).abs() < 1e-6,
                    "case {ci} dx[{i}]: {} vs {}",
                    gx.data()[i],
                    fd
                );

                let j = (probe * 11) % w0.numel();
                let mut wp = w0.clone();
                wp.data_mut()[j] += eps;
                let mut wm = w0.clone();
                wm.data_mut()[j] -= eps;
                let fd = (f(&x0, &wp, &b0) - f(&x0, &wm, &b0)) / (2.0 * eps);
                assert!(
                    (gw.data()[j] - fd).abs() < 1e-6,
                    "case {ci} dw[{j}]: {} vs {}",
                    gw.data()[j],
                    fd
                );
            }
            for j in 0..b0.numel() {
                let mut bp = b0.clone();
                bp.data_mut()[j] += eps;
                let mut bm = b0.clone();
                bm.data_mut()[j] -= eps;
                let fd = (f(&x0, &w0, &bp) - f(&x0, &w0, &bm)) / (2.0 * eps);
                assert!((gb.data()[j] - fd).abs() < 1e-6);
            }
        }
    }
}
