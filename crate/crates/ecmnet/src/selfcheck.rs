//! Self-contained verification suites: independent reference implementations
//! (naive convolutions, unrolled quadratic scan, brute-force metrics) checked
//! against the production path, plus finite-difference gradient checks.
//!
//! The references use plain loops on raw slices and never call into `ops`,
//! so they stay independent of the GEMM/tape implementation they vet.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::blocks::{Edab, EdabConfig};

use crate::ffm::{Ffm, FfmConfig, Ss2d, Ss2dConfig};
use crate::metrics::ConfusionMatrix;
use crate::model::{make_variant, AblationVariant, Model};
use crate::msau::{Msau, MsauConfig};
use crate::nn::{ParamStore, Session};
use crate::tensor::Tensor;
use crate::train::cross_entropy_loss;

/// Outcome of one verification suite.
#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Reference implementations (pure, slice-level, loop-based).
pub mod oracle {
    use super::*;

    pub fn relu_ref(x: &Tensor<f64>) -> Tensor<f64> {
        x.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid_ref(x: &Tensor<f64>) -> Tensor<f64> {
        x.map(crate::elem::sigmoid)
    }

    pub fn silu_ref(x: &Tensor<f64>) -> Tensor<f64> {
        x.map(|v| v * crate::elem::sigmoid(v))
    }

    pub fn softplus_ref(x: &Tensor<f64>) -> Tensor<f64> {
        x.map(crate::elem::softplus)
    }

    pub fn add_ref(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        a.add_tensor(b)
    }

    /// Naive seven-loop grouped convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_ref(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
        stride: (usize, usize),
        pad: (usize, usize),
        dilation: (usize, usize),
        groups: usize,
    ) -> Tensor<f64> {
        let (b, in_c, h, wd) = x.dims4();
        let (out_c, in_cg, kh, kw) = w.dims4();
        assert_eq!(in_cg, in_c / groups);
        let oh = (h + 2 * pad.0 - dilation.0 * (kh - 1) - 1) / stride.0 + 1;
        let ow = (wd + 2 * pad.1 - dilation.1 * (kw - 1) - 1) / stride.1 + 1;
        let out_cg = out_c / groups;
        let mut out = vec![0.0; b * out_c * oh * ow];
        for bi in 0..b {
            for oc in 0..out_c {
                let g = oc / out_cg;
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = bias.map(|t| t.data()[oc]).unwrap_or(0.0);
                        for ci in 0..in_cg {
                            let ic = g * in_cg + ci;
                            for ki in 0..kh {
                                let ih = (oi * stride.0 + ki * dilation.0) as isize - pad.0 as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for kj in 0..kw {
                                    let iw =
                                        (oj * stride.1 + kj * dilation.1) as isize - pad.1 as isize;
                                    if iw < 0 || iw >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()
                                        [((bi * in_c + ic) * h + ih as usize) * wd + iw as usize]
                                        * w.data()[((oc * in_cg + ci) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        out[((bi * out_c + oc) * oh + oi) * ow + oj] = acc;
                    }
                }
            }
        }
        Tensor::new(&[b, out_c, oh, ow], out)
    }

    /// Evaluation-mode batch norm from running statistics.
    pub fn bn_eval_ref(
        x: &Tensor<f64>,
        gamma: &Tensor<f64>,
        beta: &Tensor<f64>,
        mean: &Tensor<f64>,
        var: &Tensor<f64>,
        eps: f64,
    ) -> Tensor<f64> {
        let (b, c, h, w) = x.dims4();
        let mut out = vec![0.0; x.numel()];
        for bi in 0..b {
            for ci in 0..c {
                let s = gamma.data()[ci] / (var.data()[ci] + eps).sqrt();
                let sh = beta.data()[ci] - s * mean.data()[ci];
                for p in 0..h * w {
                    out[(bi * c + ci) * h * w + p] = s * x.data()[(bi * c + ci) * h * w + p] + sh;
                }
            }
        }
        Tensor::new(x.shape(), out)
    }

    /// Layer norm over channels at each position.
    pub fn layer_norm_ref(
        x: &Tensor<f64>,
        gamma: &Tensor<f64>,
        beta: &Tensor<f64>,
        eps: f64,
    ) -> Tensor<f64> {
        let (b, c, h, w) = x.dims4();
        let plane = h * w;
        let mut out = vec![0.0; x.numel()];
        for bi in 0..b {
            for p in 0..plane {
                let mut mean = 0.0;
                for ci in 0..c {
                    mean += x.data()[(bi * c + ci) * plane + p];
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ci in 0..c {
                    let d = x.data()[(bi * c + ci) * plane + p] - mean;
                    var += d * d;
                }
                var /= c as f64;
                let s = 1.0 / (var + eps).sqrt();
                for ci in 0..c {
                    out[(bi * c + ci) * plane + p] = gamma.data()[ci]
                        * (x.data()[(bi * c + ci) * plane + p] - mean)
                        * s
                        + beta.data()[ci];
                }
            }
        }
        Tensor::new(x.shape(), out)
    }

    pub fn global_avg_ref(x: &Tensor<f64>) -> Tensor<f64> {
        let (b, c, h, w) = x.dims4();
        let mut out = vec![0.0; b * c];
        for i in 0..b * c {
            out[i] = x.data()[i * h * w..(i + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
        }
        Tensor::new(&[b, c, 1, 1], out)
    }

    pub fn global_max_ref(x: &Tensor<f64>) -> Tensor<f64> {
        let (b, c, h, w) = x.dims4();
        let mut out = vec![0.0; b * c];
        for i in 0..b * c {
            out[i] = x.data()[i * h * w..(i + 1) * h * w]
                .iter()
                .cloned()
                .fold(f64::MIN, f64::max);
        }
        Tensor::new(&[b, c, 1, 1], out)
    }

    pub fn pool_height_ref(x: &Tensor<f64>) -> Tensor<f64> {
        let (b, c, h, w) = x.dims4();
        let mut out = vec![0.0; b * c * w];
        for bc in 0..b * c {
            for wi in 0..w {
                let mut acc = 0.0;
                for hi in 0..h {
                    acc += x.data()[bc * h * w + hi * w + wi];
                }
                out[bc * w + wi] = acc / h as f64;
            }
        }
        Tensor::new(&[b, c, 1, w], out)
    }

    pub fn pool_width_ref(x: &Tensor<f64>) -> Tensor<f64> {
        let (b, c, h, w) = x.dims4();
        let mut out = vec![0.0; b * c * h];
        for bc in 0..b * c {
            for hi in 0..h {
                let mut acc = 0.0;
                for wi in 0..w {
                    acc += x.data()[bc * h * w + hi * w + wi];
                }
                out[bc * h + hi] = acc / w as f64;
            }
        }
        Tensor::new(&[b, c, h, 1], out)
    }

    pub fn replicate_pad_ref(x: &Tensor<f64>, ph: usize, pw: usize) -> Tensor<f64> {
        let (b, c, h, w) = x.dims4();
        let (oh, ow) = (h + 2 * ph, w + 2 * pw);
        let mut out = vec![0.0; b * c * oh * ow];
        for bc in 0..b * c {
            for oi in 0..oh {
                let ih = (oi as isize - ph as isize).clamp(0, h as isize - 1) as usize;
                for oj in 0..ow {
                    let iw = (oj as isize - pw as isize).clamp(0, w as isize - 1) as usize;
                    out[bc * oh * ow + oi * ow + oj] = x.data()[bc * h * w + ih * w + iw];
                }
            }
        }
        Tensor::new(&[b, c, oh, ow], out)
    }

    /// Multiply a (B,C,1,1) vector onto (B,C,H,W).
    pub fn mul_channel_ref(x: &Tensor<f64>, gate: &Tensor<f64>) -> Tensor<f64> {
        let (b, c, h, w) = x.dims4();
        let mut out = vec![0.0; x.numel()];
        for bi in 0..b {
            for ci in 0..c {
                let g = gate.data()[bi * c + ci];
                for p in 0..h * w {
                    out[(bi * c + ci) * h * w + p] = x.data()[(bi * c + ci) * h * w + p] * g;
                }
            }
        }
        Tensor::new(x.shape(), out)
    }

    /// Multiply a (B,C,H,1) gate onto (B,C,H,W).
    pub fn mul_hgate_ref(x: &Tensor<f64>, gate: &Tensor<f64>) -> Tensor<f64> {
        let (b, c, h, w) = x.dims4();
        let mut out = vec![0.0; x.numel()];
        for bi in 0..b {
            for ci in 0..c {
                for hi in 0..h {
                    let g = gate.data()[(bi * c + ci) * h + hi];
                    for wi in 0..w {
                        let idx = ((bi * c + ci) * h + hi) * w + wi;
                        out[idx] = x.data()[idx] * g;
                    }
                }
            }
        }
        Tensor::new(x.shape(), out)
    }

    /// Multiply a (B,C,1,W) gate onto (B,C,H,W).
    pub fn mul_wgate_ref(x: &Tensor<f64>, gate: &Tensor<f64>) -> Tensor<f64> {
        let (b, c, h, w) = x.dims4();
        let mut out = vec![0.0; x.numel()];
        for bi in 0..b {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        let idx = ((bi * c + ci) * h + hi) * w + wi;
                        out[idx] = x.data()[idx] * gate.data()[(bi * c + ci) * w + wi];
                    }
                }
            }
        }
        Tensor::new(x.shape(), out)
    }

    /// Channel shuffle by the closed-form index map.
    pub fn shuffle_ref(x: &Tensor<f64>, groups: usize) -> Tensor<f64> {
        let (b, c, h, w) = x.dims4();
        let per = c / groups;
        let mut out = vec![0.0; x.numel()];
        for bi in 0..b {
            for oc in 0..c {
                let ic = (oc % groups) * per + oc / groups;
                let src = &x.data()[(bi * c + ic) * h * w..(bi * c + ic + 1) * h * w];
                out[(bi * c + oc) * h * w..(bi * c + oc + 1) * h * w].copy_from_slice(src);
            }
        }
        Tensor::new(x.shape(), out)
    }

    /// Direction orders built by explicit traversal (independent of the
    /// formula-based maps in the ops module).
    pub fn traversal_orders(h: usize, w: usize) -> [Vec<usize>; 4] {
        let mut row_major = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                row_major.push(y * w + x);
            }
        }
        let mut col_major = Vec::with_capacity(h * w);
        for x in 0..w {
            for y in 0..h {
                col_major.push(y * w + x);
            }
        }
        let row_rev: Vec<usize> = row_major.iter().rev().cloned().collect();
        let col_rev: Vec<usize> = col_major.iter().rev().cloned().collect();
        [row_major, col_major, row_rev, col_rev]
    }

    /// Quadratic-time unrolled scan: materialize every decay product.
    /// Shapes as in the production op: u/delta (B,C,L), b/c (B,N,L),
    /// a (C,N), d (C).
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan_unrolled(
        u: &Tensor<f64>,
        delta: &Tensor<f64>,
        b_mat: &Tensor<f64>,
        c_mat: &Tensor<f64>,
        a: &Tensor<f64>,
        d: &Tensor<f64>,
    ) -> Tensor<f64> {
        let (bsz, ch, l) = u.dims3();
        let (_, n, _) = b_mat.dims3();
        let mut out = vec![0.0; bsz * ch * l];
        for bi in 0..bsz {
            for ci in 0..ch {
                for t in 0..l {
                    let ut = u.data()[(bi * ch + ci) * l + t];
                    let mut y = d.data()[ci] * ut;
                    for ni in 0..n {
                        let an = a.data()[ci * n + ni];
                        let ct = c_mat.data()[(bi * n + ni) * l + t];
                        for s in 0..=t {
                            // product of decays over (s, t]
                            let mut decay = 1.0;
                            for r in s + 1..=t {
                                decay *= (delta.data()[(bi * ch + ci) * l + r] * an).exp();
                            }
                            let ds = delta.data()[(bi * ch + ci) * l + s];
                            let bs = b_mat.data()[(bi * n + ni) * l + s];
                            let us = u.data()[(bi * ch + ci) * l + s];
                            y += ct * decay * ds * bs * us;
                        }
                    }
                    out[(bi * ch + ci) * l + t] = y;
                }
            }
        }
        Tensor::new(&[bsz, ch, l], out)
    }

    fn p<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a Tensor<f64> {
        store.param(name)
    }

    fn bn<'a>(
        store: &'a ParamStore<f64>,
        prefix: &str,
    ) -> (&'a Tensor<f64>, &'a Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        (
            store.param(&format!("{prefix}.gamma")),
            store.param(&format!("{prefix}.beta")),
            store.buffer(&format!("{prefix}.running_mean")).clone(),
            store.buffer(&format!("{prefix}.running_var")).clone(),
        )
    }

    fn bn_apply(store: &ParamStore<f64>, prefix: &str, x: &Tensor<f64>) -> Tensor<f64> {
        let (gamma, beta, mean, var) = bn(store, prefix);
        bn_eval_ref(x, gamma, beta, &mean, &var, 1e-5)
    }

    /// Straight-line composition of the bottleneck block (evaluation mode),
    /// reading the same parameters the production block registered.
    pub fn edab_ref(
        store: &ParamStore<f64>,
        prefix: &str,
        cfg: &EdabConfig,
        x: &Tensor<f64>,
    ) -> Tensor<f64> {
        let m = cfg.channels / 2;
        let r = cfg.dilation_rate;
        let c1 = |x: &Tensor<f64>, name: &str| {
            conv2d_ref(x, p(store, &format!("{prefix}.{name}.weight")), None, (1, 1), (0, 0), (1, 1), 1)
        };
        // trunk
        let t = relu_ref(&bn_apply(store, &format!("{prefix}.bn_reduce"), &c1(x, "reduce")));
        let t = conv2d_ref(&t, p(store, &format!("{prefix}.conv31.weight")), None, (1, 1), (1, 0), (1, 1), 1);
        let t = relu_ref(&bn_apply(store, &format!("{prefix}.bn31"), &t));
        let t = conv2d_ref(&t, p(store, &format!("{prefix}.conv13.weight")), None, (1, 1), (0, 1), (1, 1), 1);
        let f_up = relu_ref(&bn_apply(store, &format!("{prefix}.bn13"), &t));
        // local branch + channel gate
        let b1 = conv2d_ref(&f_up, p(store, &format!("{prefix}.b1_dw31.weight")), None, (1, 1), (1, 0), (1, 1), m);
        let b1 = relu_ref(&bn_apply(store, &format!("{prefix}.b1_bn_a"), &b1));
        let b1 = conv2d_ref(&b1, p(store, &format!("{prefix}.b1_dw13.weight")), None, (1, 1), (0, 1), (1, 1), m);
        let b1 = bn_apply(store, &format!("{prefix}.b1_bn_b"), &b1);
        let pooled = global_avg_ref(&b1);
        let hgate = relu_ref(&conv2d_ref(
            &pooled,
            p(store, &format!("{prefix}.ca.fc1.weight")),
            Some(p(store, &format!("{prefix}.ca.fc1.bias"))),
            (1, 1),
            (0, 0),
            (1, 1),
            1,
        ));
        let gate = sigmoid_ref(&conv2d_ref(
            &hgate,
            p(store, &format!("{prefix}.ca.fc2.weight")),
            Some(p(store, &format!("{prefix}.ca.fc2.bias"))),
            (1, 1),
            (0, 0),
            (1, 1),
            1,
        ));
        let b1 = mul_channel_ref(&b1, &gate);
        // dilated branch + directional gates
        let b2 = conv2d_ref(&f_up, p(store, &format!("{prefix}.b2_dw31.weight")), None, (1, 1), (r, 0), (r, 1), m);
        let b2 = relu_ref(&bn_apply(store, &format!("{prefix}.b2_bn_a"), &b2));
        let b2 = conv2d_ref(&b2, p(store, &format!("{prefix}.b2_dw13.weight")), None, (1, 1), (0, r), (1, r), m);
        let b2 = bn_apply(store, &format!("{prefix}.b2_bn_b"), &b2);
        let strip_h = pool_width_ref(&b2);
        let gate_h = sigmoid_ref(&conv2d_ref(
            &strip_h,
            p(store, &format!("{prefix}.dda.conv_h.weight")),
            Some(p(store, &format!("{prefix}.dda.conv_h.bias"))),
            (1, 1),
            (1, 0),
            (1, 1),
            m,
        ));
        let strip_w = pool_height_ref(&b2);
        let gate_w = sigmoid_ref(&conv2d_ref(
            &strip_w,
            p(store, &format!("{prefix}.dda.conv_w.weight")),
            Some(p(store, &format!("{prefix}.dda.conv_w.bias"))),
            (1, 1),
            (0, 1),
            (1, 1),
            m,
        ));
        let b2 = mul_wgate_ref(&mul_hgate_ref(&b2, &gate_h), &gate_w);
        // sum, restore, residual, shuffle
        let summed = add_ref(&add_ref(&f_up, &b1), &b2);
        let restored = bn_apply(store, &format!("{prefix}.bn_restore"), &c1(&summed, "restore"));
        let residual = add_ref(&restored, x);
        shuffle_ref(&residual, cfg.shuffle_groups)
    }

    /// Straight-line composition of the skip unit (evaluation mode).
    pub fn msau_ref(
        store: &ParamStore<f64>,
        prefix: &str,
        cfg: &MsauConfig,
        x: &Tensor<f64>,
    ) -> Tensor<f64> {
        let c = cfg.channels;
        let m = c / 2;
        // spatial aggregation
        let reduced = conv2d_ref(x, p(store, &format!("{prefix}.reduce.weight")), None, (1, 1), (0, 0), (1, 1), 1);
        let reduced = relu_ref(&bn_apply(store, &format!("{prefix}.bn_reduce"), &reduced));
        let mut x1: Option<Tensor<f64>> = None;
        for &k in &cfg.kernel_set {
            let dw = conv2d_ref(
                &reduced,
                p(store, &format!("{prefix}.branch{k}.dw.weight")),
                None,
                (1, 1),
                ((k - 1) / 2, (k - 1) / 2),
                (1, 1),
                m,
            );
            let pw = conv2d_ref(&dw, p(store, &format!("{prefix}.branch{k}.pw.weight")), None, (1, 1), (0, 0), (1, 1), 1);
            let v = bn_apply(store, &format!("{prefix}.branch{k}.bn"), &pw);
            x1 = Some(match x1 {
                None => v,
                Some(acc) => add_ref(&acc, &v),
            });
        }
        let x1 = x1.unwrap();
        // width-wise gate
        let pooled = pool_height_ref(x);
        let padded = replicate_pad_ref(&pooled, 3, 3);
        let g = conv2d_ref(
            &padded,
            p(store, &format!("{prefix}.gate_dw.weight")),
            Some(p(store, &format!("{prefix}.gate_dw.bias"))),
            (1, 1),
            (0, 0),
            (1, 1),
            c,
        );
        let g = conv2d_ref(
            &g,
            p(store, &format!("{prefix}.gate_pw.weight")),
            Some(p(store, &format!("{prefix}.gate_pw.bias"))),
            (1, 1),
            (0, 0),
            (1, 1),
            1,
        );
        let gate = sigmoid_ref(&g);
        let gated = mul_wgate_ref(&x1, &gate);
        let x2 = conv2d_ref(&gated, p(store, &format!("{prefix}.expand.weight")), None, (1, 1), (0, 0), (1, 1), 1);
        let x2 = bn_apply(store, &format!("{prefix}.bn_expand"), &x2);
        // channel aggregation
        let xp = replicate_pad_ref(x, 1, 1);
        let s = conv2d_ref(&xp, p(store, &format!("{prefix}.agg_dw.weight")), None, (1, 1), (0, 0), (1, 1), c);
        let mlp = |pooled: &Tensor<f64>| {
            let h = relu_ref(&conv2d_ref(
                pooled,
                p(store, &format!("{prefix}.agg_fc1.weight")),
                Some(p(store, &format!("{prefix}.agg_fc1.bias"))),
                (1, 1),
                (0, 0),
                (1, 1),
                1,
            ));
            conv2d_ref(
                &h,
                p(store, &format!("{prefix}.agg_fc2.weight")),
                Some(p(store, &format!("{prefix}.agg_fc2.bias"))),
                (1, 1),
                (0, 0),
                (1, 1),
                1,
            )
        };
        let x3 = mlp(&global_avg_ref(&s));
        let x4 = mlp(&global_max_ref(&s));
        let desc = add_ref(&x3, &x4);
        add_ref(x, &mul_channel_ref(&x2, &desc))
    }

    /// Staged composition of the scan block (evaluation mode).
    pub fn ss2d_ref(
        store: &ParamStore<f64>,
        prefix: &str,
        cfg: &Ss2dConfig,
        x: &Tensor<f64>,
    ) -> Tensor<f64> {
        let (bsz, d, h, w) = x.dims4();
        assert_eq!(d, cfg.dim);
        let l = h * w;
        let (n, r) = (cfg.state_dim, cfg.dt_rank);
        let c1 = |x: &Tensor<f64>, name: &str, bias: bool| {
            let b = if bias {
                Some(p(store, &format!("{prefix}.{name}.bias")).clone())
            } else {
                None
            };
            conv2d_ref(
                x,
                p(store, &format!("{prefix}.{name}.weight")),
                b.as_ref(),
                (1, 1),
                (0, 0),
                (1, 1),
                1,
            )
        };
        let z = c1(x, "in_proj_z", true);
        let xp = c1(x, "in_proj_x", true);
        let xp = conv2d_ref(
            &xp,
            p(store, &format!("{prefix}.dwconv.weight")),
            Some(p(store, &format!("{prefix}.dwconv.bias"))),
            (1, 1),
            (1, 1),
            (1, 1),
            d,
        );
        let xp = silu_ref(&xp);

        let orders = traversal_orders(h, w);
        let mut merged = vec![0.0; bsz * d * l];
        for (k, order) in orders.iter().enumerate() {
            // gather the sequence
            let mut u = vec![0.0; bsz * d * l];
            for bi in 0..bsz {
                for ci in 0..d {
                    for (t, &pos) in order.iter().enumerate() {
                        u[(bi * d + ci) * l + t] = xp.data()[(bi * d + ci) * l + pos];
                    }
                }
            }
            let u = Tensor::new(&[bsz, d, l], u);
            // per-position projections as (B,*,L,1) convolutions
            let u4 = u.reshaped(&[bsz, d, l, 1]);
            let x_dbl = conv2d_ref(
                &u4,
                p(store, &format!("{prefix}.dir{k}.x_proj.weight")),
                None,
                (1, 1),
                (0, 0),
                (1, 1),
                1,
            );
            // split channels: dt (r), b (n), c (n)
            let mut dt = vec![0.0; bsz * r * l];
            let mut bm = vec![0.0; bsz * n * l];
            let mut cm = vec![0.0; bsz * n * l];
            for bi in 0..bsz {
                for t in 0..l {
                    for i in 0..r {
                        dt[(bi * r + i) * l + t] = x_dbl.data()[((bi * (r + 2 * n)) + i) * l + t];
                    }
                    for i in 0..n {
                        bm[(bi * n + i) * l + t] =
                            x_dbl.data()[((bi * (r + 2 * n)) + r + i) * l + t];
                        cm[(bi * n + i) * l + t] =
                            x_dbl.data()[((bi * (r + 2 * n)) + r + n + i) * l + t];
                    }
                }
            }
            let dt4 = Tensor::new(&[bsz, r, l, 1], dt);
            let delta = conv2d_ref(
                &dt4,
                p(store, &format!("{prefix}.dir{k}.dt_proj.weight")),
                Some(p(store, &format!("{prefix}.dir{k}.dt_proj.bias"))),
                (1, 1),
                (0, 0),
                (1, 1),
                1,
            );
            let delta = softplus_ref(&delta).reshaped(&[bsz, d, l]);
            let a = p(store, &format!("{prefix}.dir{k}.a_log")).map(|v| -v.exp());
            let y = selective_scan_unrolled(
                &u,
                &delta,
                &Tensor::new(&[bsz, n, l], bm),
                &Tensor::new(&[bsz, n, l], cm),
                &a,
                p(store, &format!("{prefix}.dir{k}.d_skip")),
            );
            // scatter back
            for bi in 0..bsz {
                for ci in 0..d {
                    for (t, &pos) in order.iter().enumerate() {
                        merged[(bi * d + ci) * l + pos] += y.data()[(bi * d + ci) * l + t];
                    }
                }
            }
        }
        let merged = Tensor::new(&[bsz, d, h, w], merged);
        let y = layer_norm_ref(
            &merged,
            p(store, &format!("{prefix}.out_norm.gamma")),
            p(store, &format!("{prefix}.out_norm.beta")),
            1e-6,
        );
        // gate and project
        let gated = {
            let zs = silu_ref(&z);
            let mut out = vec![0.0; y.numel()];
            for (i, v) in out.iter_mut().enumerate() {
                *v = y.data()[i] * zs.data()[i];
            }
            Tensor::new(y.shape(), out)
        };
        c1(&gated, "out_proj", true)
    }

    /// Staged composition of the fusion module (evaluation mode) for the
    /// three-stream form.
    pub fn ffm_ref(
        store: &ParamStore<f64>,
        prefix: &str,
        cfg: &FfmConfig,
        x_encoder: &Tensor<f64>,
        streams: &[&Tensor<f64>],
    ) -> Tensor<f64> {
        let (b, ce, h, w) = x_encoder.dims4();
        let mut c_total = ce;
        for s in streams {
            c_total += s.dims4().1;
        }
        assert_eq!(c_total, cfg.fused_channels);
        // concat
        let plane = h * w;
        let mut cat = vec![0.0; b * c_total * plane];
        for bi in 0..b {
            let mut off = 0usize;
            for src in std::iter::once(x_encoder).chain(streams.iter().cloned()) {
                let (_, sc, _, _) = src.dims4();
                cat[(bi * c_total + off) * plane..(bi * c_total + off + sc) * plane]
                    .copy_from_slice(&src.data()[bi * sc * plane..(bi + 1) * sc * plane]);
                off += sc;
            }
        }
        let cat = Tensor::new(&[b, c_total, h, w], cat);
        let fused = conv2d_ref(&cat, p(store, &format!("{prefix}.fuse.weight")), None, (1, 1), (0, 0), (1, 1), 1);
        let mut z = bn_apply(store, &format!("{prefix}.bn_fuse"), &fused);
        for i in 0..cfg.depth {
            let lp = format!("{prefix}.layer{i}");
            z = ss2d_ref(
                store,
                &format!("{lp}.ss2d"),
                &Ss2dConfig::new(cfg.model_dim, cfg.state_dim),
                &z,
            );
            let zn = layer_norm_ref(
                &z,
                p(store, &format!("{lp}.ln_ffn.gamma")),
                p(store, &format!("{lp}.ln_ffn.beta")),
                1e-6,
            );
            let hidden = silu_ref(&conv2d_ref(
                &zn,
                p(store, &format!("{lp}.ffn_expand.weight")),
                Some(p(store, &format!("{lp}.ffn_expand.bias"))),
                (1, 1),
                (0, 0),
                (1, 1),
                1,
            ));
            z = conv2d_ref(
                &hidden,
                p(store, &format!("{lp}.ffn_contract.weight")),
                Some(p(store, &format!("{lp}.ffn_contract.bias"))),
                (1, 1),
                (0, 0),
                (1, 1),
                1,
            );
        }
        let projected = conv2d_ref(&z, p(store, &format!("{prefix}.project.weight")), None, (1, 1), (0, 0), (1, 1), 1);
        add_ref(&projected, x_encoder)
    }

    /// Brute-force per-class IoU from raw label maps (set arithmetic).
    pub fn iou_brute_force(pred: &[u8], gt: &[u8], classes: usize) -> Vec<Option<f64>> {
        (0..classes as u8)
            .map(|c| {
                let mut inter = 0u64;
                let mut union = 0u64;
                for (&p, &g) in pred.iter().zip(gt.iter()) {
                    if g == 255 {
                        continue;
                    }
                    let in_p = p == c;
                    let in_g = g == c;
                    if in_p && in_g {
                        inter += 1;
                    }
                    if in_p || in_g {
                        union += 1;
                    }
                }
                if union == 0 {
                    None
                } else {
                    Some(inter as f64 / union as f64)
                }
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

/// Result of a directional finite-difference check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub directions: usize,
    pub passed: bool,
}

/// Compare analytic parameter gradients against central finite differences
/// along `directions` random unit directions in parameter space.
pub fn directional_gradcheck(
    store: &ParamStore<f64>,
    forward: &dyn Fn(&ParamStore<f64>) -> f64,
    analytic: &BTreeMap<String, Tensor<f64>>,
    directions: usize,
    eps: f64,
    tol: f64,
    seed: u64,
) -> GradCheck {
    let names: Vec<String> = store.param_names();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel: f64 = 0.0;
    for _ in 0..directions {
        // random direction over all parameter scalars
        let mut dir: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut norm2 = 0.0;
        for name in &names {
            let numel = store.param(name).numel();
            let d: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
            norm2 += d.iter().map(|v| v * v).sum::<f64>();
            dir.insert(name.clone(), d);
        }
        let norm = norm2.sqrt().max(1e-12);
        // analytic directional derivative
        let mut a = 0.0;
        for (name, d) in &dir {
            if let Some(g) = analytic.get(name) {
                for (gv, dv) in g.data().iter().zip(d.iter()) {
                    a += gv * dv / norm;
                }
            }
        }
        // numeric via central difference
        let perturbed = |sign: f64| {
            let mut s = store.clone();
            for (name, d) in &dir {
                let mut t = s.param(name).clone();
                for (tv, dv) in t.data_mut().iter_mut().zip(d.iter()) {
                    *tv += sign * eps * dv / norm;
                }
                s.set_param(name, t);
            }
            s
        };
        let fp = forward(&perturbed(1.0));
        let fm = forward(&perturbed(-1.0));
        let numeric = (fp - fm) / (2.0 * eps);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
    }
    GradCheck {
        max_rel_err: max_rel,
        directions,
        passed: max_rel < tol,
    }
}

fn rng_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Gradient checks for each novel block plus the loss, at tiny sizes.
/// `directions` controls thoroughness (the acceptance suite uses 20).
pub fn gradient_suite(directions: usize) -> Vec<(String, GradCheck)> {
    let mut results = Vec::new();
    let tol = 1e-4;
    let eps = 1e-5;

    // bottleneck block: 2 channels, 5x5
    {
        let edab = Edab::new("g", EdabConfig::new(2, 2)).unwrap();
        let mut store: ParamStore<f64> = ParamStore::new();
        edab.register(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let x = rng_tensor(&[1, 2, 5, 5], 2, -1.0, 1.0);
        let f = |s: &ParamStore<f64>| {
            let sess = Session::new(s, true);
            let xv = sess.input(x.clone());
            let y = edab.forward(&sess, xv).unwrap();
            let sum = crate::ops::sum_all(&sess.tape, y);
            sess.value(sum).data()[0]
        };
        let sess = Session::new(&store, true);
        let xv = sess.input(x.clone());
        let y = edab.forward(&sess, xv).unwrap();
        let sum = crate::ops::sum_all(&sess.tape, y);
        let mut grads = sess.tape.backward(sum);
        let analytic = sess.param_grads(&mut grads);
        results.push((
            "edab".to_string(),
            directional_gradcheck(&store, &f, &analytic, directions, eps, tol, 11),
        ));
    }

    // skip unit: 4 channels, 6x6
    {
        let msau = Msau::new("g", MsauConfig::new(4)).unwrap();
        let mut store: ParamStore<f64> = ParamStore::new();
        msau.register(&mut store, &mut ChaCha8Rng::seed_from_u64(3));
        let x = rng_tensor(&[1, 4, 6, 6], 4, -1.0, 1.0);
        let f = |s: &ParamStore<f64>| {
            let sess = Session::new(s, true);
            let xv = sess.input(x.clone());
            let y = msau.forward(&sess, xv).unwrap();
            let sum = crate::ops::sum_all(&sess.tape, y);
            sess.value(sum).data()[0]
        };
        let sess = Session::new(&store, true);
        let xv = sess.input(x.clone());
        let y = msau.forward(&sess, xv).unwrap();
        let sum = crate::ops::sum_all(&sess.tape, y);
        let mut grads = sess.tape.backward(sum);
        let analytic = sess.param_grads(&mut grads);
        results.push((
            "msau".to_string(),
            directional_gradcheck(&store, &f, &analytic, directions, eps, tol, 12),
        ));
    }

    // scan block: (1,2,3,3)
    {
        let ss2d = Ss2d::new("g", Ss2dConfig::new(2, 2));
        let mut store: ParamStore<f64> = ParamStore::new();
        ss2d.register(&mut store, &mut ChaCha8Rng::seed_from_u64(5));
        let x = rng_tensor(&[1, 2, 3, 3], 6, -1.0, 1.0);
        let f = |s: &ParamStore<f64>| {
            let sess = Session::new(s, true);
            let xv = sess.input(x.clone());
            let y = ss2d.forward(&sess, xv).unwrap();
            let sum = crate::ops::sum_all(&sess.tape, y);
            sess.value(sum).data()[0]
        };
        let sess = Session::new(&store, true);
        let xv = sess.input(x.clone());
        let y = ss2d.forward(&sess, xv).unwrap();
        let sum = crate::ops::sum_all(&sess.tape, y);
        let mut grads = sess.tape.backward(sum);
        let analytic = sess.param_grads(&mut grads);
        results.push((
            "ss2d".to_string(),
            directional_gradcheck(&store, &f, &analytic, directions, eps, tol, 13),
        ));
    }

    // fusion module: encoder 4 + streams 2 + 2
    {
        let ffm = Ffm::new(
            "g",
            FfmConfig {
                state_dim: 2,
                ..FfmConfig::new(8, 4, 4)
            },
        );
        let mut store: ParamStore<f64> = ParamStore::new();
        ffm.register(&mut store, &mut ChaCha8Rng::seed_from_u64(7));
        let enc = rng_tensor(&[1, 4, 4, 4], 8, -1.0, 1.0);
        let s1 = rng_tensor(&[1, 2, 4, 4], 9, -1.0, 1.0);
        let s2 = rng_tensor(&[1, 2, 4, 4], 10, -1.0, 1.0);
        let f = |s: &ParamStore<f64>| {
            let sess = Session::new(s, true);
            let e = sess.input(enc.clone());
            let a = sess.input(s1.clone());
            let b = sess.input(s2.clone());
            let y = ffm.forward(&sess, e, a, b).unwrap();
            let sum = crate::ops::sum_all(&sess.tape, y);
            sess.value(sum).data()[0]
        };
        let sess = Session::new(&store, true);
        let e = sess.input(enc.clone());
        let a = sess.input(s1.clone());
        let b = sess.input(s2.clone());
        let y = ffm.forward(&sess, e, a, b).unwrap();
        let sum = crate::ops::sum_all(&sess.tape, y);
        let mut grads = sess.tape.backward(sum);
        let analytic = sess.param_grads(&mut grads);
        results.push((
            "ffm".to_string(),
            directional_gradcheck(&store, &f, &analytic, directions, eps, tol, 14),
        ));
    }

    // loss w.r.t. logits through a leaf "parameter" store
    {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert_param("logits", rng_tensor(&[1, 3, 3, 3], 15, -1.0, 1.0));
        let labels: Vec<u8> = vec![0, 1, 2, 255, 1, 0, 2, 1, 0];
        let f = |s: &ParamStore<f64>| {
            let sess = Session::new(s, true);
            let l = sess.param("logits");
            let (loss, _) = cross_entropy_loss(&sess.tape, l, &labels, None);
            sess.value(loss).data()[0]
        };
        let store2 = store.clone();
        let sess = Session::new(&store2, true);
        let l = sess.param("logits");
        let (loss, _) = cross_entropy_loss(&sess.tape, l, &labels, None);
        let mut grads = sess.tape.backward(loss);
        let analytic = sess.param_grads(&mut grads);
        results.push((
            "loss".to_string(),
            directional_gradcheck(&store, &f, &analytic, directions, eps, tol, 16),
        ));
    }

    results
}

// ---------------------------------------------------------------------------
// suites
// ---------------------------------------------------------------------------

fn timed(name: &'static str, body: impl FnOnce() -> Result<String, String>) -> SuiteResult {
    let t0 = std::time::Instant::now();
    let (passed, detail) = match body() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    SuiteResult {
        name,
        passed,
        detail,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

/// Cross-scan bijections against independently built traversal orders;
/// `corrupt` simulates a broken direction to verify failure surfacing.
pub fn check_cross_scan(corrupt: bool) -> Result<String, String> {
    use crate::ops;
    for (h, w) in [(1usize, 1usize), (2, 2), (3, 5), (8, 8), (5, 8)] {
        let x = rng_tensor(&[2, 3, h, w], 100 + (h * 31 + w) as u64, -1.0, 1.0);
        let tape: Tape<f64> = Tape::no_grad();
        let xv = tape.leaf(x.clone());
        let scans = tape.value(ops::cross_scan(&tape, xv));
        let mut scans_data = scans.data().to_vec();
        if corrupt && h * w >= 2 {
            // test hook: swap the first two elements of direction 1
            let l = h * w;
            let base = 3 * l + 0; // (b=0, d=1, c=0)
            scans_data.swap(base, base + 1);
        }
        let orders = oracle::traversal_orders(h, w);
        let l = h * w;
        for bi in 0..2 {
            for (d, order) in orders.iter().enumerate() {
                for ci in 0..3 {
                    for (t, &pos) in order.iter().enumerate() {
                        let got = scans_data[((bi * 4 + d) * 3 + ci) * l + t];
                        let want = x.data()[(bi * 3 + ci) * l + pos];
                        if got != want {
                            return Err(format!(
                                "cross_scan direction {d} mismatch at {h}x{w}, b{bi} c{ci} t{t}"
                            ));
                        }
                    }
                }
            }
        }
        // merge(scan(x)) = 4x exactly on dyadic inputs
        let mut rng = ChaCha8Rng::seed_from_u64(7 + l as u64);
        let data: Vec<f64> = (0..2 * 3 * l)
            .map(|_| rng.gen_range(-512..=512) as f64 / 256.0)
            .collect();
        let xd = Tensor::new(&[2, 3, h, w], data.clone());
        let tape: Tape<f64> = Tape::no_grad();
        let xv = tape.leaf(xd);
        let merged = tape.value(ops::cross_merge(&tape, ops::cross_scan(&tape, xv), h, w));
        for (i, &v) in merged.data().iter().enumerate() {
            if v != 4.0 * data[i] {
                return Err(format!("merge(scan(x)) != 4x at {h}x{w} index {i}"));
            }
        }
    }
    Ok("bijections and 4x identity hold on grids up to 8x8".to_string())
}

/// Linear-time scan against the quadratic unrolled oracle.
pub fn check_selective_scan(instances: usize, tol: f64) -> Result<String, String> {
    use crate::ops;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let bsz = 1 + (i % 2);
        let ch = 1 + rng.gen_range(0..4);
        let l = 1 + rng.gen_range(0..32);
        let n = 1 + rng.gen_range(0..8);
        let u = rng_tensor(&[bsz, ch, l], 3000 + i as u64, -1.0, 1.0);
        let delta = rng_tensor(&[bsz, ch, l], 4000 + i as u64, 0.01, 1.0);
        let bm = rng_tensor(&[bsz, n, l], 5000 + i as u64, -1.0, 1.0);
        let cm = rng_tensor(&[bsz, n, l], 6000 + i as u64, -1.0, 1.0);
        let a = rng_tensor(&[ch, n], 7000 + i as u64, -2.0, -0.05);
        let d = rng_tensor(&[ch], 8000 + i as u64, -1.0, 1.0);
        let tape: Tape<f64> = Tape::no_grad();
        let y = tape.value(ops::selective_scan(
            &tape,
            tape.leaf(u.clone()),
            tape.leaf(delta.clone()),
            tape.leaf(bm.clone()),
            tape.leaf(cm.clone()),
            tape.leaf(a.clone()),
            tape.leaf(d.clone()),
        ));
        let want = oracle::selective_scan_unrolled(&u, &delta, &bm, &cm, &a, &d);
        let diff = y.max_abs_diff(&want).expect("same shape");
        worst = worst.max(diff);
        if diff > tol {
            return Err(format!(
                "instance {i} (L={l}, N={n}): max abs diff {diff:.3e} > {tol:.0e}"
            ));
        }
    }
    Ok(format!(
        "{instances} random instances within {tol:.0e} (worst {worst:.3e})"
    ))
}

/// Shuffle is the closed-form permutation and preserves channel contents.
pub fn check_channel_shuffle() -> Result<String, String> {
    use crate::ops;
    for c in 1..=16usize {
        for g in 1..=c {
            if c % g != 0 {
                continue;
            }
            let x = rng_tensor(&[1, c, 2, 2], (c * 100 + g) as u64, -1.0, 1.0);
            let tape: Tape<f64> = Tape::no_grad();
            let y = tape.value(ops::channel_shuffle_op(&tape, tape.leaf(x.clone()), g));
            let want = oracle::shuffle_ref(&x, g);
            if y != want {
                return Err(format!("shuffle C={c} g={g} differs from the index map"));
            }
            // permutation: sorted per-channel fingerprints agree
            let fp = |t: &Tensor<f64>| {
                let mut sums: Vec<String> = (0..c)
                    .map(|ci| format!("{:?}", &t.data()[ci * 4..(ci + 1) * 4]))
                    .collect();
                sums.sort();
                sums
            };
            if fp(&x) != fp(&y) {
                return Err(format!("shuffle C={c} g={g} is not a permutation"));
            }
        }
    }
    Ok("permutation law holds for all C <= 16, g | C".to_string())
}

/// Metric pipeline against brute-force set arithmetic.
pub fn check_metrics(trials: usize) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for i in 0..trials {
        let k = rng.gen_range(2..=5usize);
        let n = 64; // 8x8
        let gen_map = |rng: &mut ChaCha8Rng, allow_ignore: bool| -> Vec<u8> {
            (0..n)
                .map(|_| {
                    if allow_ignore && rng.gen_range(0..10) == 0 {
                        255
                    } else {
                        rng.gen_range(0..k) as u8
                    }
                })
                .collect()
        };
        let gt = gen_map(&mut rng, true);
        let pred: Vec<u8> = (0..n).map(|_| rng.gen_range(0..k) as u8).collect();
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&pred, &gt).map_err(|e| e.to_string())?;
        let got = cm.iou_per_class();
        let want = oracle::iou_brute_force(&pred, &gt, k);
        if got != want {
            return Err(format!("trial {i}: IoU mismatch {got:?} vs {want:?}"));
        }
        // streaming vs batch
        let mut streamed = ConfusionMatrix::new(k);
        let half = n / 2;
        streamed
            .accumulate(&pred[..half], &gt[..half])
            .map_err(|e| e.to_string())?;
        streamed
            .accumulate(&pred[half..], &gt[half..])
            .map_err(|e| e.to_string())?;
        if streamed != cm {
            return Err(format!("trial {i}: streaming and batch accumulation differ"));
        }
    }
    Ok(format!("{trials} random label maps match brute force exactly"))
}

/// Fixed-seed block outputs against the straight-line references.
pub fn check_block_oracles() -> Result<String, String> {
    let tol = 1e-10;
    // bottleneck block on (1,4,8,8)
    {
        let cfg = EdabConfig::new(4, 2);
        let edab = Edab::new("o", cfg.clone()).unwrap();
        let mut store: ParamStore<f64> = ParamStore::new();
        edab.register(&mut store, &mut ChaCha8Rng::seed_from_u64(31));
        let x = rng_tensor(&[1, 4, 8, 8], 32, -1.0, 1.0);
        let sess = Session::new(&store, false);
        let y = sess.value(edab.forward(&sess, sess.input(x.clone())).unwrap());
        let want = oracle::edab_ref(&store, "o", &cfg, &x);
        let diff = y.max_abs_diff(&want).unwrap();
        if diff > tol {
            return Err(format!("bottleneck block vs reference: {diff:.2e}"));
        }
    }
    // skip unit on (1,4,6,6)
    {
        let cfg = MsauConfig::new(4);
        let msau = Msau::new("o", cfg.clone()).unwrap();
        let mut store: ParamStore<f64> = ParamStore::new();
        msau.register(&mut store, &mut ChaCha8Rng::seed_from_u64(33));
        let x = rng_tensor(&[1, 4, 6, 6], 34, -1.0, 1.0);
        let sess = Session::new(&store, false);
        let y = sess.value(msau.forward(&sess, sess.input(x.clone())).unwrap());
        let want = oracle::msau_ref(&store, "o", &cfg, &x);
        let diff = y.max_abs_diff(&want).unwrap();
        if diff > tol {
            return Err(format!("skip unit vs reference: {diff:.2e}"));
        }
    }
    // scan block on (1,4,3,3)
    {
        let cfg = Ss2dConfig::new(4, 2);
        let ss2d = Ss2d::new("o", cfg);
        let mut store: ParamStore<f64> = ParamStore::new();
        ss2d.register(&mut store, &mut ChaCha8Rng::seed_from_u64(35));
        let x = rng_tensor(&[1, 4, 3, 3], 36, -1.0, 1.0);
        let sess = Session::new(&store, false);
        let y = sess.value(ss2d.forward(&sess, sess.input(x.clone())).unwrap());
        let want = oracle::ss2d_ref(&store, "o", &cfg, &x);
        let diff = y.max_abs_diff(&want).unwrap();
        if diff > tol {
            return Err(format!("scan block vs reference: {diff:.2e}"));
        }
    }
    // fusion module, tiny
    {
        let cfg = FfmConfig {
            state_dim: 2,
            ..FfmConfig::new(8, 4, 4)
        };
        let ffm = Ffm::new("o", cfg.clone());
        let mut store: ParamStore<f64> = ParamStore::new();
        ffm.register(&mut store, &mut ChaCha8Rng::seed_from_u64(37));
        let enc = rng_tensor(&[1, 4, 4, 4], 38, -1.0, 1.0);
        let s1 = rng_tensor(&[1, 2, 4, 4], 39, -1.0, 1.0);
        let s2 = rng_tensor(&[1, 2, 4, 4], 40, -1.0, 1.0);
        let sess = Session::new(&store, false);
        let y = sess.value(
            ffm.forward(
                &sess,
                sess.input(enc.clone()),
                sess.input(s1.clone()),
                sess.input(s2.clone()),
            )
            .unwrap(),
        );
        let want = oracle::ffm_ref(&store, "o", &cfg, &enc, &[&s1, &s2]);
        let diff = y.max_abs_diff(&want).unwrap();
        if diff > tol {
            return Err(format!("fusion module vs reference: {diff:.2e}"));
        }
    }
    Ok("block outputs match straight-line references within 1e-10".to_string())
}

/// Stability: long sequences with contracting decay stay finite.
pub fn check_scan_stability() -> Result<String, String> {
    use crate::ops;
    let l = 16384usize;
    let u = rng_tensor(&[1, 2, l], 51, -1.0, 1.0);
    let delta = rng_tensor(&[1, 2, l], 52, 0.01, 1.0);
    let bm = rng_tensor(&[1, 2, l], 53, -1.0, 1.0);
    let cm = rng_tensor(&[1, 2, l], 54, -1.0, 1.0);
    let a = rng_tensor(&[2, 2], 55, -2.0, -0.05);
    let d = rng_tensor(&[2], 56, -1.0, 1.0);
    let tape: Tape<f64> = Tape::no_grad();
    let y = tape.value(ops::selective_scan(
        &tape,
        tape.leaf(u),
        tape.leaf(delta),
        tape.leaf(bm),
        tape.leaf(cm),
        tape.leaf(a),
        tape.leaf(d),
    ));
    if !y.all_finite() {
        return Err(format!("non-finite output at L={l}"));
    }
    Ok(format!("finite outputs for L = {l}"))
}

/// Run every verification suite. `corrupt` optionally names a suite whose
/// checked data is deliberately broken (test hook for failure surfacing).
pub fn run_all(corrupt: Option<&str>, grad_directions: usize) -> Vec<SuiteResult> {
    let corrupt_scan = corrupt == Some("cross_scan");
    let mut results = vec![
        timed("cross_scan", move || check_cross_scan(corrupt_scan)),
        timed("selective_scan", || check_selective_scan(200, 1e-10)),
        timed("scan_stability", check_scan_stability),
        timed("channel_shuffle", check_channel_shuffle),
        timed("metrics", || check_metrics(1000)),
        timed("block_oracles", check_block_oracles),
    ];
    let t0 = std::time::Instant::now();
    let grad_results = gradient_suite(grad_directions);
    let all_pass = grad_results.iter().all(|(_, g)| g.passed);
    let detail = grad_results
        .iter()
        .map(|(n, g)| format!("{n}: {:.2e}", g.max_rel_err))
        .collect::<Vec<_>>()
        .join(", ");
    results.push(SuiteResult {
        name: "gradients",
        passed: all_pass,
        detail: if all_pass {
            format!("max relative errors {detail}")
        } else {
            format!("FAILED: {detail}")
        },
        seconds: t0.elapsed().as_secs_f64(),
    });
    results
}

/// No-dead-branch check: every parameter of the complete model receives a
/// nonzero gradient for at least one of a few random input/label draws.
pub fn check_gradient_flow() -> Result<String, String> {
    let mut cfg = make_variant(AblationVariant::C3, 3);
    cfg.stage_channels = [4, 8, 16];
    cfg.blocks_per_stage = [1, 1, 1];
    cfg.decoder_blocks = [1, 1, 1];
    cfg.dilation_schedule = [vec![1], vec![1], vec![2]];
    cfg.ffm_dim = 8;
    cfg.ffm_state_dim = 2;
    let model: Model<f64> = Model::build(cfg).map_err(|e| e.to_string())?;
    let mut touched: BTreeMap<String, bool> = model
        .store()
        .param_names()
        .into_iter()
        .map(|n| (n, false))
        .collect();
    for attempt in 0..3u64 {
        let x = rng_tensor(&[2, 3, 16, 16], 60 + attempt, 0.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(70 + attempt);
        let labels: Vec<u8> = (0..2 * 16 * 16).map(|_| rng.gen_range(0..3) as u8).collect();
        let sess = Session::new(model.store(), true);
        let xv = sess.input(x);
        let logits = model.forward_on(&sess, xv).map_err(|e| e.to_string())?;
        let (loss, _) = cross_entropy_loss(&sess.tape, logits, &labels, None);
        let mut grads = sess.tape.backward(loss);
        for (name, g) in sess.param_grads(&mut grads) {
            if g.data().iter().any(|&v| v != 0.0) {
                touched.insert(name, true);
            }
        }
        if touched.values().all(|&v| v) {
            return Ok(format!(
                "all {} parameters reached after {} draw(s)",
                touched.len(),
                attempt + 1
            ));
        }
    }
    let dead: Vec<String> = touched
        .iter()
        .filter(|(_, &v)| !v)
        .map(|(n, _)| n.clone())
        .collect();
    Err(format!("parameters with no gradient: {dead:?}"))
}
