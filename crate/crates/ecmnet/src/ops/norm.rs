//! Batch normalization (train/eval) and channelwise layer normalization.

use crate::autodiff::{Grads, Tape, Var};
use crate::elem::Scalar;
use crate::tensor::Tensor;

/// Per-channel batch statistics produced by a training-mode forward, used by
/// the trainer to update running buffers.
#[derive(Clone, Debug)]
pub struct BatchStats<E: Scalar> {
    pub mean: Tensor<E>,
    /// Unbiased (N-1) variance, matching the usual running-buffer convention.
    pub var_unbiased: Tensor<E>,
}

/// Training-mode batch norm over (B,H,W) per channel.
pub fn batch_norm_train<E: Scalar>(
    tape: &Tape<E>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> (Var, BatchStats<E>) {
    let vx = tape.value(x);
    let vgamma = tape.value(gamma);
    let vbeta = tape.value(beta);
    let (b, c, h, w) = vx.dims4();
    let n = b * h * w;
    let inv_n = 1.0 / n as f64;
    let plane = h * w;

    let mut mean = vec![E::ZERO; c];
    let mut var = vec![E::ZERO; c];
    for ci in 0..c {
        let mut acc = 0.0f64;
        for bi in 0..b {
            let src = &vx.data()[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
            for &v in src {
                acc += v.to_f64();
            }
        }
        let m = acc * inv_n;
        mean[ci] = E::from_f64(m);
        let mut acc2 = 0.0f64;
        for bi in 0..b {
            let src = &vx.data()[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
            for &v in src {
                let d = v.to_f64() - m;
                acc2 += d * d;
            }
        }
        var[ci] = E::from_f64(acc2 * inv_n);
    }

    let inv_std: Vec<E> = var
        .iter()
        .map(|&v| E::from_f64(1.0 / (v.to_f64() + eps).sqrt()))
        .collect();

    let mut xhat = vec![E::ZERO; vx.numel()];
    let mut out = vec![E::ZERO; vx.numel()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            let (m, s) = (mean[ci], inv_std[ci]);
            let (g, be) = (vgamma.data()[ci], vbeta.data()[ci]);
            for p in 0..plane {
                let xh = (vx.data()[base + p] - m) * s;
                xhat[base + p] = xh;
                out[base + p] = g * xh + be;
            }
        }
    }

    let bessel = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
    let stats = BatchStats {
        mean: Tensor::new(&[c], mean),
        var_unbiased: Tensor::new(
            &[c],
            var.iter().map(|&v| E::from_f64(v.to_f64() * bessel)).collect(),
        ),
    };

    let shape = vx.shape().to_vec();
    let xhat_t = Tensor::new(&shape, xhat);
    let out_var = tape.push(Tensor::new(&shape, out), move |gy, grads: &mut Grads<E>| {
        let mut dgamma = vec![E::ZERO; c];
        let mut dbeta = vec![E::ZERO; c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                for p in 0..plane {
                    let g = gy.data()[base + p];
                    dbeta[ci] += g;
                    dgamma[ci] += g * xhat_t.data()[base + p];
                }
            }
        }
        let mut dx = vec![E::ZERO; shape.iter().product()];
        let inv_n_e = E::from_f64(inv_n);
        for ci in 0..c {
            let mean_dy = dbeta[ci] * inv_n_e;
            let mean_dyxh = dgamma[ci] * inv_n_e;
            let scale = vgamma.data()[ci] * inv_std[ci];
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for p in 0..plane {
                    let g = gy.data()[base + p];
                    let xh = xhat_t.data()[base + p];
                    dx[base + p] = scale * (g - mean_dy - xh * mean_dyxh);
                }
            }
        }
        grads.add(x, Tensor::new(gy.shape(), dx));
        grads.add(gamma, Tensor::new(&[c], dgamma));
        grads.add(beta, Tensor::new(&[c], dbeta));
    });
    (out_var, stats)
}

/// Evaluation-mode batch norm: affine transform from running statistics.
pub fn batch_norm_eval<E: Scalar>(
    tape: &Tape<E>,
    x: Var,
    gamma: Var,
    beta: Var,
    running_mean: &Tensor<E>,
    running_var: &Tensor<E>,
    eps: f64,
) -> Var {
    let vx = tape.value(x);
    let vgamma = tape.value(gamma);
    let vbeta = tape.value(beta);
    let (b, c, h, w) = vx.dims4();
    let plane = h * w;
    let inv_std: Vec<E> = running_var
        .data()
        .iter()
        .map(|&v| E::from_f64(1.0 / (v.to_f64() + eps).sqrt()))
        .collect();
    let rmean = running_mean.clone();
    let mut out = vec![E::ZERO; vx.numel()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            let scale = vgamma.data()[ci] * inv_std[ci];
            let shift = vbeta.data()[ci] - scale * rmean.data()[ci];
            for p in 0..plane {
                out[base + p] = scale * vx.data()[base + p] + shift;
            }
        }
    }
    let shape = vx.shape().to_vec();
    tape.push(Tensor::new(&shape, out), move |gy, grads: &mut Grads<E>| {
        let mut dgamma = vec![E::ZERO; c];
        let mut dbeta = vec![E::ZERO; c];
        let mut dx = vec![E::ZERO; shape.iter().product()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let s = inv_std[ci];
                let scale = vgamma.data()[ci] * s;
                for p in 0..plane {
                    let g = gy.data()[base + p];
                    dbeta[ci] += g;
                    dgamma[ci] += g * (vx.data()[base + p] - rmean.data()[ci]) * s;
                    dx[base + p] = g * scale;
                }
            }
        }
        grads.add(x, Tensor::new(gy.shape(), dx));
        grads.add(gamma, Tensor::new(&[c], dgamma));
        grads.add(beta, Tensor::new(&[c], dbeta));
    })
}

/// Layer norm across the channel axis at every spatial position.
pub fn layer_norm_channels<E: Scalar>(
    tape: &Tape<E>,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Var {
    let vx = tape.value(x);
    let vgamma = tape.value(gamma);
    let vbeta = tape.value(beta);
    let (b, c, h, w) = vx.dims4();
    let plane = h * w;
    let inv_c = 1.0 / c as f64;
    let mut out = vec![E::ZERO; vx.numel()];
    let mut xhat = vec![E::ZERO; vx.numel()];
    let mut inv_std = vec![E::ZERO; b * plane];
    for bi in 0..b {
        for p in 0..plane {
            let mut acc = 0.0f64;
            for ci in 0..c {
                acc += vx.data()[(bi * c + ci) * plane + p].to_f64();
            }
            let m = acc * inv_c;
            let mut acc2 = 0.0f64;
            for ci in 0..c {
                let d = vx.data()[(bi * c + ci) * plane + p].to_f64() - m;
                acc2 += d * d;
            }
            let s = 1.0 / (acc2 * inv_c + eps).sqrt();
            inv_std[bi * plane + p] = E::from_f64(s);
            for ci in 0..c {
                let idx = (bi * c + ci) * plane + p;
                let xh = E::from_f64((vx.data()[idx].to_f64() - m) * s);
                xhat[idx] = xh;
                out[idx] = vgamma.data()[ci] * xh + vbeta.data()[ci];
            }
        }
    }
    let shape = vx.shape().to_vec();
    let xhat_t = Tensor::new(&shape, xhat);
    tape.push(Tensor::new(&shape, out), move |gy, grads: &mut Grads<E>| {
        let mut dgamma = vec![E::ZERO; c];
        let mut dbeta = vec![E::ZERO; c];
        let mut dx = vec![E::ZERO; shape.iter().product()];
        let inv_c_e = E::from_f64(inv_c);
        for bi in 0..b {
            for p in 0..plane {
                let mut mean_dxhat = E::ZERO;
                let mut mean_dxhat_xh = E::ZERO;
                for ci in 0..c {
                    let idx = (bi * c + ci) * plane + p;
                    let g = gy.data()[idx];
                    let xh = xhat_t.data()[idx];
                    dbeta[ci] += g;
                    dgamma[ci] += g * xh;
                    let dxh = g * vgamma.data()[ci];
                    mean_dxhat += dxh;
                    mean_dxhat_xh += dxh * xh;
                }
                mean_dxhat = mean_dxhat * inv_c_e;
                mean_dxhat_xh = mean_dxhat_xh * inv_c_e;
                let s = inv_std[bi * plane + p];
                for ci in 0..c {
                    let idx = (bi * c + ci) * plane + p;
                    let dxh = gy.data()[idx] * vgamma.data()[ci];
                    dx[idx] = s * (dxh - mean_dxhat - xhat_t.data()[idx] * mean_dxhat_xh);
                }
            }
        }
        grads.add(x, Tensor::new(gy.shape(), dx));
        grads.add(gamma, Tensor::new(&[c], dgamma));
        grads.add(beta, Tensor::new(&[c], dbeta));
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{mul, sum_all};
    use rand::{Rng, SeedableRng};

    fn rng_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    #[test]
    fn train_mode_normalizes_to_zero_mean_unit_var() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(rng_tensor(&[3, 2, 4, 4], 1));
        let gamma = tape.leaf(Tensor::full(&[2], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[2]));
        let (y, stats) = batch_norm_train(&tape, x, gamma, beta, 1e-5);
        let vy = tape.value(y);
        let n = 3 * 4 * 4;
        for ci in 0..2 {
            let mut acc = 0.0;
            let mut acc2 = 0.0;
            for bi in 0..3 {
                for p in 0..16 {
                    let v = vy.data()[(bi * 2 + ci) * 16 + p];
                    acc += v;
                    acc2 += v * v;
                }
            }
            assert!((acc / n as f64).abs() < 1e-12);
            assert!((acc2 / n as f64 - 1.0).abs() < 1e-4);
        }
        assert_eq!(stats.mean.numel(), 2);
    }

    /// Gradient of a weighted sum through train-mode batch norm vs central
    /// finite differences.
    #[test]
    fn train_mode_gradient_matches_finite_difference() {
        let x0 = rng_tensor(&[2, 2, 3, 3], 2);
        let g0 = rng_tensor(&[2], 3);
        let b0 = rng_tensor(&[2], 4);
        let weights = rng_tensor(&[2, 2, 3, 3], 5);

        let run = |xt: &Tensor<f64>, gt: &Tensor<f64>, bt: &Tensor<f64>| -> f64 {
            let tape: Tape<f64> = Tape::no_grad();
            let x = tape.leaf(xt.clone());
            let g = tape.leaf(gt.clone());
            let b = tape.leaf(bt.clone());
            let (y, _) = batch_norm_train(&tape, x, g, b, 1e-5);
            let wv = tape.leaf(weights.clone());
            let p = mul(&tape, y, wv);
            let s = sum_all(&tape, p);
            tape.value(s).data()[0]
        };

        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(x0.clone());
        let g = tape.leaf(g0.clone());
        let b = tape.leaf(b0.clone());
        let (y, _) = batch_norm_train(&tape, x, g, b, 1e-5);
        let wv = tape.leaf(weights.clone());
        let p = mul(&tape, y, wv);
        let s = sum_all(&tape, p);
        let mut grads = tape.backward(s);
        let gx = grads.take(x).unwrap();
        let gg = grads.take(g).unwrap();
        let gb = grads.take(b).unwrap();

        let eps = 1e-6;
        for i in (0..x0.numel()).step_by(7) {
            let mut xp = x0.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= eps;
            let fd = (run(&xp, &g0, &b0) - run(&xm, &g0, &b0)) / (2.0 * eps);
            assert!(
                (gx.data()[i] - fd).abs() < 1e-6,
                "dx[{i}]: {} vs {}",
                gx.data()[i],
                fd
            );
        }
        for i in 0..2 {
            let mut gp = g0.clone();
            gp.data_mut()[i] += eps;
            let mut gm = g0.clone();
            gm.data_mut()[i] -= eps;
            let fd = (run(&x0, &gp, &b0) - run(&x0, &gm, &b0)) / (2.0 * eps);
            assert!((gg.data()[i] - fd).abs() < 1e-6);
            let mut bp = b0.clone();
            bp.data_mut()[i] += eps;
            let mut bm = b0.clone();
            bm.data_mut()[i] -= eps;
            let fd = (run(&x0, &g0, &bp) - run(&x0, &g0, &bm)) / (2.0 * eps);
            assert!((gb.data()[i] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_mode_is_the_identity_with_default_buffers_and_identity_affine() {
        let tape: Tape<f64> = Tape::new();
        let x0 = rng_tensor(&[1, 3, 2, 2], 6);
        let x = tape.leaf(x0.clone());
        let gamma = tape.leaf(Tensor::full(&[3], 1.0));
        let beta = tape.leaf(Tensor::zeros(&[3]));
        let y = batch_norm_eval(
            &tape,
            x,
            gamma,
            beta,
            &Tensor::zeros(&[3]),
            &Tensor::full(&[3], 1.0),
            0.0,
        );
        assert!(tape.value(y).max_abs_diff(&x0).unwrap() < 1e-12);
    }

    #[test]
    fn layer_norm_gradcheck() {
        let x0 = rng_tensor(&[1, 4, 2, 3], 7);
        let g0 = rng_tensor(&[4], 8);
        let b0 = rng_tensor(&[4], 9);
        let weights = rng_tensor(&[1, 4, 2, 3], 10);
        let run = |xt: &Tensor<f64>| -> f64 {
            let tape: Tape<f64> = Tape::no_grad();
            let x = tape.leaf(xt.clone());
            let g = tape.leaf(g0.clone());
            let b = tape.leaf(b0.clone());
            let y = layer_norm_channels(&tape, x, g, b, 1e-6);
            let wv = tape.leaf(weights.clone());
            let p = mul(&tape, y, wv);
            tape.value(sum_all(&tape, p)).data()[0]
        };
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(x0.clone());
        let g = tape.leaf(g0.clone());
        let b = tape.leaf(b0.clone());
        let y = layer_norm_channels(&tape, x, g, b, 1e-6);
        let wv = tape.leaf(weights.clone());
        let p = mul(&tape, y, wv);
        let s = sum_all(&tape, p);
        let mut grads = tape.backward(s);
        let gx = grads.take(x).unwrap();
        let eps = 1e-6;
        for i in (0..x0.numel()).step_by(5) {
            let mut xp = x0.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= eps;
            let fd = (run(&xp) - run(&xm)) / (2.0 * eps);
            assert!(
                (gx.data()[i] - fd).abs() < 1e-6,
                "dx[{i}]: {} vs {}",
                gx.data()[i],
                fd
            );
        }
    }
}
