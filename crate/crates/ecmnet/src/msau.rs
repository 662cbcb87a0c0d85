//! Multi-scale attention unit used on each long skip connection.
//!
//! One branch aggregates multi-scale spatial context: a shared 1x1 reduction
//! to half width feeds depth-separable convolutions of several kernel sizes
//! whose outputs are summed, gated by a width-wise spatial attention map
//! (height pooled to 1), and expanded back to full width. The other branch
//! produces per-channel descriptors from average- and max-pooled statistics
//! through a shared bottleneck MLP. The two results multiply and add onto the
//! input.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::blocks::{BlockError, Norm, NormKind};
use crate::elem::Scalar;
use crate::nn::{Conv2d, ParamStore, Session};
use crate::ops::{self, ConvSpec};

/// Configuration of one skip-connection attention unit.
#[derive(Clone, Debug)]
pub struct MsauConfig {
    /// Input and output width C; internal width is C/2.
    pub channels: usize,
    /// Depth-separable kernel sizes of the spatial aggregation branch.
    pub kernel_set: Vec<usize>,
    /// Reduction ratio of the channel-aggregation MLP.
    pub channel_reduction: usize,
    pub norm_kind: NormKind,
}

impl MsauConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            kernel_set: vec![3, 5, 7],
            channel_reduction: 4,
            norm_kind: NormKind::Batch,
        }
    }

    pub fn validate(&self) -> Result<(), BlockError> {
        if self.channels % 2 != 0 || self.channels == 0 {
            return Err(BlockError::OddChannels(self.channels));
        }
        for &k in &self.kernel_set {
            if k % 2 == 0 {
                return Err(BlockError::EvenKernel(k));
            }
        }
        Ok(())
    }
}

/// One depth-separable branch: depthwise k x k then pointwise 1x1.
#[derive(Clone, Debug)]
struct SepBranch {
    dw: Conv2d,
    pw: Conv2d,
    bn: Norm,
}

impl SepBranch {
    fn new(prefix: &str, channels: usize, k: usize, nk: NormKind) -> Self {
        Self {
            dw: Conv2d::new(
                format!("{prefix}.dw"),
                channels,
                channels,
                k,
                k,
                ConvSpec {
                    pad: ((k - 1) / 2, (k - 1) / 2),
                    groups: channels,
                    ..ConvSpec::default()
                },
                false,
            ),
            pw: Conv2d::new(
                format!("{prefix}.pw"),
                channels,
                channels,
                1,
                1,
                ConvSpec::default(),
                false,
            ),
            bn: Norm::new(format!("{prefix}.bn"), channels, nk),
        }
    }
}

/// The skip-connection unit.
#[derive(Clone, Debug)]
pub struct Msau {
    pub cfg: MsauConfig,
    reduce: Conv2d,
    bn_reduce: Norm,
    branches: Vec<SepBranch>,
    gate_dw: Conv2d,
    gate_pw: Conv2d,
    expand: Conv2d,
    bn_expand: Norm,
    agg_dw: Conv2d,
    agg_fc1: Conv2d,
    agg_fc2: Conv2d,
}

impl Msau {
    pub fn new(prefix: &str, cfg: MsauConfig) -> Result<Self, BlockError> {
        cfg.validate()?;
        let c = cfg.channels;
        let m = c / 2;
        let hidden = (c / cfg.channel_reduction).max(1);
        let branches = cfg
            .kernel_set
            .iter()
            .map(|&k| SepBranch::new(&format!("{prefix}.branch{k}"), m, k, cfg.norm_kind))
            .collect();
        Ok(Self {
            reduce: Conv2d::new(format!("{prefix}.reduce"), c, m, 1, 1, ConvSpec::default(), false),
            bn_reduce: Norm::new(format!("{prefix}.bn_reduce"), m, cfg.norm_kind),
            branches,
            // applied on a replicate-padded strip so constant inputs yield
            // spatially constant gates
            gate_dw: Conv2d::new(
                format!("{prefix}.gate_dw"),
                c,
                c,
                7,
                7,
                ConvSpec {
                    groups: c,
                    ..ConvSpec::default()
                },
                true,
            ),
            gate_pw: Conv2d::new(format!("{prefix}.gate_pw"), c, m, 1, 1, ConvSpec::default(), true),
            expand: Conv2d::new(format!("{prefix}.expand"), m, c, 1, 1, ConvSpec::default(), false),
            bn_expand: Norm::new(format!("{prefix}.bn_expand"), c, cfg.norm_kind),
            // applied on a replicate-padded map: constant inputs stay
            // constant, so the average and max pooled paths agree on them
            agg_dw: Conv2d::new(
                format!("{prefix}.agg_dw"),
                c,
                c,
                3,
                3,
                ConvSpec {
                    groups: c,
                    ..ConvSpec::default()
                },
                false,
            ),
            agg_fc1: Conv2d::new(
                format!("{prefix}.agg_fc1"),
                c,
                hidden,
                1,
                1,
                ConvSpec::default(),
                true,
            ),
            agg_fc2: Conv2d::new(
                format!("{prefix}.agg_fc2"),
                hidden,
                c,
                1,
                1,
                ConvSpec::default(),
                true,
            ),
            cfg,
        })
    }

    pub fn register<E: Scalar>(&self, store: &mut ParamStore<E>, rng: &mut ChaCha8Rng) {
        self.reduce.register(store, rng);
        self.bn_reduce.register(store);
        for b in &self.branches {
            b.dw.register(store, rng);
            b.pw.register(store, rng);
            b.bn.register(store);
        }
        self.gate_dw.register(store, rng);
        self.gate_pw.register(store, rng);
        self.expand.register(store, rng);
        self.bn_expand.register(store);
        self.agg_dw.register(store, rng);
        self.agg_fc1.register(store, rng);
        self.agg_fc2.register(store, rng);
    }

    /// Width-wise spatial gate: height pooled to 1, depth-separable 7x7 on
    /// the replicate-padded strip, 1x1 to half width, sigmoid.
    /// Output (B,C/2,1,W).
    pub fn spatial_gate<E: Scalar>(&self, sess: &Session<E>, x: Var) -> Var {
        let pooled = ops::pool_height_to_1(&sess.tape, x);
        let padded = ops::replicate_pad(&sess.tape, pooled, 3, 3);
        let g = self.gate_dw.forward(sess, padded);
        let g = self.gate_pw.forward(sess, g);
        ops::sigmoid_op(&sess.tape, g)
    }

    /// Channel descriptors from average and max pooling through the shared
    /// 3x3 conv and bottleneck MLP. Outputs are (B,C,1,1) each.
    pub fn channel_aggregation<E: Scalar>(&self, sess: &Session<E>, x: Var) -> (Var, Var) {
        let tp = &sess.tape;
        let padded = ops::replicate_pad(tp, x, 1, 1);
        let s = self.agg_dw.forward(sess, padded);
        let mlp = |pooled: Var| {
            let h = ops::relu(tp, self.agg_fc1.forward(sess, pooled));
            self.agg_fc2.forward(sess, h)
        };
        let x3 = mlp(ops::global_avg_pool(tp, s));
        let x4 = mlp(ops::global_max_pool(tp, s));
        (x3, x4)
    }

    pub fn forward<E: Scalar>(&self, sess: &Session<E>, x: Var) -> Result<Var, BlockError> {
        let shape = sess.tape.shape(x);
        if shape.len() != 4 || shape[1] != self.cfg.channels {
            return Err(BlockError::ChannelMismatch {
                expected: self.cfg.channels,
                got: *shape.get(1).unwrap_or(&0),
            });
        }
        let tp = &sess.tape;
        // multi-scale spatial aggregation at half width
        let reduced = ops::relu(tp, self.bn_reduce.forward(sess, self.reduce.forward(sess, x)));
        let mut x1: Option<Var> = None;
        for b in &self.branches {
            let v = b.bn.forward(sess, b.pw.forward(sess, b.dw.forward(sess, reduced)));
            x1 = Some(match x1 {
                None => v,
                Some(acc) => ops::add(tp, acc, v),
            });
        }
        let x1 = x1.expect("kernel_set must be non-empty");
        let gate = self.spatial_gate(sess, x);
        let gated = ops::mul(tp, x1, gate);
        let x2 = self.bn_expand.forward(sess, self.expand.forward(sess, gated));
        // channel aggregation
        let (x3, x4) = self.channel_aggregation(sess, x);
        let desc = ops::add(tp, x3, x4);
        // residual combine
        let refined = ops::mul(tp, x2, desc);
        Ok(ops::add(tp, x, refined))
    }

    pub fn param_count(&self) -> u64 {
        let mut n = self.reduce.param_count()
            + self.bn_reduce.param_count()
            + self.gate_dw.param_count()
            + self.gate_pw.param_count()
            + self.expand.param_count()
            + self.bn_expand.param_count()
            + self.agg_dw.param_count()
            + self.agg_fc1.param_count()
            + self.agg_fc2.param_count();
        for b in &self.branches {
            n += b.dw.param_count() + b.pw.param_count() + b.bn.param_count();
        }
        n
    }

    pub fn conv_macs(&self, h: usize, w: usize) -> u64 {
        // the gate and aggregation convs run valid on replicate-padded inputs
        let mut n = self.reduce.macs(h, w)
            + self.gate_dw.macs(7, w + 6)
            + self.gate_pw.macs(1, w)
            + self.expand.macs(h, w)
            + self.agg_dw.macs(h + 2, w + 2)
            + self.agg_fc1.macs(1, 1) * 2
            + self.agg_fc2.macs(1, 1) * 2;
        for b in &self.branches {
            n += b.dw.macs(h, w) + b.pw.macs(h, w);
        }
        n
    }

    pub fn pointwise_ops(&self, h: usize, w: usize) -> u64 {
        let c = self.cfg.channels as u64;
        let m = c / 2;
        let hw = (h * w) as u64;
        let sums = (self.branches.len() as u64 - 1) * m * hw + c * hw;
        let gating = 2 * m * hw + 2 * c * hw; // spatial gate mul + descriptor mul
        let pools = c * hw * 3; // height pool + global avg/max
        let relus = m * hw;
        sums + gating + pools + relus
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn build(c: usize, seed: u64) -> (Msau, ParamStore<f64>) {
        let msau = Msau::new("m", MsauConfig::new(c)).unwrap();
        let mut store = ParamStore::new();
        msau.register(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        (msau, store)
    }

    #[test]
    fn shape_preserved() {
        let (msau, store) = build(32, 1);
        let sess = Session::new(&store, false);
        let x = sess.input(Tensor::full(&[1, 32, 16, 16], 0.3));
        let y = msau.forward(&sess, x).unwrap();
        assert_eq!(sess.tape.shape(y), vec![1, 32, 16, 16]);
    }

    #[test]
    fn zero_weights_make_the_unit_the_exact_identity() {
        let (msau, mut store) = build(8, 2);
        store.zero_all_params();
        let sess = Session::new(&store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..8 * 6 * 6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let xt = Tensor::new(&[1, 8, 6, 6], data);
        let x = sess.input(xt.clone());
        let y = msau.forward(&sess, x).unwrap();
        assert_eq!(sess.value(y).max_abs_diff(&xt).unwrap(), 0.0);
    }

    #[test]
    fn spatial_gate_shape_range_and_zero_weight_value() {
        let (msau, store) = build(4, 4);
        let sess = Session::new(&store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..4 * 3 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = sess.input(Tensor::new(&[1, 4, 3, 5], data));
        let g = msau.spatial_gate(&sess, x);
        assert_eq!(sess.tape.shape(g), vec![1, 2, 1, 5]);
        assert!(sess.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));

        // constant input -> spatially constant gate
        let sess = Session::new(&store, false);
        let x = sess.input(Tensor::full(&[1, 4, 3, 5], 0.77));
        let g = sess.value(msau.spatial_gate(&sess, x));
        for ch in 0..2 {
            let row = &g.data()[ch * 5..(ch + 1) * 5];
            for &v in row {
                assert!((v - row[0]).abs() < 1e-12);
            }
        }

        // zero weights -> sigmoid(0) = 0.5 everywhere
        let (msau, mut store) = build(4, 6);
        store.zero_all_params();
        let sess = Session::new(&store, false);
        let x = sess.input(Tensor::full(&[1, 4, 3, 5], 1.0));
        let g = sess.value(msau.spatial_gate(&sess, x));
        assert!(g.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn channel_aggregation_equal_paths_on_constant_input() {
        // avg and max of a constant agree (up to the ulp the mean reduction
        // rounds by), and the MLP is shared, so X3 = X4
        let (msau, store) = build(8, 7);
        let sess = Session::new(&store, false);
        let x = sess.input(Tensor::full(&[1, 8, 4, 4], -0.4));
        let (x3, x4) = msau.channel_aggregation(&sess, x);
        assert!(sess.value(x3).max_abs_diff(&sess.value(x4)).unwrap() < 1e-12);
        assert_eq!(sess.tape.shape(x3), vec![1, 8, 1, 1]);
    }

    #[test]
    fn channel_aggregation_zero_weights_is_bias_only() {
        let (msau, mut store) = build(8, 8);
        store.zero_all_params();
        store.set_param("m.agg_fc2.bias", Tensor::full(&[8], 1.5));
        let sess = Session::new(&store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..8 * 4 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = sess.input(Tensor::new(&[1, 8, 4, 4], data));
        let (x3, x4) = msau.channel_aggregation(&sess, x);
        assert!(sess.value(x3).data().iter().all(|&v| v == 1.5));
        assert!(sess.value(x4).data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn param_count_closed_form_c32() {
        // hand count for C = 32, m = 16, kernels {3,5,7}, reduction 4:
        //   reduce 32*16 = 512, bn 32
        //   branches: dw k^2*16 + pw 256 + bn 32 for k in {3,5,7}
        //     = (9+25+49)*16 + 3*256 + 3*32
        //   gate: dw7x7 49*32 + 32, pw 32*16 + 16
        //   expand 16*32 = 512, bn 64
        //   agg: dw3x3 9*32, fc1 32*8 + 8, fc2 8*32 + 32
        let want = 512
            + 32
            + (9 + 25 + 49) * 16
            + 3 * 256
            + 3 * 32
            + (49 * 32 + 32)
            + (32 * 16 + 16)
            + 512
            + 64
            + 9 * 32
            + (32 * 8 + 8)
            + (8 * 32 + 32);
        let (msau, store) = build(32, 10);
        assert_eq!(msau.param_count(), want as u64);
        assert_eq!(store.num_scalars(), want as u64);
    }

    #[test]
    fn odd_channels_rejected() {
        assert!(matches!(
            Msau::new("m", MsauConfig::new(9)),
            Err(BlockError::OddChannels(9))
        ));
    }
}
