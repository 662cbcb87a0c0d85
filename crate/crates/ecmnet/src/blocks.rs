//! The bottleneck building block of the encoder/decoder and its two
//! attention gates.
//!
//! The block halves the channel width through a 1x1 reduction, runs a
//! factorized 3x1/1x3 trunk, then two parallel depthwise factorized branches
//! (one dilated), each closed by an attention gate: a squeeze-excite channel
//! gate on the local branch and a two-axis directional gate on the dilated
//! branch. Trunk and branch outputs are summed, restored to the full width by
//! a 1x1 convolution, added to the input, and channel-shuffled.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::Var;
use crate::elem::Scalar;
use crate::nn::{BatchNorm2d, Conv2d, ParamStore, Session};
use crate::ops::{self, ConvSpec};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BlockError {
    #[error("channel count {0} must be even (the bottleneck halves it)")]
    OddChannels(usize),
    #[error("shuffle groups {groups} must divide channels {channels}")]
    GroupsDontDivide { channels: usize, groups: usize },
    #[error("dilation rate must be >= 1")]
    ZeroDilation,
    #[error("input has {got} channels, block is configured for {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("kernel size {0} must be odd")]
    EvenKernel(usize),
}

/// Normalization selector for the conv blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NormKind {
    #[default]
    Batch,
    Identity,
}

/// Configuration of one bottleneck block.
#[derive(Clone, Debug)]
pub struct EdabConfig {
    /// Input and output width C; the internal width is C/2.
    pub channels: usize,
    /// Dilation rate of the atrous branch.
    pub dilation_rate: usize,
    pub norm_kind: NormKind,
    /// Groups of the closing channel shuffle; must divide `channels`.
    pub shuffle_groups: usize,
}

impl EdabConfig {
    pub fn new(channels: usize, dilation_rate: usize) -> Self {
        Self {
            channels,
            dilation_rate,
            norm_kind: NormKind::Batch,
            shuffle_groups: 2,
        }
    }

    pub fn validate(&self) -> Result<(), BlockError> {
        if self.channels % 2 != 0 || self.channels == 0 {
            return Err(BlockError::OddChannels(self.channels));
        }
        if self.dilation_rate == 0 {
            return Err(BlockError::ZeroDilation);
        }
        if self.shuffle_groups == 0 || self.channels % self.shuffle_groups != 0 {
            return Err(BlockError::GroupsDontDivide {
                channels: self.channels,
                groups: self.shuffle_groups,
            });
        }
        Ok(())
    }
}

/// Optional batch norm, honoring the `NormKind` selector.
#[derive(Clone, Debug)]
pub struct Norm {
    bn: Option<BatchNorm2d>,
}

impl Norm {
    pub fn new(name: String, channels: usize, kind: NormKind) -> Self {
        Self {
            bn: match kind {
                NormKind::Batch => Some(BatchNorm2d::new(name, channels)),
                NormKind::Identity => None,
            },
        }
    }

    pub fn register<E: Scalar>(&self, store: &mut ParamStore<E>) {
        if let Some(bn) = &self.bn {
            bn.register(store);
        }
    }

    pub fn forward<E: Scalar>(&self, sess: &Session<E>, x: Var) -> Var {
        match &self.bn {
            Some(bn) => bn.forward(sess, x),
            None => x,
        }
    }

    pub fn param_count(&self) -> u64 {
        self.bn.as_ref().map(|b| b.param_count()).unwrap_or(0)
    }
}

/// Squeeze-excite channel gate: global average pool, 1x1 reduce (ratio 4),
/// ReLU, 1x1 expand, sigmoid, channelwise scale.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub(crate) fc1: Conv2d,
    pub(crate) fc2: Conv2d,
}

impl ChannelAttention {
    pub const REDUCTION: usize = 4;

    pub fn new(prefix: &str, channels: usize) -> Self {
        let hidden = (channels / Self::REDUCTION).max(1);
        Self {
            fc1: Conv2d::new(
                format!("{prefix}.fc1"),
                channels,
                hidden,
                1,
                1,
                ConvSpec::default(),
                true,
            ),
            fc2: Conv2d::new(
                format!("{prefix}.fc2"),
                hidden,
                channels,
                1,
                1,
                ConvSpec::default(),
                true,
            ),
        }
    }

    pub fn register<E: Scalar>(&self, store: &mut ParamStore<E>, rng: &mut ChaCha8Rng) {
        self.fc1.register(store, rng);
        self.fc2.register(store, rng);
    }

    /// The (B,C,1,1) gate alone, for range checks.
    pub fn gate<E: Scalar>(&self, sess: &Session<E>, x: Var) -> Var {
        let pooled = ops::global_avg_pool(&sess.tape, x);
        let h = ops::relu(&sess.tape, self.fc1.forward(sess, pooled));
        ops::sigmoid_op(&sess.tape, self.fc2.forward(sess, h))
    }

    pub fn forward<E: Scalar>(&self, sess: &Session<E>, x: Var) -> Var {
        let gate = self.gate(sess, x);
        ops::mul(&sess.tape, x, gate)
    }

    pub fn param_count(&self) -> u64 {
        self.fc1.param_count() + self.fc2.param_count()
    }
}

/// Two directional gates: a (B,C,H,1) gate from width pooling and a
/// (B,C,1,W) gate from height pooling, each a depthwise 3-tap conv plus
/// sigmoid, multiplied onto the input.
#[derive(Clone, Debug)]
pub struct DualDirectionAttention {
    pub(crate) conv_h: Conv2d,
    pub(crate) conv_w: Conv2d,
}

impl DualDirectionAttention {
    pub fn new(prefix: &str, channels: usize) -> Self {
        let spec_h = ConvSpec {
            stride: (1, 1),
            pad: (1, 0),
            dilation: (1, 1),
            groups: channels,
        };
        let spec_w = ConvSpec {
            stride: (1, 1),
            pad: (0, 1),
            dilation: (1, 1),
            groups: channels,
        };
        Self {
            conv_h: Conv2d::new(format!("{prefix}.conv_h"), channels, channels, 3, 1, spec_h, true),
            conv_w: Conv2d::new(format!("{prefix}.conv_w"), channels, channels, 1, 3, spec_w, true),
        }
    }

    pub fn register<E: Scalar>(&self, store: &mut ParamStore<E>, rng: &mut ChaCha8Rng) {
        self.conv_h.register(store, rng);
        self.conv_w.register(store, rng);
    }

    pub fn gates<E: Scalar>(&self, sess: &Session<E>, x: Var) -> (Var, Var) {
        let strip_h = ops::pool_width_to_1(&sess.tape, x); // (B,C,H,1)
        let gate_h = ops::sigmoid_op(&sess.tape, self.conv_h.forward(sess, strip_h));
        let strip_w = ops::pool_height_to_1(&sess.tape, x); // (B,C,1,W)
        let gate_w = ops::sigmoid_op(&sess.tape, self.conv_w.forward(sess, strip_w));
        (gate_h, gate_w)
    }

    pub fn forward<E: Scalar>(&self, sess: &Session<E>, x: Var) -> Var {
        let (gate_h, gate_w) = self.gates(sess, x);
        let gated = ops::mul(&sess.tape, x, gate_h);
        ops::mul(&sess.tape, gated, gate_w)
    }

    pub fn param_count(&self) -> u64 {
        self.conv_h.param_count() + self.conv_w.param_count()
    }
}

/// The bottleneck block.
#[derive(Clone, Debug)]
pub struct Edab {
    pub cfg: EdabConfig,
    reduce: Conv2d,
    bn_reduce: Norm,
    conv31: Conv2d,
    bn31: Norm,
    conv13: Conv2d,
    bn13: Norm,
    b1_dw31: Conv2d,
    b1_bn_a: Norm,
    b1_dw13: Conv2d,
    b1_bn_b: Norm,
    ca: ChannelAttention,
    b2_dw31: Conv2d,
    b2_bn_a: Norm,
    b2_dw13: Conv2d,
    b2_bn_b: Norm,
    dda: DualDirectionAttention,
    restore: Conv2d,
    bn_restore: Norm,
}

impl Edab {
    pub fn new(prefix: &str, cfg: EdabConfig) -> Result<Self, BlockError> {
        cfg.validate()?;
        let c = cfg.channels;
        let m = c / 2;
        let r = cfg.dilation_rate;
        let nk = cfg.norm_kind;
        let dw = |groups: usize| ConvSpec {
            stride: (1, 1),
            pad: (0, 0),
            dilation: (1, 1),
            groups,
        };
        Ok(Self {
            reduce: Conv2d::new(format!("{prefix}.reduce"), c, m, 1, 1, ConvSpec::default(), false),
            bn_reduce: Norm::new(format!("{prefix}.bn_reduce"), m, nk),
            conv31: Conv2d::new(
                format!("{prefix}.conv31"),
                m,
                m,
                3,
                1,
                ConvSpec {
                    pad: (1, 0),
                    ..ConvSpec::default()
                },
                false,
            ),
            bn31: Norm::new(format!("{prefix}.bn31"), m, nk),
            conv13: Conv2d::new(
                format!("{prefix}.conv13"),
                m,
                m,
                1,
                3,
                ConvSpec {
                    pad: (0, 1),
                    ..ConvSpec::default()
                },
                false,
            ),
            bn13: Norm::new(format!("{prefix}.bn13"), m, nk),
            b1_dw31: Conv2d::new(
                format!("{prefix}.b1_dw31"),
                m,
                m,
                3,
                1,
                ConvSpec {
                    pad: (1, 0),
                    ..dw(m)
                },
                false,
            ),
            b1_bn_a: Norm::new(format!("{prefix}.b1_bn_a"), m, nk),
            b1_dw13: Conv2d::new(
                format!("{prefix}.b1_dw13"),
                m,
                m,
                1,
                3,
                ConvSpec {
                    pad: (0, 1),
                    ..dw(m)
                },
                false,
            ),
            b1_bn_b: Norm::new(format!("{prefix}.b1_bn_b"), m, nk),
            ca: ChannelAttention::new(&format!("{prefix}.ca"), m),
            b2_dw31: Conv2d::new(
                format!("{prefix}.b2_dw31"),
                m,
                m,
                3,
                1,
                ConvSpec {
                    pad: (r, 0),
                    dilation: (r, 1),
                    ..dw(m)
                },
                false,
            ),
            b2_bn_a: Norm::new(format!("{prefix}.b2_bn_a"), m, nk),
            b2_dw13: Conv2d::new(
                format!("{prefix}.b2_dw13"),
                m,
                m,
                1,
                3,
                ConvSpec {
                    pad: (0, r),
                    dilation: (1, r),
                    ..dw(m)
                },
                false,
            ),
            b2_bn_b: Norm::new(format!("{prefix}.b2_bn_b"), m, nk),
            dda: DualDirectionAttention::new(&format!("{prefix}.dda"), m),
            restore: Conv2d::new(format!("{prefix}.restore"), m, c, 1, 1, ConvSpec::default(), false),
            bn_restore: Norm::new(format!("{prefix}.bn_restore"), c, nk),
            cfg,
        })
    }

    pub fn register<E: Scalar>(&self, store: &mut ParamStore<E>, rng: &mut ChaCha8Rng) {
        self.reduce.register(store, rng);
        self.bn_reduce.register(store);
        self.conv31.register(store, rng);
        self.bn31.register(store);
        self.conv13.register(store, rng);
        self.bn13.register(store);
        self.b1_dw31.register(store, rng);
        self.b1_bn_a.register(store);
        self.b1_dw13.register(store, rng);
        self.b1_bn_b.register(store);
        self.ca.register(store, rng);
        self.b2_dw31.register(store, rng);
        self.b2_bn_a.register(store);
        self.b2_dw13.register(store, rng);
        self.b2_bn_b.register(store);
        self.dda.register(store, rng);
        self.restore.register(store, rng);
        self.bn_restore.register(store);
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
        // trunk: 1x1 reduce, 3x1, 1x3
        let t = ops::relu(tp, self.bn_reduce.forward(sess, self.reduce.forward(sess, x)));
        let t = ops::relu(tp, self.bn31.forward(sess, self.conv31.forward(sess, t)));
        let f_up = ops::relu(tp, self.bn13.forward(sess, self.conv13.forward(sess, t)));
        // local branch: depthwise factorized pair, then the channel gate
        let b1 = ops::relu(tp, self.b1_bn_a.forward(sess, self.b1_dw31.forward(sess, f_up)));
        let b1 = self.b1_bn_b.forward(sess, self.b1_dw13.forward(sess, b1));
        let b1 = self.ca.forward(sess, b1);
        // dilated branch: depthwise factorized pair, then the directional gate
        let b2 = ops::relu(tp, self.b2_bn_a.forward(sess, self.b2_dw31.forward(sess, f_up)));
        let b2 = self.b2_bn_b.forward(sess, self.b2_dw13.forward(sess, b2));
        let b2 = self.dda.forward(sess, b2);
        // three-way sum, restore, residual, shuffle
        let summed = ops::add(tp, ops::add(tp, f_up, b1), b2);
        let restored = self.bn_restore.forward(sess, self.restore.forward(sess, summed));
        let residual = ops::add(tp, restored, x);
        Ok(ops::channel_shuffle_op(tp, residual, self.cfg.shuffle_groups))
    }

    pub fn param_count(&self) -> u64 {
        self.reduce.param_count()
            + self.bn_reduce.param_count()
            + self.conv31.param_count()
            + self.bn31.param_count()
            + self.conv13.param_count()
            + self.bn13.param_count()
            + self.b1_dw31.param_count()
            + self.b1_bn_a.param_count()
            + self.b1_dw13.param_count()
            + self.b1_bn_b.param_count()
            + self.ca.param_count()
            + self.b2_dw31.param_count()
            + self.b2_bn_a.param_count()
            + self.b2_dw13.param_count()
            + self.b2_bn_b.param_count()
            + self.dda.param_count()
            + self.restore.param_count()
            + self.bn_restore.param_count()
    }

    /// Multiply-accumulates of the convolutions at spatial size (h,w); the
    /// pooled gate convolutions operate on strips and per-channel vectors.
    pub fn conv_macs(&self, h: usize, w: usize) -> u64 {
        self.reduce.macs(h, w)
            + self.conv31.macs(h, w)
            + self.conv13.macs(h, w)
            + self.b1_dw31.macs(h, w)
            + self.b1_dw13.macs(h, w)
            + self.ca.fc1.macs(1, 1)
            + self.ca.fc2.macs(1, 1)
            + self.b2_dw31.macs(h, w)
            + self.b2_dw13.macs(h, w)
            + self.dda.conv_h.macs(h, 1)
            + self.dda.conv_w.macs(1, w)
            + self.restore.macs(h, w)
    }

    /// Elementwise work (activations, gates, sums, pools) at 1-2 ops/element.
    pub fn pointwise_ops(&self, h: usize, w: usize) -> u64 {
        let c = self.cfg.channels as u64;
        let m = c / 2;
        let hw = (h * w) as u64;
        let relus = 5 * m * hw;
        let gate_mul = 3 * 2 * m * hw; // channel gate scale + two directional gates
        let sums = 2 * m * hw + c * hw; // branch sums + residual
        let pools = 3 * m * hw; // one global + two strip pools
        relus + gate_mul + sums + pools
    }
}

/// Standalone channel shuffle with group validation (the block applies the
/// same permutation internally).
pub fn channel_shuffle<E: Scalar>(
    sess: &Session<E>,
    x: Var,
    groups: usize,
) -> Result<Var, BlockError> {
    let shape = sess.tape.shape(x);
    let c = shape[1];
    if groups == 0 || c % groups != 0 {
        return Err(BlockError::GroupsDontDivide { channels: c, groups });
    }
    Ok(ops::channel_shuffle_op(&sess.tape, x, groups))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn store_with<E: Scalar>(edab: &Edab, seed: u64) -> ParamStore<E> {
        let mut store = ParamStore::new();
        edab.register(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        store
    }

    #[test]
    fn shape_preserved_and_trunk_width_halved() {
        let edab = Edab::new("e", EdabConfig::new(64, 2)).unwrap();
        assert_eq!(edab.reduce.out_c, 32);
        let store: ParamStore<f32> = store_with(&edab, 1);
        let sess = Session::new(&store, false);
        let x = sess.input(Tensor::full(&[2, 64, 32, 32], 0.5));
        let y = edab.forward(&sess, x).unwrap();
        assert_eq!(sess.tape.shape(y), vec![2, 64, 32, 32]);
    }

    #[test]
    fn zero_weights_reduce_to_channel_shuffle() {
        let edab = Edab::new("e", EdabConfig::new(8, 2)).unwrap();
        let mut store: ParamStore<f64> = store_with(&edab, 2);
        store.zero_all_params();
        let sess = Session::new(&store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..8 * 5 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let xt = Tensor::new(&[1, 8, 5, 5], data);
        let x = sess.input(xt.clone());
        let y = edab.forward(&sess, x).unwrap();
        let sess2 = Session::new(&store, false);
        let x2 = sess2.input(xt);
        let want = channel_shuffle(&sess2, x2, 2).unwrap();
        assert_eq!(
            sess.value(y).max_abs_diff(&sess2.value(want)).unwrap(),
            0.0,
            "zero-weight block must be exactly the shuffle"
        );
    }

    #[test]
    fn saturated_channel_gate_passes_input_through() {
        // force pre-sigmoid to +20 via the fc2 bias
        let ca = ChannelAttention::new("ca", 8);
        let mut store: ParamStore<f64> = ParamStore::new();
        ca.register(&mut store, &mut ChaCha8Rng::seed_from_u64(4));
        store.zero_all_params();
        store.set_param("ca.fc2.bias", Tensor::full(&[8], 20.0));
        let sess = Session::new(&store, false);
        let xt = Tensor::full(&[1, 8, 4, 4], -1.25);
        let x = sess.input(xt.clone());
        let y = ca.forward(&sess, x);
        assert!(sess.value(y).max_abs_diff(&xt).unwrap() < 1e-6);
    }

    #[test]
    fn zero_weight_channel_gate_halves_input() {
        let ca = ChannelAttention::new("ca", 4);
        let mut store: ParamStore<f64> = ParamStore::new();
        ca.register(&mut store, &mut ChaCha8Rng::seed_from_u64(5));
        store.zero_all_params();
        let sess = Session::new(&store, false);
        let xt = Tensor::full(&[1, 4, 3, 3], 2.0);
        let x = sess.input(xt.clone());
        let y = ca.forward(&sess, x);
        assert!(sess.value(y).max_abs_diff(&xt.scale(0.5)).unwrap() < 1e-12);
    }

    #[test]
    fn dda_zero_input_stays_zero_and_gates_lie_in_open_interval() {
        let dda = DualDirectionAttention::new("dda", 4);
        let mut store: ParamStore<f64> = ParamStore::new();
        dda.register(&mut store, &mut ChaCha8Rng::seed_from_u64(6));
        let sess = Session::new(&store, false);
        let x = sess.input(Tensor::zeros(&[1, 4, 5, 7]));
        let y = dda.forward(&sess, x);
        assert!(sess.value(y).data().iter().all(|&v| v == 0.0));

        let sess = Session::new(&store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..4 * 5 * 7).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x = sess.input(Tensor::new(&[1, 4, 5, 7], data));
        let (gh, gw) = dda.gates(&sess, x);
        for g in [sess.value(gh), sess.value(gw)] {
            assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn param_count_matches_hand_closed_form() {
        // closed form, m = C/2, hidden = max(1, m/4), batch norm everywhere:
        //   reduce C*m; trunk 3x1 + 1x3: 2 * 3m^2; four depthwise pairs 4*3m;
        //   CA m*h + h + h*m + m; DDA 2*(3m + m); restore m*C;
        //   norms: 7 of width m, 1 of width C
        let hand = |c: u64| {
            let m = c / 2;
            let h = (m / 4).max(1);
            c * m
                + 6 * m * m
                + 12 * m
                + (m * h + h + h * m + m)
                + 2 * (3 * m + m)
                + m * c
                + 7 * 2 * m
                + 2 * c
        };
        for (c, r) in [(8usize, 1usize), (32, 2), (64, 16)] {
            let edab = Edab::new("e", EdabConfig::new(c, r)).unwrap();
            assert_eq!(edab.param_count(), hand(c as u64), "C={c} R={r}");
            let store: ParamStore<f64> = store_with(&edab, 8);
            assert_eq!(store.num_scalars(), edab.param_count());
        }
    }

    #[test]
    fn config_validation_errors() {
        assert_eq!(
            Edab::new("e", EdabConfig::new(7, 1)).unwrap_err(),
            BlockError::OddChannels(7)
        );
        let mut cfg = EdabConfig::new(8, 1);
        cfg.shuffle_groups = 3;
        assert!(matches!(
            Edab::new("e", cfg).unwrap_err(),
            BlockError::GroupsDontDivide { .. }
        ));
        let edab = Edab::new("e", EdabConfig::new(8, 1)).unwrap();
        let store: ParamStore<f32> = store_with(&edab, 9);
        let sess = Session::new(&store, false);
        let x = sess.input(Tensor::zeros(&[1, 6, 4, 4]));
        assert!(matches!(
            edab.forward(&sess, x).unwrap_err(),
            BlockError::ChannelMismatch { expected: 8, got: 6 }
        ));
    }

    #[test]
    fn dilation_exceeding_extent_is_not_an_error() {
        let edab = Edab::new("e", EdabConfig::new(4, 16)).unwrap();
        let store: ParamStore<f32> = store_with(&edab, 10);
        let sess = Session::new(&store, false);
        let x = sess.input(Tensor::full(&[1, 4, 5, 5], 1.0));
        let y = edab.forward(&sess, x).unwrap();
        assert_eq!(sess.tape.shape(y), vec![1, 4, 5, 5]);
    }
}
