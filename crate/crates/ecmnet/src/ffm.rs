//! Feature fusion: concatenated encoder and skip streams pass through a
//! four-direction selective-scan block and a feed-forward layer, then rejoin
//! the encoder trunk as a residual.
//!
//! The scan block projects the fused map, runs a depthwise 3x3 conv and SiLU,
//! flattens the grid along four directions, applies an input-dependent
//! state-space recurrence per direction with its own (delta, B, C) projections
//! and state matrix, merges by inverse-permute-and-sum, layer-normalizes,
//! gates with the projection's second branch, and projects out.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::Var;
use crate::blocks::{Norm, NormKind};
use crate::elem::Scalar;
use crate::nn::{Conv2d, LayerNormC, ParamStore, RawParam, Session};
use crate::ops::{self, ConvSpec, NUM_DIRECTIONS};
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum FfmError {
    #[error("streams must share spatial size: expected {expected:?}, got {got:?}")]
    SpatialMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("concatenated channels {got} do not match configured fused_channels {expected}")]
    ChannelSum { expected: usize, got: usize },
    #[error("non-finite values detected in {0}")]
    NonFinite(&'static str),
}

/// Geometry of the selective-scan block.
#[derive(Clone, Copy, Debug)]
pub struct Ss2dConfig {
    /// Embedding width the block operates at.
    pub dim: usize,
    /// SSM state size N per channel.
    pub state_dim: usize,
    /// Rank of the step-size projection.
    pub dt_rank: usize,
}

impl Ss2dConfig {
    pub fn new(dim: usize, state_dim: usize) -> Self {
        Self {
            dim,
            state_dim,
            dt_rank: dim.div_ceil(16).max(1),
        }
    }
}

/// Per-direction selective-scan parameters.
#[derive(Clone, Debug)]
struct ScanDirection {
    x_proj: Conv2d,
    dt_proj: Conv2d,
    a_log: RawParam,
    d_skip: RawParam,
}

/// The 2D selective-scan block.
#[derive(Clone, Debug)]
pub struct Ss2d {
    pub cfg: Ss2dConfig,
    in_proj_x: Conv2d,
    in_proj_z: Conv2d,
    dwconv: Conv2d,
    dirs: Vec<ScanDirection>,
    out_norm: LayerNormC,
    out_proj: Conv2d,
}

impl Ss2d {
    pub fn new(prefix: &str, cfg: Ss2dConfig) -> Self {
        let d = cfg.dim;
        let (n, r) = (cfg.state_dim, cfg.dt_rank);
        let dirs = (0..NUM_DIRECTIONS)
            .map(|k| ScanDirection {
                x_proj: Conv2d::new(
                    format!("{prefix}.dir{k}.x_proj"),
                    d,
                    r + 2 * n,
                    1,
                    1,
                    ConvSpec::default(),
                    false,
                ),
                dt_proj: Conv2d::new(
                    format!("{prefix}.dir{k}.dt_proj"),
                    r,
                    d,
                    1,
                    1,
                    ConvSpec::default(),
                    true,
                ),
                a_log: RawParam::new(format!("{prefix}.dir{k}.a_log"), &[d, n]),
                d_skip: RawParam::new(format!("{prefix}.dir{k}.d_skip"), &[d]),
            })
            .collect();
        Self {
            cfg,
            in_proj_x: Conv2d::new(format!("{prefix}.in_proj_x"), d, d, 1, 1, ConvSpec::default(), true),
            in_proj_z: Conv2d::new(format!("{prefix}.in_proj_z"), d, d, 1, 1, ConvSpec::default(), true),
            dwconv: Conv2d::new(
                format!("{prefix}.dwconv"),
                d,
                d,
                3,
                3,
                ConvSpec {
                    pad: (1, 1),
                    groups: d,
                    ..ConvSpec::default()
                },
                true,
            ),
            dirs,
            out_norm: LayerNormC::new(format!("{prefix}.out_norm"), d),
            out_proj: Conv2d::new(format!("{prefix}.out_proj"), d, d, 1, 1, ConvSpec::default(), true),
        }
    }

    pub fn register<E: Scalar>(&self, store: &mut ParamStore<E>, rng: &mut ChaCha8Rng) {
        use rand::Rng;
        let (d, n) = (self.cfg.dim, self.cfg.state_dim);
        self.in_proj_x.register(store, rng);
        self.in_proj_z.register(store, rng);
        self.dwconv.register(store, rng);
        for dir in &self.dirs {
            dir.x_proj.register(store, rng);
            dir.dt_proj.register(store, rng);
            // step sizes initialized log-uniform in [1e-3, 1e-1] through the
            // softplus: bias = ln(exp(dt) - 1)
            let dt_bias: Vec<E> = (0..d)
                .map(|_| {
                    let dt = (rng.gen_range((1e-3f64).ln()..(1e-1f64).ln())).exp();
                    E::from_f64((dt.exp() - 1.0).ln())
                })
                .collect();
            store.set_param(&dir.dt_proj.bias_name(), Tensor::new(&[d], dt_bias));
            // state matrix rows -1..-N, stored as logs
            let a_log: Vec<E> = (0..d * n)
                .map(|i| E::from_f64(((i % n + 1) as f64).ln()))
                .collect();
            dir.a_log.register_with(store, Tensor::new(&[d, n], a_log));
            dir.d_skip.register_with(store, Tensor::full(&[d], E::ONE));
        }
        self.out_norm.register(store);
        self.out_proj.register(store, rng);
    }

    pub fn forward<E: Scalar>(&self, sess: &Session<E>, x: Var) -> Result<Var, FfmError> {
        if !sess.value(x).all_finite() {
            return Err(FfmError::NonFinite("scan block input"));
        }
        let tp = &sess.tape;
        let shape = sess.tape.shape(x);
        let (b, _, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let l = h * w;
        let (n, r) = (self.cfg.state_dim, self.cfg.dt_rank);

        let z = self.in_proj_z.forward(sess, x);
        let xp = self.in_proj_x.forward(sess, x);
        let xp = ops::silu(tp, self.dwconv.forward(sess, xp));
        let scans = ops::cross_scan(tp, xp);

        let mut outs = Vec::with_capacity(NUM_DIRECTIONS);
        for (k, dir) in self.dirs.iter().enumerate() {
            let u = ops::direction_slice(tp, scans, k);
            let u4 = ops::reshape(tp, u, &[b, self.cfg.dim, l, 1]);
            let x_dbl = dir.x_proj.forward(sess, u4);
            let parts = ops::split_channels(tp, x_dbl, &[r, n, n]);
            let delta = ops::softplus_op(tp, dir.dt_proj.forward(sess, parts[0]));
            let delta = ops::reshape(tp, delta, &[b, self.cfg.dim, l]);
            let bmat = ops::reshape(tp, parts[1], &[b, n, l]);
            let cmat = ops::reshape(tp, parts[2], &[b, n, l]);
            let a = ops::neg(tp, ops::exp_op(tp, dir.a_log.get(sess)));
            let y = ops::selective_scan(tp, u, delta, bmat, cmat, a, dir.d_skip.get(sess));
            outs.push(y);
        }
        let stacked = ops::stack_directions(tp, &[outs[0], outs[1], outs[2], outs[3]]);
        let merged = ops::cross_merge(tp, stacked, h, w);
        let y = self.out_norm.forward(sess, merged);
        let y = ops::mul(tp, y, ops::silu(tp, z));
        let out = self.out_proj.forward(sess, y);
        if !sess.value(out).all_finite() {
            return Err(FfmError::NonFinite("scan block output"));
        }
        Ok(out)
    }

    pub fn param_count(&self) -> u64 {
        let mut p = self.in_proj_x.param_count()
            + self.in_proj_z.param_count()
            + self.dwconv.param_count()
            + self.out_norm.param_count()
            + self.out_proj.param_count();
        for dir in &self.dirs {
            p += dir.x_proj.param_count()
                + dir.dt_proj.param_count()
                + dir.a_log.param_count()
                + dir.d_skip.param_count();
        }
        p
    }

    pub fn conv_macs(&self, h: usize, w: usize) -> u64 {
        let l = h * w;
        let mut m = self.in_proj_x.macs(h, w)
            + self.in_proj_z.macs(h, w)
            + self.dwconv.macs(h, w)
            + self.out_proj.macs(h, w);
        for dir in &self.dirs {
            m += dir.x_proj.macs(l, 1) + dir.dt_proj.macs(l, 1);
        }
        m
    }

    /// Fused multiply-add count of the recurrence: per direction, position and
    /// channel roughly 3 MACs plus one exp per state dimension.
    pub fn scan_macs(&self, h: usize, w: usize) -> u64 {
        let l = (h * w) as u64;
        let d = self.cfg.dim as u64;
        let n = self.cfg.state_dim as u64;
        NUM_DIRECTIONS as u64 * l * d * (4 * n + 1)
    }
}

/// Configuration of the fusion module.
#[derive(Clone, Debug)]
pub struct FfmConfig {
    /// Channel count after concatenating the encoder and skip streams.
    pub fused_channels: usize,
    /// Scan embedding width.
    pub model_dim: usize,
    /// SSM state size.
    pub state_dim: usize,
    /// Hidden multiplier of the feed-forward layer.
    pub expansion: usize,
    /// Width of the encoder stream (the module's output width).
    pub out_channels: usize,
    /// Number of stacked scan + feed-forward layers.
    pub depth: usize,
    pub norm_kind: NormKind,
}

impl FfmConfig {
    pub fn new(fused_channels: usize, model_dim: usize, out_channels: usize) -> Self {
        Self {
            fused_channels,
            model_dim,
            state_dim: 8,
            expansion: 2,
            out_channels,
            depth: 1,
            norm_kind: NormKind::Batch,
        }
    }
}

#[derive(Clone, Debug)]
struct FfmLayer {
    ss2d: Ss2d,
    ln_ffn: LayerNormC,
    expand: Conv2d,
    contract: Conv2d,
}

/// The fusion module.
#[derive(Clone, Debug)]
pub struct Ffm {
    pub cfg: FfmConfig,
    fuse: Conv2d,
    bn_fuse: Norm,
    layers: Vec<FfmLayer>,
    project: Conv2d,
}

impl Ffm {
    pub fn new(prefix: &str, cfg: FfmConfig) -> Self {
        let d = cfg.model_dim;
        let hidden = d * cfg.expansion;
        let layers = (0..cfg.depth)
            .map(|i| FfmLayer {
                ss2d: Ss2d::new(
                    &format!("{prefix}.layer{i}.ss2d"),
                    Ss2dConfig::new(d, cfg.state_dim),
                ),
                ln_ffn: LayerNormC::new(format!("{prefix}.layer{i}.ln_ffn"), d),
                expand: Conv2d::new(
                    format!("{prefix}.layer{i}.ffn_expand"),
                    d,
                    hidden,
                    1,
                    1,
                    ConvSpec::default(),
                    true,
                ),
                contract: Conv2d::new(
                    format!("{prefix}.layer{i}.ffn_contract"),
                    hidden,
                    d,
                    1,
                    1,
                    ConvSpec::default(),
                    true,
                ),
            })
            .collect();
        Self {
            fuse: Conv2d::new(
                format!("{prefix}.fuse"),
                cfg.fused_channels,
                d,
                1,
                1,
                ConvSpec::default(),
                false,
            ),
            bn_fuse: Norm::new(format!("{prefix}.bn_fuse"), d, cfg.norm_kind),
            layers,
            project: Conv2d::new(
                format!("{prefix}.project"),
                d,
                cfg.out_channels,
                1,
                1,
                ConvSpec::default(),
                false,
            ),
            cfg,
        }
    }

    pub fn register<E: Scalar>(&self, store: &mut ParamStore<E>, rng: &mut ChaCha8Rng) {
        self.fuse.register(store, rng);
        self.bn_fuse.register(store);
        for l in &self.layers {
            l.ss2d.register(store, rng);
            l.ln_ffn.register(store);
            l.expand.register(store, rng);
            l.contract.register(store, rng);
        }
        self.project.register(store, rng);
    }

    /// Fuse the encoder stream with any number of same-resolution skip
    /// streams. The concatenated width must equal `fused_channels`; the
    /// output is the feed-forward result projected to the encoder width plus
    /// the encoder stream itself.
    pub fn forward_streams<E: Scalar>(
        &self,
        sess: &Session<E>,
        x_encoder: Var,
        streams: &[Var],
    ) -> Result<Var, FfmError> {
        let tp = &sess.tape;
        let enc_shape = sess.tape.shape(x_encoder);
        let (eh, ew) = (enc_shape[2], enc_shape[3]);
        let mut channels = enc_shape[1];
        for &s in streams {
            let sh = sess.tape.shape(s);
            if (sh[2], sh[3]) != (eh, ew) {
                return Err(FfmError::SpatialMismatch {
                    expected: (eh, ew),
                    got: (sh[2], sh[3]),
                });
            }
            channels += sh[1];
        }
        if channels != self.cfg.fused_channels {
            return Err(FfmError::ChannelSum {
                expected: self.cfg.fused_channels,
                got: channels,
            });
        }
        let mut all = vec![x_encoder];
        all.extend_from_slice(streams);
        let fused = ops::concat_channels(tp, &all);
        let mut z = self.bn_fuse.forward(sess, self.fuse.forward(sess, fused));
        for l in &self.layers {
            z = l.ss2d.forward(sess, z)?;
            let zn = l.ln_ffn.forward(sess, z);
            let hidden = ops::silu(tp, l.expand.forward(sess, zn));
            z = l.contract.forward(sess, hidden);
        }
        let projected = self.project.forward(sess, z);
        Ok(ops::add(tp, projected, x_encoder))
    }

    /// The three-stream form: encoder plus the two skip streams named by the
    /// fusion equation.
    pub fn forward<E: Scalar>(
        &self,
        sess: &Session<E>,
        x_encoder: Var,
        x_msau1: Var,
        x_msau2: Var,
    ) -> Result<Var, FfmError> {
        self.forward_streams(sess, x_encoder, &[x_msau1, x_msau2])
    }

    pub fn param_count(&self) -> u64 {
        let mut p = self.fuse.param_count() + self.bn_fuse.param_count() + self.project.param_count();
        for l in &self.layers {
            p += l.ss2d.param_count()
                + l.ln_ffn.param_count()
                + l.expand.param_count()
                + l.contract.param_count();
        }
        p
    }

    pub fn conv_macs(&self, h: usize, w: usize) -> u64 {
        let mut m = self.fuse.macs(h, w) + self.project.macs(h, w);
        for l in &self.layers {
            m += l.ss2d.conv_macs(h, w) + l.expand.macs(h, w) + l.contract.macs(h, w);
        }
        m
    }

    pub fn scan_macs(&self, h: usize, w: usize) -> u64 {
        self.layers.iter().map(|l| l.ss2d.scan_macs(h, w)).sum()
    }
}
