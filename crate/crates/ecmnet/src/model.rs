//! Full network assembly: encoder, decoder, the fusion capsule between them,
//! and three skip connections, with every piece individually switchable for
//! the ablation lattice.
//!
//! Geometry: a stride-2 stem and two stride-2 transitions put the three
//! encoder stages at 1/2, 1/4 and 1/8 of the input resolution. The decoder
//! mirrors the encoder with fewer blocks, upsampling by bilinear x2 followed
//! by a 3x3 convolution. Skip connections 1 and 2 rejoin the decoder at
//! matching resolution through concat + 1x1 fuses; connection 3 carries the
//! bottleneck to the final decoder stage (upsampled, 1x1 projected, added).
//! The fusion module, when enabled, sits between encoder and decoder and
//! consumes the bottleneck plus the first two skip streams pooled to
//! bottleneck resolution.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Var;
use crate::blocks::{BlockError, Edab, EdabConfig, Norm, NormKind};
use crate::elem::Scalar;
use crate::ffm::{Ffm, FfmConfig, FfmError};
use crate::msau::{Msau, MsauConfig};
use crate::nn::{Conv2d, ParamStore, Session};
use crate::ops::{self, ConvSpec};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input spatial size {h}x{w} must be divisible by 8 (three stride-2 downsamplings)")]
    BadInputSize { h: usize, w: usize },
    #[error("input must be (B,3,H,W), got {0:?}")]
    BadInputShape(Vec<usize>),
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Block(#[from] BlockError),
    #[error(transparent)]
    Ffm(#[from] FfmError),
}

fn default_stage_channels() -> [usize; 3] {
    [32, 64, 128]
}
fn default_blocks_per_stage() -> [usize; 3] {
    [3, 3, 8]
}
fn default_decoder_blocks() -> [usize; 3] {
    [1, 1, 2]
}
fn default_dilations() -> [Vec<usize>; 3] {
    [
        vec![1, 1, 2],
        vec![1, 1, 2],
        vec![2, 2, 4, 4, 8, 8, 16, 16],
    ]
}
fn default_input_size() -> (usize, usize) {
    (512, 512)
}
fn default_ffm_dim() -> usize {
    112
}
fn default_ffm_state() -> usize {
    8
}
fn default_ffm_expansion() -> usize {
    2
}
fn default_one() -> usize {
    1
}
fn default_schema() -> u32 {
    1
}
fn default_shuffle_groups() -> usize {
    2
}
fn default_msau_kernels() -> Vec<usize> {
    vec![3, 5, 7]
}
fn default_msau_reduction() -> usize {
    4
}
fn default_true_array() -> [bool; 3] {
    [true, true, true]
}
fn default_true() -> bool {
    true
}

/// Full-network wiring. Stage widths and depths are calibration choices that
/// put the complete variant near the published parameter budget.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub num_classes: usize,
    #[serde(default = "default_input_size")]
    pub input_size: (usize, usize),
    #[serde(default = "default_stage_channels")]
    pub stage_channels: [usize; 3],
    #[serde(default = "default_blocks_per_stage")]
    pub blocks_per_stage: [usize; 3],
    #[serde(default = "default_decoder_blocks")]
    pub decoder_blocks: [usize; 3],
    #[serde(default = "default_dilations")]
    pub dilation_schedule: [Vec<usize>; 3],
    #[serde(default = "default_true_array")]
    pub connections: [bool; 3],
    #[serde(default = "default_true_array")]
    pub msau_enabled: [bool; 3],
    #[serde(default = "default_true")]
    pub ffm_enabled: bool,
    #[serde(default = "default_ffm_dim")]
    pub ffm_dim: usize,
    #[serde(default = "default_ffm_state")]
    pub ffm_state_dim: usize,
    #[serde(default = "default_ffm_expansion")]
    pub ffm_expansion: usize,
    #[serde(default = "default_one")]
    pub ffm_depth: usize,
    #[serde(default = "default_shuffle_groups")]
    pub shuffle_groups: usize,
    #[serde(default = "default_msau_kernels")]
    pub msau_kernels: Vec<usize>,
    #[serde(default = "default_msau_reduction")]
    pub msau_reduction: usize,
    #[serde(default)]
    pub norm_kind: NormKind,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// The complete network (every switch on) for `num_classes` classes.
    pub fn full(num_classes: usize) -> Self {
        Self {
            schema_version: 1,
            num_classes,
            input_size: default_input_size(),
            stage_channels: default_stage_channels(),
            blocks_per_stage: default_blocks_per_stage(),
            decoder_blocks: default_decoder_blocks(),
            dilation_schedule: default_dilations(),
            connections: [true; 3],
            msau_enabled: [true; 3],
            ffm_enabled: true,
            ffm_dim: default_ffm_dim(),
            ffm_state_dim: default_ffm_state(),
            ffm_expansion: default_ffm_expansion(),
            ffm_depth: 1,
            shuffle_groups: default_shuffle_groups(),
            msau_kernels: default_msau_kernels(),
            msau_reduction: default_msau_reduction(),
            norm_kind: NormKind::Batch,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::BadConfig(m));
        if self.num_classes < 2 {
            return err(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        let [c0, c1, c2] = self.stage_channels;
        if c0 % 2 != 0 || c1 % 2 != 0 || c2 % 2 != 0 {
            return err(format!(
                "stage channels must be even, got {:?}",
                self.stage_channels
            ));
        }
        if c1 <= c0 || c2 <= c1 {
            return err(format!(
                "stage channels must strictly widen, got {:?}",
                self.stage_channels
            ));
        }
        for (i, (&blocks, dil)) in self
            .blocks_per_stage
            .iter()
            .zip(self.dilation_schedule.iter())
            .enumerate()
        {
            if blocks == 0 {
                return err(format!("stage {i} needs at least one block"));
            }
            if dil.len() != blocks {
                return err(format!(
                    "dilation schedule for stage {i} has {} entries for {} blocks",
                    dil.len(),
                    blocks
                ));
            }
        }
        for i in 0..3 {
            if self.msau_enabled[i] && !self.connections[i] {
                return err(format!(
                    "skip refinement {} requires connection {} to be enabled",
                    i + 1,
                    i + 1
                ));
            }
        }
        if self.ffm_enabled && (self.ffm_dim == 0 || self.ffm_state_dim == 0 || self.ffm_depth == 0)
        {
            return err("fusion module dimensions must be positive".to_string());
        }
        for c in self.stage_channels {
            if c % self.shuffle_groups != 0 {
                return err(format!(
                    "shuffle groups {} must divide every stage width {:?}",
                    self.shuffle_groups, self.stage_channels
                ));
            }
        }
        Ok(())
    }

    /// Deterministic hex digest of the canonical serialized config.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Channel count entering the fusion module's 1x1 fuse.
    pub fn ffm_fused_channels(&self) -> usize {
        let mut c = self.stage_channels[2];
        if self.connections[0] {
            c += self.stage_channels[0];
        }
        if self.connections[1] {
            c += self.stage_channels[1];
        }
        c
    }
}

/// The ablation lattice rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationVariant {
    Baseline,
    A1,
    A2,
    A3,
    B1,
    B2,
    B3,
    C1,
    C2,
    C3,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 10] = [
        AblationVariant::Baseline,
        AblationVariant::A1,
        AblationVariant::A2,
        AblationVariant::A3,
        AblationVariant::B1,
        AblationVariant::B2,
        AblationVariant::B3,
        AblationVariant::C1,
        AblationVariant::C2,
        AblationVariant::C3,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::Baseline => "Baseline",
            AblationVariant::A1 => "A1",
            AblationVariant::A2 => "A2",
            AblationVariant::A3 => "A3",
            AblationVariant::B1 => "B1",
            AblationVariant::B2 => "B2",
            AblationVariant::B3 => "B3",
            AblationVariant::C1 => "C1",
            AblationVariant::C2 => "C2",
            AblationVariant::C3 => "C3",
        }
    }

    /// (connections, skip refinements, fusion module).
    pub fn switches(&self) -> ([bool; 3], [bool; 3], bool) {
        let off = [false; 3];
        let on = [true; 3];
        match self {
            AblationVariant::Baseline => (off, off, false),
            AblationVariant::A1 => ([true, false, false], off, false),
            AblationVariant::A2 => ([true, true, false], off, false),
            AblationVariant::A3 => (on, off, false),
            AblationVariant::B1 => ([true, false, false], [true, false, false], false),
            AblationVariant::B2 => ([true, true, false], [true, true, false], false),
            AblationVariant::B3 => (on, on, false),
            AblationVariant::C1 => (off, off, true),
            AblationVariant::C2 => (on, off, true),
            AblationVariant::C3 => (on, on, true),
        }
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AblationVariant::ALL
            .iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| {
                format!("unknown variant {s:?}; expected one of Baseline, A1..A3, B1..B3, C1..C3")
            })
    }
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Config of a named ablation variant with default geometry.
pub fn make_variant(variant: AblationVariant, num_classes: usize) -> ModelConfig {
    let (connections, msau_enabled, ffm_enabled) = variant.switches();
    ModelConfig {
        connections,
        msau_enabled,
        ffm_enabled,
        ..ModelConfig::full(num_classes)
    }
}

/// Stride-2 downsampling unit: a 3x3 stride-2 convolution to (out - in)
/// channels concatenated with a 2x2 average pooling of the input.
#[derive(Clone, Debug)]
struct Transition {
    conv: Conv2d,
    bn: Norm,
}

impl Transition {
    fn new(prefix: &str, in_c: usize, out_c: usize, nk: NormKind) -> Self {
        Self {
            conv: Conv2d::new(
                format!("{prefix}.conv"),
                in_c,
                out_c - in_c,
                3,
                3,
                ConvSpec {
                    stride: (2, 2),
                    pad: (1, 1),
                    ..ConvSpec::default()
                },
                false,
            ),
            bn: Norm::new(format!("{prefix}.bn"), out_c, nk),
        }
    }

    fn forward<E: Scalar>(&self, sess: &Session<E>, x: Var) -> Var {
        let tp = &sess.tape;
        let conv = self.conv.forward(sess, x);
        let pooled = ops::avg_pool2d(tp, x, 2);
        let cat = ops::concat_channels(tp, &[conv, pooled]);
        ops::relu(tp, self.bn.forward(sess, cat))
    }

    fn param_count(&self) -> u64 {
        self.conv.param_count() + self.bn.param_count()
    }
}

/// Bilinear x2 followed by a 3x3 convolution.
#[derive(Clone, Debug)]
struct UpStage {
    conv: Conv2d,
    bn: Norm,
}

impl UpStage {
    fn new(prefix: &str, in_c: usize, out_c: usize, nk: NormKind) -> Self {
        Self {
            conv: Conv2d::new(
                format!("{prefix}.conv"),
                in_c,
                out_c,
                3,
                3,
                ConvSpec {
                    pad: (1, 1),
                    ..ConvSpec::default()
                },
                false,
            ),
            bn: Norm::new(format!("{prefix}.bn"), out_c, nk),
        }
    }

    fn forward<E: Scalar>(&self, sess: &Session<E>, x: Var) -> Var {
        let tp = &sess.tape;
        let shape = tp.shape(x);
        let up = ops::bilinear_resize(tp, x, shape[2] * 2, shape[3] * 2);
        ops::relu(tp, self.bn.forward(sess, self.conv.forward(sess, up)))
    }

    fn param_count(&self) -> u64 {
        self.conv.param_count() + self.bn.param_count()
    }
}

/// Concat + 1x1 fusion of a skip stream into the decoder.
#[derive(Clone, Debug)]
struct SkipFuse {
    conv: Conv2d,
    bn: Norm,
}

impl SkipFuse {
    fn new(prefix: &str, channels: usize, nk: NormKind) -> Self {
        Self {
            conv: Conv2d::new(
                format!("{prefix}.conv"),
                channels * 2,
                channels,
                1,
                1,
                ConvSpec::default(),
                false,
            ),
            bn: Norm::new(format!("{prefix}.bn"), channels, nk),
        }
    }

    fn forward<E: Scalar>(&self, sess: &Session<E>, dec: Var, skip: Var) -> Var {
        let tp = &sess.tape;
        let cat = ops::concat_channels(tp, &[dec, skip]);
        ops::relu(tp, self.bn.forward(sess, self.conv.forward(sess, cat)))
    }

    fn param_count(&self) -> u64 {
        self.conv.param_count() + self.bn.param_count()
    }
}

/// The assembled network.
pub struct Model<E: Scalar> {
    pub cfg: ModelConfig,
    stem: Conv2d,
    stem_bn: Norm,
    stages: [Vec<Edab>; 3],
    transitions: [Transition; 2],
    msaus: [Option<Msau>; 3],
    ffm: Option<Ffm>,
    dec_stages: [Vec<Edab>; 3],
    ups: [UpStage; 2],
    fuses: [Option<SkipFuse>; 2],
    skip3_proj: Option<(Conv2d, Norm)>,
    classifier: Conv2d,
    store: ParamStore<E>,
}

/// Construct and initialize a model from its config (weights seeded from
/// `cfg.seed`).
pub fn build_model<E: Scalar>(cfg: &ModelConfig) -> Result<Model<E>, ModelError> {
    Model::build(cfg.clone())
}

impl<E: Scalar> Model<E> {
    pub fn build(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let [c0, c1, c2] = cfg.stage_channels;
        let nk = cfg.norm_kind;
        let edab_cfg = |c: usize, r: usize| EdabConfig {
            channels: c,
            dilation_rate: r,
            norm_kind: nk,
            shuffle_groups: cfg.shuffle_groups,
        };
        let mk_stage = |prefix: &str, c: usize, dil: &[usize]| -> Result<Vec<Edab>, BlockError> {
            dil.iter()
                .enumerate()
                .map(|(i, &r)| Edab::new(&format!("{prefix}.block{i}"), edab_cfg(c, r)))
                .collect()
        };

        let stages = [
            mk_stage("encoder.stage0", c0, &cfg.dilation_schedule[0])?,
            mk_stage("encoder.stage1", c1, &cfg.dilation_schedule[1])?,
            mk_stage("encoder.stage2", c2, &cfg.dilation_schedule[2])?,
        ];
        let transitions = [
            Transition::new("encoder.trans0", c0, c1, nk),
            Transition::new("encoder.trans1", c1, c2, nk),
        ];
        let msau_cfg = |c: usize| MsauConfig {
            channels: c,
            kernel_set: cfg.msau_kernels.clone(),
            channel_reduction: cfg.msau_reduction,
            norm_kind: nk,
        };
        let msaus = [
            if cfg.msau_enabled[0] {
                Some(Msau::new("msau1", msau_cfg(c0))?)
            } else {
                None
            },
            if cfg.msau_enabled[1] {
                Some(Msau::new("msau2", msau_cfg(c1))?)
            } else {
                None
            },
            if cfg.msau_enabled[2] {
                Some(Msau::new("msau3", msau_cfg(c2))?)
            } else {
                None
            },
        ];
        let ffm = if cfg.ffm_enabled {
            Some(Ffm::new(
                "ffm",
                FfmConfig {
                    fused_channels: cfg.ffm_fused_channels(),
                    model_dim: cfg.ffm_dim,
                    state_dim: cfg.ffm_state_dim,
                    expansion: cfg.ffm_expansion,
                    out_channels: c2,
                    depth: cfg.ffm_depth,
                    norm_kind: nk,
                },
            ))
        } else {
            None
        };
        let dec_dil = |n: usize| vec![1usize; n];
        let dec_stages = [
            mk_stage("decoder.stage0", c0, &dec_dil(cfg.decoder_blocks[0]))?,
            mk_stage("decoder.stage1", c1, &dec_dil(cfg.decoder_blocks[1]))?,
            mk_stage("decoder.stage2", c2, &dec_dil(cfg.decoder_blocks[2]))?,
        ];
        let ups = [
            UpStage::new("decoder.up0", c2, c1, nk),
            UpStage::new("decoder.up1", c1, c0, nk),
        ];
        let fuses = [
            if cfg.connections[1] {
                Some(SkipFuse::new("decoder.fuse2", c1, nk))
            } else {
                None
            },
            if cfg.connections[0] {
                Some(SkipFuse::new("decoder.fuse1", c0, nk))
            } else {
                None
            },
        ];
        let skip3_proj = if cfg.connections[2] {
            Some((
                Conv2d::new(
                    "decoder.skip3_proj.conv",
                    c2,
                    c0,
                    1,
                    1,
                    ConvSpec::default(),
                    false,
                ),
                Norm::new("decoder.skip3_proj.bn".to_string(), c0, nk),
            ))
        } else {
            None
        };
        let stem = Conv2d::new(
            "stem.conv",
            3,
            c0,
            3,
            3,
            ConvSpec {
                stride: (2, 2),
                pad: (1, 1),
                ..ConvSpec::default()
            },
            false,
        );
        let stem_bn = Norm::new("stem.bn".to_string(), c0, nk);
        let classifier = Conv2d::new(
            "classifier.conv",
            c0,
            cfg.num_classes,
            1,
            1,
            ConvSpec::default(),
            true,
        );

        // register everything in a fixed order
        let mut store = ParamStore::new();
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
        stem.register(&mut store, &mut rng);
        stem_bn.register(&mut store);
        for (i, stage) in stages.iter().enumerate() {
            for b in stage {
                b.register(&mut store, &mut rng);
            }
            if i < 2 {
                transitions[i].conv.register(&mut store, &mut rng);
                transitions[i].bn.register(&mut store);
            }
        }
        for m in msaus.iter().flatten() {
            m.register(&mut store, &mut rng);
        }
        if let Some(f) = &ffm {
            f.register(&mut store, &mut rng);
        }
        for stage in dec_stages.iter() {
            for b in stage {
                b.register(&mut store, &mut rng);
            }
        }
        for up in &ups {
            up.conv.register(&mut store, &mut rng);
            up.bn.register(&mut store);
        }
        for f in fuses.iter().flatten() {
            f.conv.register(&mut store, &mut rng);
            f.bn.register(&mut store);
        }
        if let Some((conv, bn)) = &skip3_proj {
            conv.register(&mut store, &mut rng);
            bn.register(&mut store);
        }
        classifier.register(&mut store, &mut rng);

        Ok(Self {
            cfg,
            stem,
            stem_bn,
            stages,
            transitions,
            msaus,
            ffm,
            dec_stages,
            ups,
            fuses,
            skip3_proj,
            classifier,
            store,
        })
    }

    pub fn store(&self) -> &ParamStore<E> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.store
    }

    pub fn param_count(&self) -> u64 {
        self.store.num_scalars()
    }

    /// Parameter count derivable from the layer descriptors alone (no store
    /// access); tested to equal [`Model::param_count`].
    pub fn descriptor_param_count(&self) -> u64 {
        let mut n = self.stem.param_count() + self.stem_bn.param_count();
        for stage in &self.stages {
            n += stage.iter().map(|b| b.param_count()).sum::<u64>();
        }
        n += self.transitions.iter().map(|t| t.param_count()).sum::<u64>();
        n += self
            .msaus
            .iter()
            .flatten()
            .map(|m| m.param_count())
            .sum::<u64>();
        if let Some(f) = &self.ffm {
            n += f.param_count();
        }
        for stage in &self.dec_stages {
            n += stage.iter().map(|b| b.param_count()).sum::<u64>();
        }
        n += self.ups.iter().map(|u| u.param_count()).sum::<u64>();
        n += self
            .fuses
            .iter()
            .flatten()
            .map(|f| f.param_count())
            .sum::<u64>();
        if let Some((conv, bn)) = &self.skip3_proj {
            n += conv.param_count() + bn.param_count();
        }
        n + self.classifier.param_count()
    }

    /// Forward pass on an existing session. Input (B,3,H,W) with H, W
    /// divisible by 8; output (B,K,H,W) logits.
    pub fn forward_on(&self, sess: &Session<E>, x: Var) -> Result<Var, ModelError> {
        let shape = sess.tape.shape(x);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(ModelError::BadInputShape(shape));
        }
        let (h, w) = (shape[2], shape[3]);
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(ModelError::BadInputSize { h, w });
        }
        let tp = &sess.tape;

        // encoder
        let mut e1 = ops::relu(tp, self.stem_bn.forward(sess, self.stem.forward(sess, x)));
        for b in &self.stages[0] {
            e1 = b.forward(sess, e1)?;
        }
        let mut e2 = self.transitions[0].forward(sess, e1);
        for b in &self.stages[1] {
            e2 = b.forward(sess, e2)?;
        }
        let mut e3 = self.transitions[1].forward(sess, e2);
        for b in &self.stages[2] {
            e3 = b.forward(sess, e3)?;
        }

        // skip streams (refined when their unit is enabled)
        let skip1 = if self.cfg.connections[0] {
            Some(match &self.msaus[0] {
                Some(m) => m.forward(sess, e1)?,
                None => e1,
            })
        } else {
            None
        };
        let skip2 = if self.cfg.connections[1] {
            Some(match &self.msaus[1] {
                Some(m) => m.forward(sess, e2)?,
                None => e2,
            })
        } else {
            None
        };
        let skip3 = if self.cfg.connections[2] {
            Some(match &self.msaus[2] {
                Some(m) => m.forward(sess, e3)?,
                None => e3,
            })
        } else {
            None
        };

        // trunk through the fusion capsule
        let trunk = match &self.ffm {
            Some(ffm) => {
                let mut streams = Vec::new();
                if let Some(s1) = skip1 {
                    streams.push(ops::avg_pool2d(tp, s1, 4));
                }
                if let Some(s2) = skip2 {
                    streams.push(ops::avg_pool2d(tp, s2, 2));
                }
                ffm.forward_streams(sess, e3, &streams)?
            }
            None => e3,
        };

        // decoder
        let mut d = trunk;
        for b in &self.dec_stages[2] {
            d = b.forward(sess, d)?;
        }
        let mut d = self.ups[0].forward(sess, d);
        if let (Some(fuse), Some(s2)) = (&self.fuses[0], skip2) {
            d = fuse.forward(sess, d, s2);
        }
        for b in &self.dec_stages[1] {
            d = b.forward(sess, d)?;
        }
        let mut d = self.ups[1].forward(sess, d);
        if let (Some(fuse), Some(s1)) = (&self.fuses[1], skip1) {
            d = fuse.forward(sess, d, s1);
        }
        if let (Some((conv, bn)), Some(s3)) = (&self.skip3_proj, skip3) {
            let up = ops::bilinear_resize(tp, s3, h / 2, w / 2);
            let proj = bn.forward(sess, conv.forward(sess, up));
            d = ops::add(tp, d, proj);
        }
        for b in &self.dec_stages[0] {
            d = b.forward(sess, d)?;
        }

        let logits_half = self.classifier.forward(sess, d);
        Ok(ops::bilinear_resize(tp, logits_half, h, w))
    }

    /// Evaluation forward: pure function of (weights, input).
    pub fn forward_eval(&self, x: &Tensor<E>) -> Result<Tensor<E>, ModelError> {
        let sess = Session::new(&self.store, false);
        let xv = sess.input(x.clone());
        let y = self.forward_on(&sess, xv)?;
        Ok(sess.value(y))
    }

    /// Analytic FLOPs itemized per submodule at input (h,w) for one sample.
    /// `mac_factor` is 2 when a multiply-accumulate counts as two ops.
    pub fn flops_items(&self, h: usize, w: usize, mac_factor: u64) -> Vec<(String, u64)> {
        let mf = mac_factor;
        let mut items = Vec::new();
        let (h2, w2) = (h / 2, w / 2);
        let (h4, w4) = (h / 4, w / 4);
        let (h8, w8) = (h / 8, w / 8);
        items.push(("stem".to_string(), mf * self.stem.macs(h, w)));
        for (si, (stage, (sh, sw))) in self
            .stages
            .iter()
            .zip([(h2, w2), (h4, w4), (h8, w8)])
            .enumerate()
        {
            for (bi, b) in stage.iter().enumerate() {
                items.push((
                    format!("encoder.stage{si}.block{bi}"),
                    mf * b.conv_macs(sh, sw) + b.pointwise_ops(sh, sw),
                ));
            }
        }
        items.push((
            "encoder.trans0".to_string(),
            mf * self.transitions[0].conv.macs(h2, w2),
        ));
        items.push((
            "encoder.trans1".to_string(),
            mf * self.transitions[1].conv.macs(h4, w4),
        ));
        let msau_sizes = [(h2, w2), (h4, w4), (h8, w8)];
        for (i, m) in self.msaus.iter().enumerate() {
            if let Some(m) = m {
                let (sh, sw) = msau_sizes[i];
                items.push((
                    format!("msau{}", i + 1),
                    mf * m.conv_macs(sh, sw) + m.pointwise_ops(sh, sw),
                ));
            }
        }
        if let Some(f) = &self.ffm {
            items.push(("ffm.convs".to_string(), mf * f.conv_macs(h8, w8)));
            items.push(("ffm.scan".to_string(), mf * f.scan_macs(h8, w8)));
        }
        for (si, (stage, (sh, sw))) in self
            .dec_stages
            .iter()
            .zip([(h2, w2), (h4, w4), (h8, w8)])
            .enumerate()
        {
            for (bi, b) in stage.iter().enumerate() {
                items.push((
                    format!("decoder.stage{si}.block{bi}"),
                    mf * b.conv_macs(sh, sw) + b.pointwise_ops(sh, sw),
                ));
            }
        }
        items.push(("decoder.up0".to_string(), mf * self.ups[0].conv.macs(h4, w4)));
        items.push(("decoder.up1".to_string(), mf * self.ups[1].conv.macs(h2, w2)));
        if let Some(f) = &self.fuses[0] {
            items.push(("decoder.fuse2".to_string(), mf * f.conv.macs(h4, w4)));
        }
        if let Some(f) = &self.fuses[1] {
            items.push(("decoder.fuse1".to_string(), mf * f.conv.macs(h2, w2)));
        }
        if let Some((conv, _)) = &self.skip3_proj {
            items.push((
                "decoder.skip3_proj".to_string(),
                mf * conv.macs(h2, w2) + 8 * (self.cfg.stage_channels[2] * h2 * w2) as u64,
            ));
        }
        items.push(("classifier".to_string(), mf * self.classifier.macs(h2, w2)));
        // final bilinear to full resolution, ~8 ops per output element
        items.push((
            "resize".to_string(),
            8 * (self.cfg.num_classes * h * w) as u64,
        ));
        items
    }

    pub fn flops_total(&self, h: usize, w: usize, mac_factor: u64) -> u64 {
        self.flops_items(h, w, mac_factor)
            .iter()
            .map(|(_, f)| f)
            .sum()
    }
}
