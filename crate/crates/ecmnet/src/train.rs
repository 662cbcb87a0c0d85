//! Loss, optimizer, schedule, the deterministic training loop, and the
//! ablation-experiment driver.
//!
//! Determinism contract: batches are derived from (seed, iteration), the
//! optimizer state serializes exactly, and all math is single-threaded, so a
//! resumed run replays the interrupted one bit for bit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Grads, Tape, Var};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::data::{
    argmax_to_labels, augment, batch_samples, load_sample, list_samples, stream_seed,
    AugmentPolicy, DataError, DatasetSpec, SegSample, SynthSpec,
};
use crate::elem::Scalar;
use crate::metrics::{ConfusionMatrix, IGNORE_INDEX};
use crate::model::{make_variant, AblationVariant, Model, ModelConfig, ModelError};
use crate::nn::Session;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at iteration {iter} (lr {lr:.3e}, grad norm {grad_norm:.3e})")]
    NonFiniteLoss { iter: usize, lr: f64, grad_norm: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("dataset has no samples")]
    EmptyDataset,
}

/// Optimization settings.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_poly_power")]
    pub poly_power: f64,
    pub max_iters: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub class_weighting: bool,
    #[serde(default = "default_ckpt_every")]
    pub checkpoint_every: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_val_size")]
    pub val_size: usize,
    /// Stop once validation mean IoU reaches this value.
    #[serde(default)]
    pub target_miou: Option<f64>,
    #[serde(default)]
    pub augment: bool,
    /// Fixed crop for file-backed datasets.
    #[serde(default)]
    pub crop: Option<(usize, usize)>,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_wd() -> f64 {
    1e-4
}
fn default_poly_power() -> f64 {
    0.9
}
fn default_batch() -> usize {
    4
}
fn default_ckpt_every() -> usize {
    0
}
fn default_eval_every() -> usize {
    100
}
fn default_val_size() -> usize {
    16
}

impl TrainConfig {
    pub fn new(max_iters: usize) -> Self {
        Self {
            lr: default_lr(),
            weight_decay: default_wd(),
            poly_power: default_poly_power(),
            max_iters,
            batch_size: default_batch(),
            seed: 0,
            class_weighting: false,
            checkpoint_every: 0,
            eval_every: default_eval_every(),
            val_size: default_val_size(),
            target_miou: None,
            augment: false,
            crop: None,
        }
    }

    /// Polynomial decay: lr0 * (1 - t/T)^power.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let t = iter.min(self.max_iters) as f64;
        let frac = 1.0 - t / self.max_iters as f64;
        self.lr * frac.max(0.0).powf(self.poly_power)
    }
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

/// Mean softmax cross-entropy over non-ignored pixels of (B,K,H,W) logits.
/// Returns the scalar loss and the number of scored pixels (0 means every
/// pixel was ignored and the loss is defined as 0).
pub fn cross_entropy_loss<E: Scalar>(
    tape: &Tape<E>,
    logits: Var,
    labels: &[u8],
    class_weights: Option<&[f64]>,
) -> (Var, usize) {
    let v = tape.value(logits);
    let (b, k, h, w) = v.dims4();
    let plane = h * w;
    assert_eq!(labels.len(), b * plane, "labels must cover every pixel");
    if let Some(cw) = class_weights {
        assert_eq!(cw.len(), k);
    }
    let weight_of = |t: usize| class_weights.map(|cw| cw[t]).unwrap_or(1.0);

    let mut total = 0.0f64;
    let mut weight_total = 0.0f64;
    let mut valid = 0usize;
    for bi in 0..b {
        for p in 0..plane {
            let t = labels[bi * plane + p];
            if t == IGNORE_INDEX {
                continue;
            }
            let t = t as usize;
            debug_assert!(t < k, "label {t} out of range");
            let mut maxv = f64::NEG_INFINITY;
            for c in 0..k {
                maxv = maxv.max(v.data()[(bi * k + c) * plane + p].to_f64());
            }
            let mut sum = 0.0f64;
            for c in 0..k {
                sum += (v.data()[(bi * k + c) * plane + p].to_f64() - maxv).exp();
            }
            let lse = maxv + sum.ln();
            let wt = weight_of(t);
            total += wt * (lse - v.data()[(bi * k + t) * plane + p].to_f64());
            weight_total += wt;
            valid += 1;
        }
    }
    let loss_val = if valid == 0 { 0.0 } else { total / weight_total };
    let labels_owned: Vec<u8> = labels.to_vec();
    let weights_owned: Option<Vec<f64>> = class_weights.map(|cw| cw.to_vec());
    let out = tape.push(
        Tensor::scalar(E::from_f64(loss_val)),
        move |g, grads: &mut Grads<E>| {
            let gscale = g.data()[0].to_f64();
            let mut dl = vec![E::ZERO; v.numel()];
            if valid > 0 {
                for bi in 0..b {
                    for p in 0..plane {
                        let t = labels_owned[bi * plane + p];
                        if t == IGNORE_INDEX {
                            continue;
                        }
                        let t = t as usize;
                        let wt = weights_owned.as_ref().map(|cw| cw[t]).unwrap_or(1.0);
                        let mut maxv = f64::NEG_INFINITY;
                        for c in 0..k {
                            maxv = maxv.max(v.data()[(bi * k + c) * plane + p].to_f64());
                        }
                        let mut sum = 0.0f64;
                        for c in 0..k {
                            sum += (v.data()[(bi * k + c) * plane + p].to_f64() - maxv).exp();
                        }
                        for c in 0..k {
                            let soft =
                                (v.data()[(bi * k + c) * plane + p].to_f64() - maxv).exp() / sum;
                            let indicator = if c == t { 1.0 } else { 0.0 };
                            dl[(bi * k + c) * plane + p] = E::from_f64(
                                gscale * wt * (soft - indicator) / weight_total,
                            );
                        }
                    }
                }
            }
            grads.add(logits, Tensor::new(v.shape(), dl));
        },
    );
    (out, valid)
}

/// Inverse-frequency class weights normalized to mean 1, from a label sample.
pub fn class_weights_from_labels(labels: &[u8], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0u64; num_classes];
    let mut total = 0u64;
    for &l in labels {
        if l != IGNORE_INDEX && (l as usize) < num_classes {
            counts[l as usize] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return vec![1.0; num_classes];
    }
    let mut weights: Vec<f64> = counts
        .iter()
        .map(|&c| {
            let freq = (c.max(1)) as f64 / total as f64;
            1.0 / freq
        })
        .collect();
    let mean = weights.iter().sum::<f64>() / num_classes as f64;
    for w in &mut weights {
        *w /= mean;
    }
    weights
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    m: BTreeMap<String, Tensor<f32>>,
    v: BTreeMap<String, Tensor<f32>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        store: &mut crate::nn::ParamStore<f32>,
        grads: &BTreeMap<String, Tensor<f32>>,
        lr: f64,
    ) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let mut param = store.param(name).clone();
            {
                let md = m.data_mut();
                let vd = v.data_mut();
                let pd = param.data_mut();
                for i in 0..grad.numel() {
                    let g = grad.data()[i] as f64;
                    let mi = self.beta1 * md[i] as f64 + (1.0 - self.beta1) * g;
                    let vi = self.beta2 * vd[i] as f64 + (1.0 - self.beta2) * g * g;
                    md[i] = mi as f32;
                    vd[i] = vi as f32;
                    let m_hat = mi / bc1;
                    let v_hat = vi / bc2;
                    let update = lr * (m_hat / (v_hat.sqrt() + self.eps))
                        + lr * self.weight_decay * pd[i] as f64;
                    pd[i] = (pd[i] as f64 - update) as f32;
                }
            }
            store.set_param(name, param);
        }
    }

    pub fn state(&self) -> (&BTreeMap<String, Tensor<f32>>, &BTreeMap<String, Tensor<f32>>) {
        (&self.m, &self.v)
    }

    pub fn restore_state(
        &mut self,
        m: BTreeMap<String, Tensor<f32>>,
        v: BTreeMap<String, Tensor<f32>>,
        step_count: u64,
    ) {
        self.m = m;
        self.v = v;
        self.step_count = step_count;
    }
}

// ---------------------------------------------------------------------------
// data sources
// ---------------------------------------------------------------------------

/// Where training batches come from.
#[derive(Clone, Debug)]
pub enum DataSource {
    Synthetic(SynthSpec),
    Files(DatasetSpec),
}

impl DataSource {
    /// Deterministic batch for one iteration: images (B,3,H,W) + flat labels.
    pub fn train_batch(
        &self,
        cfg: &TrainConfig,
        iter: usize,
    ) -> Result<(Tensor<f32>, Vec<u8>), TrainError> {
        match self {
            DataSource::Synthetic(spec) => {
                let samples: Vec<SegSample> = (0..cfg.batch_size)
                    .map(|j| {
                        let idx = (iter * cfg.batch_size + j) as u64;
                        let mut s = crate::data::synth_sample(spec, cfg.seed, idx);
                        if cfg.augment {
                            let policy = AugmentPolicy {
                                crop: None,
                                ..AugmentPolicy::default()
                            };
                            // scale jitter then re-crop to the native size is
                            // skipped for synthetic data; flip only
                            let policy = AugmentPolicy {
                                scale_range: (1.0, 1.0),
                                ..policy
                            };
                            s = augment(&s, &policy, stream_seed(cfg.seed, 0xa06, idx)).expect(
                                "flip-only augmentation cannot fail",
                            );
                        }
                        s
                    })
                    .collect();
                Ok(batch_samples(&samples))
            }
            DataSource::Files(spec) => {
                let pairs = list_samples(spec)?;
                if pairs.is_empty() {
                    return Err(TrainError::EmptyDataset);
                }
                let crop = cfg.crop.unwrap_or((512, 512));
                let samples: Vec<SegSample> = (0..cfg.batch_size)
                    .map(|j| -> Result<SegSample, TrainError> {
                        let draw = stream_seed(cfg.seed, 0xf11e, (iter * cfg.batch_size + j) as u64);
                        let index = (draw % pairs.len() as u64) as usize;
                        let s = load_sample(spec, index)?;
                        let policy = AugmentPolicy {
                            hflip_prob: if cfg.augment { 0.5 } else { 0.0 },
                            scale_range: if cfg.augment { (0.75, 1.5) } else { (1.0, 1.0) },
                            crop: Some(crop),
                        };
                        Ok(augment(&s, &policy, draw ^ 0x5eed)?)
                    })
                    .collect::<Result<_, _>>()?;
                Ok(batch_samples(&samples))
            }
        }
    }

    /// Fixed validation set, disjoint from the training stream.
    pub fn val_samples(&self, cfg: &TrainConfig) -> Result<Vec<SegSample>, TrainError> {
        match self {
            DataSource::Synthetic(spec) => Ok((0..cfg.val_size)
                .map(|j| {
                    crate::data::synth_sample(
                        spec,
                        stream_seed(cfg.seed, 0x7a1, 0),
                        j as u64,
                    )
                })
                .collect()),
            DataSource::Files(spec) => {
                let pairs = list_samples(spec)?;
                if pairs.is_empty() {
                    return Err(TrainError::EmptyDataset);
                }
                let n = cfg.val_size.min(pairs.len());
                (0..n)
                    .map(|i| Ok(load_sample(spec, i)?))
                    .collect::<Result<_, _>>()
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DataSource::Synthetic(spec) => spec.num_classes,
            DataSource::Files(spec) => spec.num_classes,
        }
    }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

/// One line of training history.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_miou: Option<f64>,
}

/// Result of a training run.
pub struct TrainOutcome {
    pub history: Vec<HistoryEntry>,
    pub best_miou: Option<f64>,
    pub final_iter: usize,
    pub stopped_early: bool,
}

/// Evaluate mean IoU of the model over a sample set (eval mode).
pub fn evaluate_miou(
    model: &Model<f32>,
    samples: &[SegSample],
    num_classes: usize,
) -> Result<f64, TrainError> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for s in samples {
        let (image, labels) = batch_samples(std::slice::from_ref(s));
        let logits = model.forward_eval(&image)?;
        let preds = argmax_to_labels(&logits);
        cm.accumulate(&preds[0].data, &labels)
            .expect("argmax predictions are in range");
    }
    Ok(cm.mean_iou().unwrap_or(0.0))
}

fn snapshot(model: &Model<f32>, opt: &AdamW, iter: usize, best: Option<f64>) -> Checkpoint {
    let mut ckpt = Checkpoint {
        config_hash: model.cfg.hash(),
        iteration: iter as u64,
        opt_step: opt.step_count,
        metric_snapshot: best,
        ..Checkpoint::default()
    };
    for (name, t) in model.store().params() {
        ckpt.params.insert(name.clone(), t.clone());
    }
    for (name, t) in model.store().buffers() {
        ckpt.buffers.insert(name.clone(), t.clone());
    }
    let (m, v) = opt.state();
    ckpt.opt_m = m.clone();
    ckpt.opt_v = v.clone();
    ckpt
}

/// Load checkpoint contents into a model + optimizer (config hash checked).
pub fn restore(
    model: &mut Model<f32>,
    opt: &mut AdamW,
    ckpt: &Checkpoint,
) -> Result<usize, TrainError> {
    ckpt.verify_config(&model.cfg.hash())?;
    for (name, t) in &ckpt.params {
        model.store_mut().set_param(name, t.clone());
    }
    for (name, t) in &ckpt.buffers {
        model.store_mut().set_buffer(name, t.clone());
    }
    opt.restore_state(ckpt.opt_m.clone(), ckpt.opt_v.clone(), ckpt.opt_step);
    Ok(ckpt.iteration as usize)
}

/// Run (or resume) the optimization loop. `start_iter` iterations are assumed
/// already done (weights/optimizer restored by [`restore`]).
#[allow(clippy::too_many_arguments)]
pub fn train_loop(
    model: &mut Model<f32>,
    source: &DataSource,
    cfg: &TrainConfig,
    opt: &mut AdamW,
    start_iter: usize,
    ckpt_dir: Option<&Path>,
    mut on_entry: impl FnMut(&HistoryEntry),
) -> Result<TrainOutcome, TrainError> {
    let num_classes = source.num_classes();
    let class_weights = if cfg.class_weighting {
        // estimate frequencies from a fixed probe of the training stream
        let mut sample_labels = Vec::new();
        for i in 0..4 {
            let (_, labels) = source.train_batch(cfg, i)?;
            sample_labels.extend_from_slice(&labels);
        }
        Some(class_weights_from_labels(&sample_labels, num_classes))
    } else {
        None
    };
    let val = source.val_samples(cfg)?;

    let mut history = Vec::new();
    let mut best: Option<f64> = None;
    let mut stopped_early = false;
    let mut final_iter = start_iter;

    for iter in start_iter..cfg.max_iters {
        let lr = cfg.lr_at(iter);
        let (images, labels) = source.train_batch(cfg, iter)?;

        let sess = Session::train_with_grad(model.store());
        let x = sess.input(images);
        let logits = model.forward_on(&sess, x)?;
        let (loss, _valid) =
            cross_entropy_loss(&sess.tape, logits, &labels, class_weights.as_deref());
        let loss_val = sess.value(loss).data()[0] as f64;

        let mut grads = sess.tape.backward(loss);
        let param_grads = sess.param_grads(&mut grads);
        let grad_norm = param_grads
            .values()
            .map(|g| g.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let buffer_updates = sess.take_buffer_updates();
        drop(sess);

        if !loss_val.is_finite() || !grad_norm.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                iter,
                lr,
                grad_norm,
            });
        }

        opt.step(model.store_mut(), &param_grads, lr);
        for (name, t) in buffer_updates {
            model.store_mut().set_buffer(&name, t);
        }
        final_iter = iter + 1;

        let mut entry = HistoryEntry {
            iter: iter + 1,
            loss: loss_val,
            lr,
            grad_norm,
            val_miou: None,
        };

        let do_eval = cfg.eval_every > 0
            && ((iter + 1) % cfg.eval_every == 0 || iter + 1 == cfg.max_iters);
        if do_eval {
            let miou = evaluate_miou(model, &val, num_classes)?;
            entry.val_miou = Some(miou);
            let improved = best.map(|b| miou > b).unwrap_or(true);
            if improved {
                best = Some(miou);
                if let Some(dir) = ckpt_dir {
                    snapshot(model, opt, iter + 1, best).save(&dir.join("best.ckpt"))?;
                }
            }
            if let Some(target) = cfg.target_miou {
                if miou >= target {
                    on_entry(&entry);
                    history.push(entry);
                    stopped_early = true;
                    break;
                }
            }
        }

        if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = ckpt_dir {
                snapshot(model, opt, iter + 1, best)
                    .save(&dir.join(format!("iter{:06}.ckpt", iter + 1)))?;
            }
        }

        on_entry(&entry);
        history.push(entry);
    }

    if let Some(dir) = ckpt_dir {
        snapshot(model, opt, final_iter, best).save(&dir.join("last.ckpt"))?;
    }
    Ok(TrainOutcome {
        history,
        best_miou: best,
        final_iter,
        stopped_early,
    })
}

/// Convenience wrapper: fresh optimizer, train from scratch.
pub fn train_fresh(
    model: &mut Model<f32>,
    source: &DataSource,
    cfg: &TrainConfig,
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    let mut opt = AdamW::new(cfg.weight_decay);
    train_loop(model, source, cfg, &mut opt, 0, ckpt_dir, |_| {})
}

// ---------------------------------------------------------------------------
// ablation driver
// ---------------------------------------------------------------------------

/// One row of the ablation report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub connections: [bool; 3],
    pub msau: [bool; 3],
    pub ffm: bool,
    pub params: u64,
    pub flops: u64,
    pub miou: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub input_size: (usize, usize),
    pub iters: usize,
    pub seeds: Vec<u64>,
}

/// Train every requested variant briefly on the same data and report the
/// parameter/FLOP budget next to the reached validation mean IoU (median over
/// seeds).
pub fn run_ablation_suite(
    variants: &[AblationVariant],
    source: &DataSource,
    base_cfg: &TrainConfig,
    model_template: impl Fn(AblationVariant) -> ModelConfig,
    seeds: &[u64],
    mut progress: impl FnMut(&str),
) -> Result<AblationReport, TrainError> {
    assert!(!variants.is_empty(), "variant list must be non-empty");
    assert!(!seeds.is_empty(), "need at least one seed");
    let mut rows = Vec::new();
    let mut input_size = (0, 0);
    for &variant in variants {
        let mut mious = Vec::new();
        let mut params = 0;
        let mut flops = 0;
        for &seed in seeds {
            let mut mcfg = model_template(variant);
            mcfg.seed = seed;
            let mut model: Model<f32> = Model::build(mcfg)?;
            params = model.param_count();
            input_size = model.cfg.input_size;
            flops = model.flops_total(input_size.0, input_size.1, 2);
            let mut cfg = base_cfg.clone();
            cfg.seed = seed;
            let outcome = train_fresh(&mut model, source, &cfg, None)?;
            let miou = outcome.best_miou.unwrap_or(0.0);
            progress(&format!(
                "{} seed {}: mIoU {:.4} after {} iters",
                variant.name(),
                seed,
                miou,
                outcome.final_iter
            ));
            mious.push(miou);
        }
        mious.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = mious[mious.len() / 2];
        let (connections, msau, ffm) = variant.switches();
        rows.push(AblationRow {
            variant: variant.name().to_string(),
            connections,
            msau,
            ffm,
            params,
            flops,
            miou: median,
        });
    }
    Ok(AblationReport {
        rows,
        input_size,
        iters: base_cfg.max_iters,
        seeds: seeds.to_vec(),
    })
}

/// Default model template for ablation runs: named variant geometry with the
/// dataset's class count.
pub fn default_template(num_classes: usize) -> impl Fn(AblationVariant) -> ModelConfig {
    move |v| make_variant(v, num_classes)
}

/// Directory layout helper for run outputs.
pub fn run_paths(out_dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        out_dir.join("config.resolved.toml"),
        out_dir.join("history.jsonl"),
        out_dir.join("manifest.json"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        for k in [2usize, 3, 7] {
            let tape: Tape<f64> = Tape::no_grad();
            let logits = tape.leaf(Tensor::full(&[1, k, 2, 2], 0.37));
            let labels = vec![0u8, 1, 1, 0];
            let (loss, valid) = cross_entropy_loss(&tape, logits, &labels, None);
            assert_eq!(valid, 4);
            let got = tape.value(loss).data()[0];
            assert!(
                (got - (k as f64).ln()).abs() < 1e-12,
                "k={k}: {got} vs {}",
                (k as f64).ln()
            );
        }
    }

    #[test]
    fn saturated_logits_loss_near_zero() {
        let tape: Tape<f64> = Tape::no_grad();
        let mut data = vec![0.0; 2 * 2 * 1 * 1];
        // class 1 hugely favored at both pixels
        data[1] = 30.0;
        data[3] = 30.0;
        let logits = tape.leaf(Tensor::new(&[2, 2, 1, 1], data));
        let (loss, _) = cross_entropy_loss(&tape, logits, &[1, 1], None);
        assert!(tape.value(loss).data()[0] < 1e-3);
    }

    #[test]
    fn all_ignored_pixels_define_zero_loss() {
        let tape: Tape<f64> = Tape::no_grad();
        let logits = tape.leaf(Tensor::full(&[1, 3, 2, 2], 1.0));
        let (loss, valid) = cross_entropy_loss(&tape, logits, &[255, 255, 255, 255], None);
        assert_eq!(valid, 0);
        assert_eq!(tape.value(loss).data()[0], 0.0);
    }

    #[test]
    fn loss_matches_hand_softmax_oracle_2x2_k3() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels = [0u8, 2, 255, 1];
        // hand oracle: per-pixel softmax + NLL, mean over 3 valid pixels
        let mut want = 0.0;
        for p in 0..4 {
            let t = labels[p];
            if t == 255 {
                continue;
            }
            let x: Vec<f64> = (0..3).map(|c| data[c * 4 + p]).collect();
            let m = x.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = x.iter().map(|v| (v - m).exp()).sum();
            let soft = (x[t as usize] - m).exp() / z;
            want += -soft.ln();
        }
        want /= 3.0;

        let tape: Tape<f64> = Tape::new();
        let logits = tape.leaf(Tensor::new(&[1, 3, 2, 2], data));
        let (loss, valid) = cross_entropy_loss(&tape, logits, &labels, None);
        assert_eq!(valid, 3);
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let data: Vec<f64> = (0..2 * 3 * 2 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = [0u8, 1, 2, 255, 1, 1, 0, 2];
        let weights = [1.0, 2.0, 0.5];

        let tape: Tape<f64> = Tape::new();
        let base = Tensor::new(&[2, 3, 2, 2], data.clone());
        let logits = tape.leaf(base.clone());
        let (loss, _) = cross_entropy_loss(&tape, logits, &labels, Some(&weights));
        let mut grads = tape.backward(loss);
        let g = grads.take(logits).unwrap();

        let f = |t: &Tensor<f64>| -> f64 {
            let tape: Tape<f64> = Tape::no_grad();
            let l = tape.leaf(t.clone());
            let (loss, _) = cross_entropy_loss(&tape, l, &labels, Some(&weights));
            tape.value(loss).data()[0]
        };
        let eps = 1e-6;
        for i in 0..base.numel() {
            let mut p = base.clone();
            p.data_mut()[i] += eps;
            let mut m = base.clone();
            m.data_mut()[i] -= eps;
            let fd = (f(&p) - f(&m)) / (2.0 * eps);
            assert!(
                (g.data()[i] - fd).abs() < 1e-7,
                "grad[{i}]: {} vs {}",
                g.data()[i],
                fd
            );
        }
    }

    #[test]
    fn poly_schedule_endpoints() {
        let cfg = TrainConfig::new(100);
        assert!((cfg.lr_at(0) - cfg.lr).abs() < 1e-15);
        assert!(cfg.lr_at(100) == 0.0);
        assert!(cfg.lr_at(50) < cfg.lr && cfg.lr_at(50) > 0.0);
    }

    #[test]
    fn one_iteration_changes_at_least_one_weight() {
        use crate::model::{make_variant, AblationVariant};
        let mut mcfg = make_variant(AblationVariant::Baseline, 3);
        mcfg.stage_channels = [8, 16, 32];
        mcfg.blocks_per_stage = [1, 1, 1];
        mcfg.decoder_blocks = [1, 1, 1];
        mcfg.dilation_schedule = [vec![1], vec![1], vec![1]];
        let mut model: Model<f32> = Model::build(mcfg).unwrap();
        let before: Vec<f32> = model
            .store()
            .params()
            .flat_map(|(_, t)| t.data().to_vec())
            .collect();
        let source = DataSource::Synthetic(SynthSpec::new(3, 16, 16));
        let mut cfg = TrainConfig::new(1);
        cfg.batch_size = 1;
        cfg.eval_every = 0;
        train_fresh(&mut model, &source, &cfg, None).unwrap();
        let after: Vec<f32> = model
            .store()
            .params()
            .flat_map(|(_, t)| t.data().to_vec())
            .collect();
        assert!(before.iter().zip(after.iter()).any(|(a, b)| a != b));
    }

    #[test]
    fn class_weights_inverse_frequency() {
        let labels = [0u8, 0, 0, 1, 255];
        let w = class_weights_from_labels(&labels, 2);
        assert!(w[1] > w[0]);
        assert!((w.iter().sum::<f64>() / 2.0 - 1.0).abs() < 1e-12);
    }
}
