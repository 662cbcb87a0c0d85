//! Acceptance suite: one test per verification gate, each printing a
//! PASS/FAIL line. Run with `cargo test --test acceptance -- --nocapture
//! --test-threads 1` for readable output.
//!
//! Gate 1's FLOP band at 1024x1024 is jointly unattainable with the
//! parameter band for this architecture (any 0.8M-parameter fully
//! convolutional model whose parameters all see 1/8 resolution or finer
//! already costs >= 26 GFLOPs at MAC=2); that check reports its honest
//! number and fails by design. The same analyzer lands inside the band at
//! the 480x360 geometry, which is printed alongside as a diagnostic.

use ecmnet::analysis;
use ecmnet::blocks::{channel_shuffle, Edab, EdabConfig};
use ecmnet::checkpoint::Checkpoint;
use ecmnet::data::{synth_sample, SynthSpec};
use ecmnet::ffm::{Ffm, FfmConfig};
use ecmnet::metrics::ConfusionMatrix;
use ecmnet::model::{build_model, make_variant, AblationVariant, Model, ModelConfig};
use ecmnet::msau::{Msau, MsauConfig};
use ecmnet::nn::{ParamStore, Session};
use ecmnet::selfcheck;
use ecmnet::tensor::Tensor;
use ecmnet::train::{
    evaluate_miou, restore, train_fresh, train_loop, AdamW, DataSource, TrainConfig,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn gate(number: u32, name: &str, passed: bool, detail: &str) {
    println!(
        "[{}] criterion {}: {} - {}",
        if passed { "PASS" } else { "FAIL" },
        number,
        name,
        detail
    );
    assert!(passed, "criterion {number} ({name}): {detail}");
}

/// Criterion 1: parameter and FLOP budgets of the complete variant at
/// 1024x1024 within the stated bands, reported in under 30 seconds.
#[test]
fn criterion_1_budget_reproduction() {
    let t0 = std::time::Instant::now();
    let cfg = make_variant(AblationVariant::C3, 19);
    let model: Model<f32> = build_model(&cfg).unwrap();
    let report = analysis::budget_report(&model, Some("C3".into()), 1024, 1024, 2, 1, None);
    let elapsed = t0.elapsed().as_secs_f64();

    let params_m = report.total_params as f64 / 1e6;
    let flops_g = report.total_flops as f64 / 1e9;
    // diagnostic: the same model at the 480x360 geometry
    let (flops_camvid, _) = analysis::count_flops(&model, 360, 480, 2);
    println!(
        "  [info] C3 at 480x360: {:.2} GFLOPs (in the 7.0-9.5 G band the 1024x1024 gate asks for)",
        flops_camvid as f64 / 1e9
    );

    let params_ok = (0.80..=0.95).contains(&params_m);
    let time_ok = elapsed < 30.0;
    gate(
        1,
        "parameter budget",
        params_ok && time_ok,
        &format!("C3 total {params_m:.3} M in [0.80, 0.95] M, analyzed in {elapsed:.1} s"),
    );

    let flops_ok = (7.0..=9.5).contains(&flops_g);
    gate(
        1,
        "FLOP budget at 1024x1024",
        flops_ok,
        &format!(
            "C3 total {flops_g:.2} G vs band [7.0, 9.5] G; unattainable jointly with the \
             parameter band: >= 0.8M parameters at >= 1/8 resolution cost >= 26 G at MAC=2 \
             (honest count reported, see also the 480x360 diagnostic above)"
        ),
    );
}

/// Criterion 2: parameter counts across the ablation lattice are strictly
/// ordered as published (Baseline < A1 < B1 < A2 < A3 < B2 < B3 < C1 < C2 < C3).
#[test]
fn criterion_2_ablation_lattice_ordering() {
    use AblationVariant::*;
    let count = |v: AblationVariant| -> u64 {
        let model: Model<f32> = build_model(&make_variant(v, 11)).unwrap();
        model.param_count()
    };
    let expected_order = [Baseline, A1, B1, A2, A3, B2, B3, C1, C2, C3];
    let counts: Vec<(String, u64)> = expected_order
        .iter()
        .map(|&v| (v.name().to_string(), count(v)))
        .collect();
    let mut ok = true;
    for pair in counts.windows(2) {
        if pair[0].1 >= pair[1].1 {
            ok = false;
        }
    }
    // spot invariants: B-k > A-k, C3 maximal
    ok &= count(B1) > count(A1) && count(B2) > count(A2) && count(B3) > count(A3);
    let c3 = counts.last().unwrap().1;
    ok &= counts.iter().all(|(_, c)| *c <= c3);
    gate(
        2,
        "ablation lattice ordering",
        ok,
        &format!(
            "{}",
            counts
                .iter()
                .map(|(n, c)| format!("{n}={c}"))
                .collect::<Vec<_>>()
                .join(" < ")
        ),
    );
}

/// Criterion 3: the linear-time scan matches the unrolled quadratic oracle
/// within 1e-10 over 200 random instances, and merge(scan(x)) = 4x exactly.
#[test]
fn criterion_3_selective_scan_oracle() {
    let scan = selfcheck::check_selective_scan(200, 1e-10);
    gate(
        3,
        "selective scan vs quadratic oracle",
        scan.is_ok(),
        &scan.unwrap_or_else(|e| e),
    );
    let cross = selfcheck::check_cross_scan(false);
    gate(
        3,
        "cross scan/merge bijection",
        cross.is_ok(),
        &cross.unwrap_or_else(|e| e),
    );
}

/// Criterion 4: finite-difference vs reverse-mode gradients for every novel
/// block and the loss, 20 random directions each, relative error < 1e-4,
/// total under 5 minutes.
#[test]
fn criterion_4_gradient_suite() {
    let t0 = std::time::Instant::now();
    let results = selfcheck::gradient_suite(20);
    let elapsed = t0.elapsed().as_secs_f64();
    let mut ok = elapsed < 300.0;
    let mut details = Vec::new();
    for (name, check) in &results {
        ok &= check.passed && check.directions == 20;
        details.push(format!("{name} {:.2e}", check.max_rel_err));
    }
    gate(
        4,
        "gradient suite",
        ok,
        &format!(
            "max relative errors: {} ({elapsed:.0} s)",
            details.join(", ")
        ),
    );
}

/// Criterion 5: residual identities are exact under zeroed weights.
#[test]
fn criterion_5_residual_identities() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let rand_t = |shape: &[usize], rng: &mut ChaCha8Rng| -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };

    // zero-weight bottleneck block reduces to the channel shuffle
    let edab = Edab::new("a", EdabConfig::new(8, 2)).unwrap();
    let mut store: ParamStore<f64> = ParamStore::new();
    edab.register(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
    store.zero_all_params();
    let x = rand_t(&[2, 8, 6, 6], &mut rng);
    let sess = Session::new(&store, false);
    let y = sess.value(edab.forward(&sess, sess.input(x.clone())).unwrap());
    let sess2 = Session::new(&store, false);
    let want = sess2.value(channel_shuffle(&sess2, sess2.input(x.clone()), 2).unwrap());
    let edab_ok = y.max_abs_diff(&want) == Some(0.0);
    gate(
        5,
        "zero-weight bottleneck = channel shuffle",
        edab_ok,
        "exact equality",
    );

    // zero-weight skip unit is the identity
    let msau = Msau::new("a", MsauConfig::new(8)).unwrap();
    let mut store: ParamStore<f64> = ParamStore::new();
    msau.register(&mut store, &mut ChaCha8Rng::seed_from_u64(2));
    store.zero_all_params();
    let x = rand_t(&[1, 8, 6, 6], &mut rng);
    let sess = Session::new(&store, false);
    let y = sess.value(msau.forward(&sess, sess.input(x.clone())).unwrap());
    let msau_ok = y.max_abs_diff(&x) == Some(0.0);
    gate(5, "zero-weight skip unit = identity", msau_ok, "exact equality");

    // zero feed-forward contraction returns the encoder stream
    let ffm = Ffm::new("a", FfmConfig::new(16, 8, 8));
    let mut store: ParamStore<f64> = ParamStore::new();
    ffm.register(&mut store, &mut ChaCha8Rng::seed_from_u64(3));
    store.set_param("a.layer0.ffn_contract.weight", Tensor::zeros(&[8, 16, 1, 1]));
    store.set_param("a.layer0.ffn_contract.bias", Tensor::zeros(&[8]));
    let enc = rand_t(&[1, 8, 4, 4], &mut rng);
    let s1 = rand_t(&[1, 4, 4, 4], &mut rng);
    let s2 = rand_t(&[1, 4, 4, 4], &mut rng);
    let sess = Session::new(&store, false);
    let y = sess.value(
        ffm.forward(
            &sess,
            sess.input(enc.clone()),
            sess.input(s1),
            sess.input(s2),
        )
        .unwrap(),
    );
    let ffm_ok = y.max_abs_diff(&enc) == Some(0.0);
    gate(
        5,
        "zero feed-forward fusion = encoder stream",
        ffm_ok,
        "exact equality",
    );
}

/// Criterion 6: metric pipeline against brute-force set arithmetic on 1000
/// random maps; perfect prediction scores 1.0; the hand case gives 7/12.
#[test]
fn criterion_6_metric_oracle() {
    let brute = selfcheck::check_metrics(1000);
    gate(
        6,
        "IoU vs brute-force oracle",
        brute.is_ok(),
        &brute.unwrap_or_else(|e| e),
    );

    let mut cm = ConfusionMatrix::new(4);
    let gt = vec![0u8, 1, 2, 3, 1, 2];
    cm.accumulate(&gt, &gt).unwrap();
    let perfect_ok = cm.mean_iou() == Some(1.0);
    gate(6, "perfect prediction mIoU", perfect_ok, "mIoU = 1.0");

    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
    let miou = cm.mean_iou().unwrap();
    let hand_ok = (miou - 7.0 / 12.0).abs() < 1e-15;
    gate(6, "hand case mIoU", hand_ok, &format!("{miou} = 7/12"));
}

fn desk_model_cfg(variant: AblationVariant, seed: u64) -> ModelConfig {
    let mut cfg = make_variant(variant, 3);
    cfg.input_size = (64, 64);
    cfg.seed = seed;
    cfg
}

/// Criterion 7: desk-scale training reaches val mIoU >= 0.90 on the synthetic
/// 3-class 64x64 task within 2000 iterations, and the complete variant beats
/// the baseline in median over 3 seeds.
#[test]
fn criterion_7_desk_scale_training() {
    let t0 = std::time::Instant::now();
    let source = DataSource::Synthetic(SynthSpec::new(3, 64, 64));

    // main run: early-stop as soon as the target is passed
    let mut cfg = TrainConfig::new(2000);
    cfg.batch_size = 4;
    cfg.eval_every = 50;
    cfg.val_size = 16;
    cfg.target_miou = Some(0.90);
    let mut model: Model<f32> = build_model(&desk_model_cfg(AblationVariant::C3, 0)).unwrap();
    let outcome = train_fresh(&mut model, &source, &cfg, None).unwrap();
    let best = outcome.best_miou.unwrap_or(0.0);
    gate(
        7,
        "synthetic convergence",
        best >= 0.90 && outcome.final_iter <= 2000,
        &format!(
            "C3 val mIoU {best:.4} after {} iterations",
            outcome.final_iter
        ),
    );

    // direction of effect: C3 vs Baseline medians over 3 seeds
    let mut medians = Vec::new();
    for variant in [AblationVariant::C3, AblationVariant::Baseline] {
        let mut scores = Vec::new();
        for seed in [1u64, 2, 3] {
            let mut cfg = TrainConfig::new(120);
            cfg.batch_size = 4;
            cfg.eval_every = 40;
            cfg.val_size = 12;
            cfg.seed = seed;
            let mut model: Model<f32> = build_model(&desk_model_cfg(variant, seed)).unwrap();
            let outcome = train_fresh(&mut model, &source, &cfg, None).unwrap();
            scores.push(outcome.best_miou.unwrap_or(0.0));
        }
        scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
        medians.push((variant.name(), scores[1]));
    }
    let elapsed = t0.elapsed().as_secs_f64();
    let (c3_med, base_med) = (medians[0].1, medians[1].1);
    gate(
        7,
        "complete variant beats baseline (median of 3 seeds)",
        c3_med >= base_med && elapsed < 1800.0,
        &format!("C3 median {c3_med:.4} vs Baseline median {base_med:.4} ({elapsed:.0} s total)"),
    );
}

/// Criterion 8: fixed-seed training resumed from a mid-run checkpoint ends in
/// bitwise-identical weights; eval forwards repeat bitwise.
#[test]
fn criterion_8_determinism_and_persistence() {
    let dir = tempfile::tempdir().unwrap();
    let source = DataSource::Synthetic(SynthSpec::new(3, 32, 32));
    let mk_cfg = || {
        let mut cfg = TrainConfig::new(100);
        cfg.batch_size = 2;
        cfg.eval_every = 0;
        cfg.checkpoint_every = 50;
        cfg.seed = 7;
        cfg
    };
    let mcfg = {
        let mut c = desk_model_cfg(AblationVariant::C3, 7);
        c.input_size = (32, 32);
        c
    };

    // uninterrupted run
    let mut model_a: Model<f32> = build_model(&mcfg).unwrap();
    let cfg = mk_cfg();
    let mut opt_a = AdamW::new(cfg.weight_decay);
    train_loop(&mut model_a, &source, &cfg, &mut opt_a, 0, Some(dir.path()), |_| {}).unwrap();

    // resumed run from the iteration-50 checkpoint
    let ckpt = Checkpoint::load(&dir.path().join("iter000050.ckpt")).unwrap();
    let mut model_b: Model<f32> = build_model(&mcfg).unwrap();
    let mut opt_b = AdamW::new(cfg.weight_decay);
    let start = restore(&mut model_b, &mut opt_b, &ckpt).unwrap();
    assert_eq!(start, 50);
    train_loop(&mut model_b, &source, &cfg, &mut opt_b, start, None, |_| {}).unwrap();

    let mut bitwise = true;
    for (name, ta) in model_a.store().params() {
        let tb = model_b.store().param(name);
        for (a, b) in ta.data().iter().zip(tb.data().iter()) {
            if a.to_bits() != b.to_bits() {
                bitwise = false;
            }
        }
    }
    for (name, ta) in model_a.store().buffers() {
        let tb = model_b.store().buffer(name);
        for (a, b) in ta.data().iter().zip(tb.data().iter()) {
            if a.to_bits() != b.to_bits() {
                bitwise = false;
            }
        }
    }
    gate(
        8,
        "checkpoint resume replay",
        bitwise,
        "resumed weights and buffers bitwise-equal to the uninterrupted run",
    );

    let x = {
        let s = synth_sample(&SynthSpec::new(3, 32, 32), 3, 0);
        let (img, _) = ecmnet::data::batch_samples(&[s]);
        img
    };
    let y1 = model_a.forward_eval(&x).unwrap();
    let y2 = model_a.forward_eval(&x).unwrap();
    let repeat = y1
        .data()
        .iter()
        .zip(y2.data().iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    gate(8, "eval forward repeatability", repeat, "bitwise-identical logits");
}

/// Criterion 9: the forward shape contract across sizes and class counts,
/// with non-conforming sizes rejected by the documented error.
#[test]
fn criterion_9_shape_contract_sweep() {
    for &k in &[11usize, 19] {
        let model: Model<f32> = build_model(&make_variant(AblationVariant::C3, k)).unwrap();
        for &(h, w) in &[(64usize, 64usize), (128, 128), (256, 256), (360, 480)] {
            let x = Tensor::full(&[1, 3, h, w], 0.5f32);
            let y = model.forward_eval(&x).unwrap();
            assert_eq!(
                y.shape(),
                &[1, k, h, w],
                "shape contract at {h}x{w}, K={k}"
            );
        }
        // non-conforming size: documented rejection
        let bad = Tensor::full(&[1, 3, 100, 64], 0.0f32);
        let err = model.forward_eval(&bad).unwrap_err().to_string();
        assert!(err.contains("divisible by 8"), "error must name the multiple: {err}");
    }
    gate(
        9,
        "shape contract sweep",
        true,
        "logits (B,K,H,W) for H,W in {64,128,256,360x480}, K in {11,19}; 100x64 rejected",
    );
}

/// Companion check used by the model invariants: every parameter of the
/// complete variant receives gradient (no dead branches).
#[test]
fn gradient_flow_covers_every_parameter() {
    let result = selfcheck::check_gradient_flow();
    assert!(result.is_ok(), "{}", result.unwrap_err());
}

/// Companion check: mean IoU from streaming accumulation equals one-shot
/// accumulation on model predictions (integer counts).
#[test]
fn evaluate_miou_is_stream_consistent() {
    let spec = SynthSpec::new(3, 32, 32);
    let samples: Vec<_> = (0..4).map(|i| synth_sample(&spec, 11, i)).collect();
    let mut cfg = desk_model_cfg(AblationVariant::Baseline, 1);
    cfg.input_size = (32, 32);
    let model: Model<f32> = build_model(&cfg).unwrap();
    let all = evaluate_miou(&model, &samples, 3).unwrap();
    // same accumulation through two shards merged
    let a = {
        let mut cm = ConfusionMatrix::new(3);
        for s in &samples[..2] {
            let (img, labels) = ecmnet::data::batch_samples(std::slice::from_ref(s));
            let logits = model.forward_eval(&img).unwrap();
            let preds = ecmnet::data::argmax_to_labels(&logits);
            cm.accumulate(&preds[0].data, &labels).unwrap();
        }
        cm
    };
    let b = {
        let mut cm = ConfusionMatrix::new(3);
        for s in &samples[2..] {
            let (img, labels) = ecmnet::data::batch_samples(std::slice::from_ref(s));
            let logits = model.forward_eval(&img).unwrap();
            let preds = ecmnet::data::argmax_to_labels(&logits);
            cm.accumulate(&preds[0].data, &labels).unwrap();
        }
        cm
    };
    let mut merged = a.clone();
    merged.merge(&b);
    assert_eq!(merged.mean_iou().unwrap(), all);
}
