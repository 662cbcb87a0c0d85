//! Command-line surface: train, eval, analyze, ablate, selfcheck, synth.
//!
//! Exit codes: 0 success, 1 check or metric failure, 2 usage/config error.
//! Every run with an output directory writes a resolved-config snapshot and a
//! manifest of produced artifacts. The data root can come from the
//! `ECMNET_DATA_ROOT` environment variable.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::checkpoint::Checkpoint;
use crate::data::{
    argmax_to_labels, batch_samples, label_to_rgb, list_samples, load_sample, pad_to_multiple,
    synth_sample, DatasetName, DatasetSpec, Split, SynthSpec,
};
use crate::metrics::{ConfusionMatrix, MetricReport};
use crate::model::{make_variant, AblationVariant, Model, ModelConfig};
use crate::selfcheck;
use crate::train::{restore, run_ablation_suite, train_loop, AdamW, DataSource, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const DATA_ROOT_ENV: &str = "ECMNET_DATA_ROOT";
/// Test hook: set to a suite name to corrupt its checked data.
pub const SELFCHECK_CORRUPT_ENV: &str = "ECMNET_SELFCHECK_CORRUPT";

#[derive(Parser, Debug)]
#[command(
    name = "ecmnet",
    about = "Lightweight CNN + state-space semantic segmentation toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model (synthetic shapes by default).
    Train(TrainArgs),
    /// Evaluate a checkpoint and write per-class IoU.
    Eval(EvalArgs),
    /// Report parameter and FLOP budgets.
    Analyze(AnalyzeArgs),
    /// Train every requested ablation variant and tabulate the lattice.
    Ablate(AblateArgs),
    /// Run the built-in oracle suites.
    Selfcheck(SelfcheckArgs),
    /// Export synthetic samples as PNG files.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as dotted key=value pairs (e.g. train.lr=0.01).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory for history, checkpoints and the config snapshot.
    #[arg(long)]
    out: PathBuf,
    /// Resume from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Checkpoint whose config hash must match the resolved config.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset to score: synthetic, cityscapes or camvid.
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    #[arg(long, default_value = "val")]
    split: String,
    /// Dataset root (falls back to ECMNET_DATA_ROOT).
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Number of synthetic samples to score.
    #[arg(long, default_value_t = 32)]
    samples: usize,
    /// Pipeline plumbing test: score ground truth against itself.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Ablation variant name (Baseline, A1..A3, B1..B3, C1..C3).
    #[arg(long, conflicts_with = "config")]
    variant: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Input size as WIDTHxHEIGHT.
    #[arg(long, default_value = "1024x1024")]
    input: String,
    /// Ops per multiply-accumulate (2 or 1).
    #[arg(long, default_value_t = 2)]
    mac: u64,
    /// Itemization depth of the module paths.
    #[arg(long, default_value_t = 2)]
    depth: usize,
    /// Measure wall-clock latency with this many trials.
    #[arg(long)]
    latency_trials: Option<usize>,
    /// Classes for variant-built models.
    #[arg(long, default_value_t = 19)]
    classes: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Comma-separated variant names; default is the whole lattice.
    #[arg(long, default_value = "Baseline,A1,A2,A3,B1,B2,B3,C1,C2,C3")]
    variants: String,
    /// Training iterations per variant and seed.
    #[arg(long, default_value_t = 120)]
    iters: usize,
    /// Comma-separated seeds.
    #[arg(long, default_value = "1")]
    seeds: String,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Square synthetic input size.
    #[arg(long, default_value_t = 48)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SelfcheckArgs {
    /// Finite-difference directions per gradient check.
    #[arg(long, default_value_t = 5)]
    grad_directions: usize,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Square image size.
    #[arg(long, default_value_t = 64)]
    size: usize,
}

// ---------------------------------------------------------------------------
// run config
// ---------------------------------------------------------------------------

fn default_schema() -> u32 {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_dataset")]
    pub dataset: String,
    #[serde(default)]
    pub root: Option<PathBuf>,
    #[serde(default = "default_split")]
    pub split: String,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Synthetic image size.
    #[serde(default = "default_size")]
    pub size: (usize, usize),
}

fn default_dataset() -> String {
    "synthetic".into()
}
fn default_split() -> String {
    "train".into()
}
fn default_classes() -> usize {
    3
}
fn default_size() -> (usize, usize) {
    (64, 64)
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: default_dataset(),
            root: None,
            split: default_split(),
            num_classes: default_classes(),
            size: default_size(),
        }
    }
}

/// Complete run configuration: model wiring, training recipe, data source.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl RunConfig {
    pub fn desk_default() -> Self {
        let data = DataConfig::default();
        let mut model = ModelConfig::full(data.num_classes);
        model.input_size = data.size;
        let mut train = TrainConfig::new(2000);
        train.target_miou = Some(0.92);
        Self {
            schema_version: 1,
            model,
            train,
            data,
        }
    }
}

/// Load a TOML config, apply dotted-path overrides, deserialize strictly.
pub fn load_run_config(
    path: Option<&Path>,
    overrides: &[String],
) -> Result<RunConfig, String> {
    let base = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| format!("cannot read config {}: {e}", p.display()))?,
        None => toml::to_string(&RunConfig::desk_default()).expect("default serializes"),
    };
    let mut value: toml::Value = toml::from_str(&base).map_err(|e| format!("bad TOML: {e}"))?;
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| format!("override {ov:?} must be KEY=VALUE"))?;
        // interpret the value as a TOML literal (covers numbers, booleans,
        // arrays); anything that does not parse is taken as a bare string
        let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(t) => t["v"].clone(),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        apply_override(&mut value, key, parsed)?;
    }
    value
        .try_into::<RunConfig>()
        .map_err(|e| format!("invalid config: {e}"))
}

fn apply_override(root: &mut toml::Value, key: &str, val: toml::Value) -> Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| format!("override path {key:?} crosses a non-table"))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), val);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    Err(format!("empty override path {key:?}"))
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once('x')
        .ok_or_else(|| format!("size {s:?} must be WIDTHxHEIGHT, e.g. 1024x1024"))?;
    let w: usize = w
        .parse()
        .map_err(|_| format!("bad width in {s:?}"))?;
    let h: usize = h
        .parse()
        .map_err(|_| format!("bad height in {s:?}"))?;
    if w == 0 || h == 0 {
        return Err(format!("size {s:?} must be positive"));
    }
    Ok((w, h))
}

fn data_root(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(|p| p.to_path_buf())
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
}

fn write_snapshot(out: &Path, cfg: &RunConfig, artifacts: &[String]) -> Result<(), String> {
    std::fs::create_dir_all(out).map_err(|e| format!("cannot create {}: {e}", out.display()))?;
    let cfg_text = toml::to_string_pretty(cfg).map_err(|e| e.to_string())?;
    std::fs::write(out.join("config.resolved.toml"), cfg_text).map_err(|e| e.to_string())?;
    let manifest = serde_json::json!({
        "artifacts": artifacts,
        "hardware": analysis::hardware_descriptor(),
    });
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )
    .map_err(|e| e.to_string())?;
    Ok(())
}

fn dataset_spec(data: &DataConfig, root: Option<PathBuf>, split: Split) -> Result<DatasetSpec, String> {
    let name: DatasetName = data.dataset.parse()?;
    match name {
        DatasetName::Synthetic => Ok(DatasetSpec::synthetic(data.num_classes)),
        DatasetName::Cityscapes => {
            let root = root.ok_or("cityscapes needs --data-root or ECMNET_DATA_ROOT")?;
            Ok(DatasetSpec::cityscapes(root, split))
        }
        DatasetName::Camvid => {
            let root = root.ok_or("camvid needs --data-root or ECMNET_DATA_ROOT")?;
            Ok(DatasetSpec::camvid(root, split))
        }
    }
}

fn data_source(cfg: &RunConfig, root: Option<PathBuf>) -> Result<DataSource, String> {
    let name: DatasetName = cfg.data.dataset.parse()?;
    match name {
        DatasetName::Synthetic => Ok(DataSource::Synthetic(SynthSpec::new(
            cfg.data.num_classes,
            cfg.data.size.1,
            cfg.data.size.0,
        ))),
        _ => {
            let split: Split = cfg.data.split.parse()?;
            Ok(DataSource::Files(dataset_spec(&cfg.data, root, split)?))
        }
    }
}

// ---------------------------------------------------------------------------
// command bodies
// ---------------------------------------------------------------------------

fn cmd_train(args: &TrainArgs) -> Result<i32, String> {
    let cfg = load_run_config(args.config.as_deref(), &args.overrides)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.num_classes = cfg.data.num_classes;
    let mut model: Model<f32> =
        Model::build(model_cfg).map_err(|e| format!("model config: {e}"))?;
    let source = data_source(&cfg, data_root(None))?;

    std::fs::create_dir_all(&args.out).map_err(|e| e.to_string())?;
    let history_path = args.out.join("history.jsonl");
    let mut history_file =
        std::fs::File::create(&history_path).map_err(|e| e.to_string())?;

    let mut opt = AdamW::new(cfg.train.weight_decay);
    let start_iter = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).map_err(|e| e.to_string())?;
            restore(&mut model, &mut opt, &ckpt).map_err(|e| e.to_string())?
        }
        None => 0,
    };

    use std::io::Write;
    let outcome = train_loop(
        &mut model,
        &source,
        &cfg.train,
        &mut opt,
        start_iter,
        Some(&args.out),
        |entry| {
            let line = serde_json::to_string(entry).expect("history serializes");
            let _ = writeln!(history_file, "{line}");
            if let Some(m) = entry.val_miou {
                println!(
                    "iter {:>6}  loss {:.4}  lr {:.2e}  val mIoU {:.4}",
                    entry.iter, entry.loss, entry.lr, m
                );
            }
        },
    )
    .map_err(|e| e.to_string())?;

    write_snapshot(
        &args.out,
        &cfg,
        &[
            "history.jsonl".into(),
            "last.ckpt".into(),
            "best.ckpt".into(),
        ],
    )?;
    println!(
        "finished at iteration {} (best val mIoU {})",
        outcome.final_iter,
        outcome
            .best_miou
            .map(|m| format!("{m:.4}"))
            .unwrap_or_else(|| "n/a".into())
    );
    Ok(EXIT_OK)
}

fn cmd_eval(args: &EvalArgs) -> Result<i32, String> {
    let mut cfg = load_run_config(args.config.as_deref(), &args.overrides)?;
    cfg.data.dataset = args.dataset.clone();
    if !args.checkpoint.is_file() {
        return Err(format!(
            "checkpoint not found: {}",
            args.checkpoint.display()
        ));
    }
    let split: Split = args.split.parse()?;
    let spec = dataset_spec(&cfg.data, data_root(args.data_root.as_deref()), split)?;

    let mut model_cfg = cfg.model.clone();
    model_cfg.num_classes = spec.num_classes;
    let mut model: Model<f32> =
        Model::build(model_cfg).map_err(|e| format!("model config: {e}"))?;
    let ckpt = Checkpoint::load(&args.checkpoint).map_err(|e| e.to_string())?;
    let mut opt = AdamW::new(0.0);
    restore(&mut model, &mut opt, &ckpt).map_err(|e| e.to_string())?;

    let mut cm = ConfusionMatrix::new(spec.num_classes);
    let samples: Vec<crate::data::SegSample> = match spec.name {
        DatasetName::Synthetic => {
            let synth = SynthSpec::new(spec.num_classes, cfg.data.size.1, cfg.data.size.0);
            (0..args.samples)
                .map(|i| synth_sample(&synth, cfg.train.seed ^ 0xe7a1, i as u64))
                .collect()
        }
        _ => {
            let pairs = list_samples(&spec).map_err(|e| e.to_string())?;
            let n = pairs.len().min(args.samples.max(1));
            (0..n)
                .map(|i| load_sample(&spec, i).map_err(|e| e.to_string()))
                .collect::<Result<_, _>>()?
        }
    };
    for s in &samples {
        if args.oracle {
            cm.accumulate(&s.label.data, &s.label.data)
                .map_err(|e| e.to_string())?;
            continue;
        }
        let (padded, was_padded) = pad_to_multiple(s, 8);
        if was_padded {
            eprintln!("note: input padded to a multiple of 8 for the forward pass");
        }
        let (image, _) = batch_samples(std::slice::from_ref(&padded));
        let logits = model.forward_eval(&image).map_err(|e| e.to_string())?;
        let preds = argmax_to_labels(&logits);
        // score only the original (unpadded) region
        let (h, w) = s.size();
        let mut pred_crop = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                pred_crop.push(preds[0].get(y, x));
            }
        }
        cm.accumulate(&pred_crop, &s.label.data)
            .map_err(|e| e.to_string())?;
    }

    let report = MetricReport::from_matrix(&cm, &spec.class_names).map_err(|e| e.to_string())?;
    print!("{}", report.render_table());
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
        std::fs::write(
            out.join("report.json"),
            serde_json::to_string_pretty(&report).unwrap(),
        )
        .map_err(|e| e.to_string())?;
        write_snapshot(out, &cfg, &["report.json".into()])?;
    }
    Ok(EXIT_OK)
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<i32, String> {
    let (w, h) = parse_size(&args.input)?;
    if args.mac != 1 && args.mac != 2 {
        return Err(format!("--mac must be 1 or 2, got {}", args.mac));
    }
    let (model, variant_name, run_cfg): (Model<f32>, Option<String>, RunConfig) =
        if let Some(name) = &args.variant {
            let variant: AblationVariant = name.parse()?;
            let mcfg = make_variant(variant, args.classes);
            let model = Model::build(mcfg.clone()).map_err(|e| e.to_string())?;
            let mut rc = RunConfig::desk_default();
            rc.model = mcfg;
            (model, Some(variant.name().to_string()), rc)
        } else {
            let cfg = load_run_config(args.config.as_deref(), &args.overrides)?;
            let model = Model::build(cfg.model.clone()).map_err(|e| e.to_string())?;
            (model, None, cfg)
        };
    let report = analysis::budget_report(
        &model,
        variant_name,
        h,
        w,
        args.mac,
        args.depth,
        args.latency_trials,
    );
    print!("{}", analysis::render_budget(&report));
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
        std::fs::write(
            out.join("budget.json"),
            serde_json::to_string_pretty(&report).unwrap(),
        )
        .map_err(|e| e.to_string())?;
        write_snapshot(out, &run_cfg, &["budget.json".into()])?;
    }
    Ok(EXIT_OK)
}

fn cmd_ablate(args: &AblateArgs) -> Result<i32, String> {
    let variants: Vec<AblationVariant> = args
        .variants
        .split(',')
        .map(|s| s.trim().parse::<AblationVariant>())
        .collect::<Result<_, _>>()?;
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|e| format!("bad seed: {e}")))
        .collect::<Result<_, _>>()?;
    if args.size % 8 != 0 {
        return Err(format!("--size {} must be divisible by 8", args.size));
    }
    let source = DataSource::Synthetic(SynthSpec::new(args.classes, args.size, args.size));
    let mut train_cfg = TrainConfig::new(args.iters);
    train_cfg.batch_size = args.batch;
    train_cfg.eval_every = (args.iters / 4).max(1);
    let classes = args.classes;
    let size = args.size;
    let report = run_ablation_suite(
        &variants,
        &source,
        &train_cfg,
        move |v| {
            let mut cfg = make_variant(v, classes);
            cfg.input_size = (size, size);
            cfg
        },
        &seeds,
        |msg| println!("  {msg}"),
    )
    .map_err(|e| e.to_string())?;

    println!("\nvariant    conn      msau      ffm  params     flops         mIoU");
    for row in &report.rows {
        let marks = |v: [bool; 3]| {
            v.iter()
                .map(|&b| if b { 'x' } else { '-' })
                .collect::<String>()
        };
        println!(
            "{:<10} {:<9} {:<9} {:<4} {:<10} {:<13} {:.4}",
            row.variant,
            marks(row.connections),
            marks(row.msau),
            if row.ffm { "x" } else { "-" },
            row.params,
            row.flops,
            row.miou
        );
    }
    std::fs::create_dir_all(&args.out).map_err(|e| e.to_string())?;
    std::fs::write(
        args.out.join("ablation.json"),
        serde_json::to_string_pretty(&report).unwrap(),
    )
    .map_err(|e| e.to_string())?;
    let mut rc = RunConfig::desk_default();
    rc.train = train_cfg;
    rc.data.num_classes = args.classes;
    rc.data.size = (args.size, args.size);
    write_snapshot(&args.out, &rc, &["ablation.json".into()])?;
    Ok(EXIT_OK)
}

fn cmd_selfcheck(args: &SelfcheckArgs) -> i32 {
    let corrupt = std::env::var(SELFCHECK_CORRUPT_ENV).ok();
    let results = selfcheck::run_all(corrupt.as_deref(), args.grad_directions);
    let mut all_pass = true;
    for r in &results {
        println!(
            "[{}] {:<16} {:>7.2}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        );
        all_pass &= r.passed;
    }
    if all_pass {
        EXIT_OK
    } else {
        let failed: Vec<&str> = results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name)
            .collect();
        eprintln!("selfcheck failed: {}", failed.join(", "));
        EXIT_CHECK_FAILED
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<i32, String> {
    if args.size == 0 {
        return Err("--size must be positive".into());
    }
    std::fs::create_dir_all(&args.out).map_err(|e| e.to_string())?;
    let spec = SynthSpec::new(args.classes, args.size, args.size);
    let mut files = Vec::new();
    for i in 0..args.count {
        let s = synth_sample(&spec, args.seed, i as u64);
        let (_, h, w) = s.image.dims3();
        let mut rgb = vec![0u8; h * w * 3];
        for p in 0..h * w {
            for c in 0..3 {
                rgb[p * 3 + c] = (s.image.data()[c * h * w + p] * 255.0) as u8;
            }
        }
        let img_path = args.out.join(format!("sample{i:04}.png"));
        image::save_buffer(
            &img_path,
            &rgb,
            w as u32,
            h as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| e.to_string())?;
        let label_rgb = label_to_rgb(&s.label);
        let label_path = args.out.join(format!("sample{i:04}_label.png"));
        image::save_buffer(
            &label_path,
            &label_rgb,
            w as u32,
            h as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| e.to_string())?;
        files.push(img_path.file_name().unwrap().to_string_lossy().to_string());
        files.push(label_path.file_name().unwrap().to_string_lossy().to_string());
    }
    let mut rc = RunConfig::desk_default();
    rc.data.num_classes = args.classes;
    rc.data.size = (args.size, args.size);
    write_snapshot(&args.out, &rc, &files)?;
    println!("wrote {} samples to {}", args.count, args.out.display());
    Ok(EXIT_OK)
}

/// Parse arguments and dispatch; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // help/version print and exit 0; real parse errors exit 2
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Selfcheck(args) => return cmd_selfcheck(args),
        Command::Synth(args) => cmd_synth(args),
    };
    match outcome {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            EXIT_USAGE
        }
    }
}

/// Entry point for the binary: reads `std::env::args`.
pub fn run_from_env() -> i32 {
    run(std::env::args())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("1024x1024").unwrap(), (1024, 1024));
        assert_eq!(parse_size("480x360").unwrap(), (480, 360));
        assert!(parse_size("1024x").is_err());
        assert!(parse_size("x").is_err());
        assert!(parse_size("0x8").is_err());
    }

    #[test]
    fn overrides_reach_nested_keys_and_unknown_keys_fail() {
        let cfg = load_run_config(None, &["train.lr=0.5".into(), "data.num_classes=4".into()])
            .unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.data.num_classes, 4);
        let err = load_run_config(None, &["train.bogus=1".into()]).unwrap_err();
        assert!(err.contains("invalid config"), "{err}");
    }

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::desk_default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn malformed_analyze_size_is_usage_error() {
        let code = run(["ecmnet", "analyze", "--variant", "C3", "--input", "1024x"]);
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        let code = run(["ecmnet", "frobnicate"]);
        assert_eq!(code, EXIT_USAGE);
    }
}
