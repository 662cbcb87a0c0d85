//! Dataset handling: synthetic shapes for desk-scale training, Cityscapes
//! and CamVid ingestion with their label conventions, and augmentation.
//!
//! All randomness is derived from explicit seeds, so loaders and augmenters
//! are pure functions of (spec, seed, index).

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::IGNORE_INDEX;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("failed to decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("no label file found for image {0}")]
    MissingPair(PathBuf),
    #[error("image {image:?} and label {label:?} sizes differ")]
    SizeMismatch {
        image: (usize, usize),
        label: (usize, usize),
    },
    #[error("unknown label color ({r},{g},{b}) in {path}")]
    UnknownColor { r: u8, g: u8, b: u8, path: PathBuf },
    #[error("crop {crop:?} larger than image {image:?}")]
    CropTooLarge {
        crop: (usize, usize),
        image: (usize, usize),
    },
    #[error("sample index {index} out of range ({len} samples)")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid palette manifest: {0}")]
    BadPalette(String),
}

/// Per-pixel class labels, row-major (H,W); 255 is the ignore index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), h * w);
        Self { h, w, data }
    }

    pub fn filled(h: usize, w: usize, v: u8) -> Self {
        Self {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }
}

/// One image/label pair; image is (3,H,W) in [0,1].
#[derive(Clone, Debug)]
pub struct SegSample {
    pub image: Tensor<f32>,
    pub label: LabelMap,
}

impl SegSample {
    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.image.dims3();
        (h, w)
    }
}

/// Stack samples of identical size into a (B,3,H,W) batch plus flat labels.
pub fn batch_samples(samples: &[SegSample]) -> (Tensor<f32>, Vec<u8>) {
    assert!(!samples.is_empty());
    let (h, w) = samples[0].size();
    let mut image = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        assert_eq!(s.size(), (h, w), "batch members must share size");
        image.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.label.data);
    }
    (
        Tensor::new(&[samples.len(), 3, h, w], image),
        labels,
    )
}

/// Per-pixel argmax over channels of (B,K,H,W) logits.
pub fn argmax_to_labels<E: crate::elem::Scalar>(logits: &Tensor<E>) -> Vec<LabelMap> {
    let (b, k, h, w) = logits.dims4();
    let plane = h * w;
    (0..b)
        .map(|bi| {
            let mut data = vec![0u8; plane];
            for p in 0..plane {
                let mut best = logits.data()[(bi * k) * plane + p];
                let mut cls = 0u8;
                for c in 1..k {
                    let v = logits.data()[(bi * k + c) * plane + p];
                    if v > best {
                        best = v;
                        cls = c as u8;
                    }
                }
                data[p] = cls;
            }
            LabelMap::new(h, w, data)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// dataset specs
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Cityscapes,
    Camvid,
    Synthetic,
}

impl std::str::FromStr for DatasetName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cityscapes" => Ok(DatasetName::Cityscapes),
            "camvid" => Ok(DatasetName::Camvid),
            "synthetic" => Ok(DatasetName::Synthetic),
            other => Err(format!("unknown dataset {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Where and how to read a dataset.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub name: DatasetName,
    pub root: PathBuf,
    pub split: Split,
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

pub const CITYSCAPES_CLASSES: [&str; 19] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

pub const CAMVID_CLASSES: [&str; 11] = [
    "sky",
    "building",
    "pole",
    "road",
    "pavement",
    "tree",
    "sign",
    "fence",
    "car",
    "pedestrian",
    "bicyclist",
];

impl DatasetSpec {
    pub fn cityscapes(root: impl Into<PathBuf>, split: Split) -> Self {
        Self {
            name: DatasetName::Cityscapes,
            root: root.into(),
            split,
            num_classes: 19,
            class_names: CITYSCAPES_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn camvid(root: impl Into<PathBuf>, split: Split) -> Self {
        Self {
            name: DatasetName::Camvid,
            root: root.into(),
            split,
            num_classes: 11,
            class_names: CAMVID_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn synthetic(num_classes: usize) -> Self {
        Self {
            name: DatasetName::Synthetic,
            root: PathBuf::new(),
            split: Split::Train,
            num_classes,
            class_names: (0..num_classes)
                .map(|c| {
                    if c == 0 {
                        "background".to_string()
                    } else {
                        format!("shape{c}")
                    }
                })
                .collect(),
        }
    }
}

/// Published split sizes, for validation against full dataset checkouts.
pub fn expected_split_size(name: DatasetName, split: Split) -> Option<usize> {
    match (name, split) {
        (DatasetName::Cityscapes, Split::Train) => Some(2975),
        (DatasetName::Cityscapes, Split::Val) => Some(500),
        (DatasetName::Cityscapes, Split::Test) => Some(1525),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// label conventions
// ---------------------------------------------------------------------------

/// Cityscapes raw labelIds -> 19 train ids (255 = ignore). Total: every raw
/// id 0..=33 maps somewhere; anything else is ignore as well.
pub fn cityscapes_train_id(raw: u8) -> u8 {
    match raw {
        7 => 0,   // road
        8 => 1,   // sidewalk
        11 => 2,  // building
        12 => 3,  // wall
        13 => 4,  // fence
        17 => 5,  // pole
        19 => 6,  // traffic light
        20 => 7,  // traffic sign
        21 => 8,  // vegetation
        22 => 9,  // terrain
        23 => 10, // sky
        24 => 11, // person
        25 => 12, // rider
        26 => 13, // car
        27 => 14, // truck
        28 => 15, // bus
        31 => 16, // train
        32 => 17, // motorcycle
        33 => 18, // bicycle
        _ => IGNORE_INDEX,
    }
}

/// RGB palette entry of a CamVid class.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub name: String,
    pub rgb: [u8; 3],
    /// Train id, or 255 for void.
    pub id: u8,
}

/// Default 11-class CamVid palette (SegNet convention), shipped with the
/// crate; a `palette.json` in the dataset root overrides it.
pub const CAMVID_PALETTE_JSON: &str = include_str!("camvid_palette.json");

pub fn camvid_palette(root: &Path) -> Result<Vec<PaletteEntry>, DataError> {
    let override_path = root.join("palette.json");
    let text = if override_path.is_file() {
        std::fs::read_to_string(&override_path).map_err(|source| DataError::Io {
            path: override_path.clone(),
            source,
        })?
    } else {
        CAMVID_PALETTE_JSON.to_string()
    };
    serde_json::from_str(&text).map_err(|e| DataError::BadPalette(e.to_string()))
}

// ---------------------------------------------------------------------------
// file loading
// ---------------------------------------------------------------------------

fn read_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    let img = image::open(path).map_err(|e| DataError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok((h as usize, w as usize, rgb.into_raw()))
}

fn rgb_to_image_tensor(h: usize, w: usize, rgb: &[u8]) -> Tensor<f32> {
    let mut data = vec![0f32; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            data[c * h * w + p] = rgb[p * 3 + c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for entry in entries {
        let entry = entry.map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = entry.path();
        if path.extension().map(|e| e == "png").unwrap_or(false) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Enumerate (image, label) path pairs of a file-backed dataset, sorted.
pub fn list_samples(spec: &DatasetSpec) -> Result<Vec<(PathBuf, PathBuf)>, DataError> {
    match spec.name {
        DatasetName::Cityscapes => {
            let img_root = spec.root.join("leftImg8bit").join(spec.split.dir_name());
            let gt_root = spec.root.join("gtFine").join(spec.split.dir_name());
            let mut pairs = Vec::new();
            for city in list_dirs(&img_root)? {
                for img in list_pngs(&city)? {
                    let stem = img
                        .file_name()
                        .and_then(|s| s.to_str())
                        .unwrap_or_default()
                        .trim_end_matches("_leftImg8bit.png")
                        .to_string();
                    let label = gt_root
                        .join(city.file_name().expect("city dir name"))
                        .join(format!("{stem}_gtFine_labelIds.png"));
                    if !label.is_file() {
                        return Err(DataError::MissingPair(img));
                    }
                    pairs.push((img, label));
                }
            }
            pairs.sort();
            Ok(pairs)
        }
        DatasetName::Camvid => {
            let img_dir = spec.root.join(spec.split.dir_name());
            let label_dir = spec.root.join(format!("{}_labels", spec.split.dir_name()));
            let mut pairs = Vec::new();
            for img in list_pngs(&img_dir)? {
                let stem = img
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default()
                    .to_string();
                let label = label_dir.join(format!("{stem}_L.png"));
                if !label.is_file() {
                    return Err(DataError::MissingPair(img));
                }
                pairs.push((img, label));
            }
            pairs.sort();
            Ok(pairs)
        }
        DatasetName::Synthetic => Ok(Vec::new()),
    }
}

fn list_dirs(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for entry in entries {
        let entry = entry.map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        if entry.path().is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

/// Load one sample by index with the dataset's label remapping applied.
pub fn load_sample(spec: &DatasetSpec, index: usize) -> Result<SegSample, DataError> {
    let pairs = list_samples(spec)?;
    let (img_path, label_path) = pairs
        .get(index)
        .ok_or(DataError::IndexOutOfRange {
            index,
            len: pairs.len(),
        })?
        .clone();
    let (h, w, rgb) = read_rgb(&img_path)?;
    let image = rgb_to_image_tensor(h, w, &rgb);
    let (lh, lw, label_rgb) = read_rgb(&label_path)?;
    if (lh, lw) != (h, w) {
        return Err(DataError::SizeMismatch {
            image: (h, w),
            label: (lh, lw),
        });
    }
    let label = match spec.name {
        DatasetName::Cityscapes => {
            // labelIds PNG is grayscale; after RGB expansion all channels agree
            let data = (0..h * w)
                .map(|p| cityscapes_train_id(label_rgb[p * 3]))
                .collect();
            LabelMap::new(h, w, data)
        }
        DatasetName::Camvid => {
            let palette = camvid_palette(&spec.root)?;
            let mut lookup = std::collections::BTreeMap::new();
            for e in &palette {
                lookup.insert((e.rgb[0], e.rgb[1], e.rgb[2]), e.id);
            }
            let mut data = vec![0u8; h * w];
            for p in 0..h * w {
                let key = (label_rgb[p * 3], label_rgb[p * 3 + 1], label_rgb[p * 3 + 2]);
                match lookup.get(&key) {
                    Some(&id) => data[p] = id,
                    None => {
                        return Err(DataError::UnknownColor {
                            r: key.0,
                            g: key.1,
                            b: key.2,
                            path: label_path,
                        })
                    }
                }
            }
            LabelMap::new(h, w, data)
        }
        DatasetName::Synthetic => unreachable!("synthetic data needs no files"),
    };
    Ok(SegSample { image, label })
}

// ---------------------------------------------------------------------------
// synthetic shapes
// ---------------------------------------------------------------------------

/// Generator settings: K classes total (background plus K-1 shape classes),
/// each shape class with a target pixel fraction.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Target pixel fraction per shape class (length K-1).
    pub priors: Vec<f64>,
}

impl SynthSpec {
    pub fn new(num_classes: usize, height: usize, width: usize) -> Self {
        assert!(
            (2..=11).contains(&num_classes),
            "synthetic supports 2..=11 classes"
        );
        let per = (0.5 / (num_classes - 1) as f64).min(0.16);
        Self {
            num_classes,
            height,
            width,
            priors: vec![per; num_classes - 1],
        }
    }

    /// Configured pixel fraction per class including background at index 0.
    pub fn configured_priors(&self) -> Vec<f64> {
        let fg: f64 = self.priors.iter().sum();
        let mut out = vec![1.0 - fg];
        out.extend_from_slice(&self.priors);
        out
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Deterministic stream seed from (seed, stream, index).
pub fn stream_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(stream)) ^ index)
}

const SHAPE_COLORS: [[f32; 3]; 10] = [
    [0.85, 0.20, 0.20],
    [0.20, 0.70, 0.25],
    [0.20, 0.35, 0.85],
    [0.90, 0.80, 0.15],
    [0.75, 0.25, 0.80],
    [0.15, 0.75, 0.75],
    [0.95, 0.55, 0.15],
    [0.55, 0.35, 0.15],
    [0.45, 0.85, 0.55],
    [0.60, 0.60, 0.95],
];

/// One synthetic sample: colored geometric shapes over a textured background,
/// labels painted per shape class. Deterministic in (spec, seed, index).
///
/// Each shape class gets its own non-overlapping slot so the rasterized pixel
/// fraction stays an unbiased estimate of the configured prior.
pub fn synth_sample(spec: &SynthSpec, seed: u64, index: u64) -> SegSample {
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0x534e54, index));
    let mut image = vec![0f32; 3 * h * w];
    let mut label = vec![0u8; h * w];

    // textured background
    let bg_tint: [f32; 3] = [
        rng.gen_range(0.15..0.30),
        rng.gen_range(0.15..0.30),
        rng.gen_range(0.15..0.30),
    ];
    for p in 0..h * w {
        for c in 0..3 {
            image[c * h * w + p] = (bg_tint[c] + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
        }
    }

    // slot grid sized for the shape-class count
    let n_shapes = spec.num_classes - 1;
    let cols = (n_shapes as f64).sqrt().ceil() as usize;
    let rows = n_shapes.div_ceil(cols);
    let (slot_h, slot_w) = (h / rows, w / cols);

    for class in 1..spec.num_classes {
        let shape_idx = class - 1;
        let slot_r = shape_idx / cols;
        let slot_c = shape_idx % cols;
        let (y0, x0) = (slot_r * slot_h, slot_c * slot_w);
        let target_area = spec.priors[shape_idx] * (h * w) as f64;
        let color = SHAPE_COLORS[(class - 1) % SHAPE_COLORS.len()];
        let mut paint = |y: usize, x: usize, rng_noise: f32| {
            let p = y * w + x;
            label[p] = class as u8;
            for c in 0..3 {
                image[c * h * w + p] = (color[c] + rng_noise).clamp(0.0, 1.0);
            }
        };
        match shape_idx % 3 {
            0 => {
                // disk, radius jittered +-10%
                let r_mean = (target_area / std::f64::consts::PI).sqrt();
                let r = r_mean * (1.0 + rng.gen_range(-0.1..0.1));
                let r_fit = r.min((slot_h.min(slot_w) as f64 - 2.0) / 2.0);
                let cy = y0 as f64 + rng.gen_range(r_fit..(slot_h as f64 - r_fit).max(r_fit + 1e-9));
                let cx = x0 as f64 + rng.gen_range(r_fit..(slot_w as f64 - r_fit).max(r_fit + 1e-9));
                for y in y0..(y0 + slot_h).min(h) {
                    for x in x0..(x0 + slot_w).min(w) {
                        let dy = y as f64 + 0.5 - cy;
                        let dx = x as f64 + 0.5 - cx;
                        if dy * dy + dx * dx <= r_fit * r_fit {
                            paint(y, x, rng.gen_range(-0.05..0.05));
                        }
                    }
                }
            }
            1 => {
                // axis-aligned rectangle with jittered aspect, exact area
                let aspect = rng.gen_range(0.6..1.6);
                let rh = ((target_area * aspect).sqrt().round() as usize)
                    .clamp(2, slot_h.saturating_sub(1).max(2));
                let rw = ((target_area / rh as f64).round() as usize)
                    .clamp(2, slot_w.saturating_sub(1).max(2));
                let oy = y0 + rng.gen_range(0..=(slot_h - rh).max(0));
                let ox = x0 + rng.gen_range(0..=(slot_w - rw).max(0));
                for y in oy..(oy + rh).min(h) {
                    for x in ox..(ox + rw).min(w) {
                        paint(y, x, rng.gen_range(-0.05..0.05));
                    }
                }
            }
            _ => {
                // right triangle: half of a rectangle of twice the target area
                let side = ((2.0 * target_area).sqrt().round() as usize)
                    .clamp(3, slot_h.min(slot_w).saturating_sub(1).max(3));
                let oy = y0 + rng.gen_range(0..=(slot_h - side).max(0));
                let ox = x0 + rng.gen_range(0..=(slot_w - side).max(0));
                for dy in 0..side {
                    for dx in 0..(side - dy) {
                        let (y, x) = (oy + dy, ox + dx);
                        if y < h && x < w {
                            paint(y, x, rng.gen_range(-0.05..0.05));
                        }
                    }
                }
            }
        }
    }

    SegSample {
        image: Tensor::new(&[3, h, w], image),
        label: LabelMap::new(h, w, label),
    }
}

/// A deterministic batch of synthetic samples.
pub fn synth_batch(spec: &SynthSpec, seed: u64, count: usize) -> Vec<SegSample> {
    (0..count)
        .map(|i| synth_sample(spec, seed, i as u64))
        .collect()
}

/// Render a synthetic sample's label map as an RGB image (for the export
/// command and eyeballing).
pub fn label_to_rgb(label: &LabelMap) -> Vec<u8> {
    let mut out = vec![0u8; label.h * label.w * 3];
    for (p, &v) in label.data.iter().enumerate() {
        let color: [u8; 3] = if v == IGNORE_INDEX {
            [255, 255, 255]
        } else if v == 0 {
            [40, 40, 40]
        } else {
            let c = SHAPE_COLORS[(v as usize - 1) % SHAPE_COLORS.len()];
            [
                (c[0] * 255.0) as u8,
                (c[1] * 255.0) as u8,
                (c[2] * 255.0) as u8,
            ]
        };
        out[p * 3..p * 3 + 3].copy_from_slice(&color);
    }
    out
}

/// Reflect-pad a sample at the bottom/right so both spatial dims divide by
/// `multiple`. Padded label pixels are ignore-index. Returns the padded
/// sample and whether padding was applied.
pub fn pad_to_multiple(sample: &SegSample, multiple: usize) -> (SegSample, bool) {
    let (h, w) = sample.size();
    let ph = (multiple - h % multiple) % multiple;
    let pw = (multiple - w % multiple) % multiple;
    if ph == 0 && pw == 0 {
        return (sample.clone(), false);
    }
    let (nh, nw) = (h + ph, w + pw);
    let (c, _, _) = sample.image.dims3();
    let reflect = |i: usize, n: usize| {
        if i < n {
            i
        } else {
            n - 2 - (i - n).min(n.saturating_sub(2))
        }
    };
    let mut image = vec![0f32; c * nh * nw];
    for ci in 0..c {
        for y in 0..nh {
            let sy = reflect(y, h);
            for x in 0..nw {
                let sx = reflect(x, w);
                image[(ci * nh + y) * nw + x] = sample.image.data()[(ci * h + sy) * w + sx];
            }
        }
    }
    let mut label = vec![IGNORE_INDEX; nh * nw];
    for y in 0..h {
        for x in 0..w {
            label[y * nw + x] = sample.label.get(y, x);
        }
    }
    (
        SegSample {
            image: Tensor::new(&[c, nh, nw], image),
            label: LabelMap::new(nh, nw, label),
        },
        true,
    )
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

/// Augmentation policy: horizontal flip, isotropic scale jitter, random crop.
/// Labels are always resampled nearest-neighbor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub hflip_prob: f64,
    pub scale_range: (f64, f64),
    pub crop: Option<(usize, usize)>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            scale_range: (0.75, 1.5),
            crop: None,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            hflip_prob: 0.0,
            scale_range: (1.0, 1.0),
            crop: None,
        }
    }
}

fn bilinear_resize_image(image: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let (c, h, w) = image.dims3();
    let mut out = vec![0f32; c * oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for ci in 0..c {
        let src = &image.data()[ci * h * w..(ci + 1) * h * w];
        let dst = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
        for oy in 0..oh {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).max(0.0);
            let y0 = (fy.floor() as usize).min(h - 1);
            let y1 = (y0 + 1).min(h - 1);
            let ty = (fy - y0 as f64).clamp(0.0, 1.0) as f32;
            for ox in 0..ow {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).max(0.0);
                let x0 = (fx.floor() as usize).min(w - 1);
                let x1 = (x0 + 1).min(w - 1);
                let tx = (fx - x0 as f64).clamp(0.0, 1.0) as f32;
                let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
                let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
                dst[oy * ow + ox] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

fn nearest_resize_label(label: &LabelMap, oh: usize, ow: usize) -> LabelMap {
    let sy = label.h as f64 / oh as f64;
    let sx = label.w as f64 / ow as f64;
    let mut data = vec![0u8; oh * ow];
    for oy in 0..oh {
        let y = (((oy as f64 + 0.5) * sy - 0.5).round().max(0.0) as usize).min(label.h - 1);
        for ox in 0..ow {
            let x = (((ox as f64 + 0.5) * sx - 0.5).round().max(0.0) as usize).min(label.w - 1);
            data[oy * ow + ox] = label.get(y, x);
        }
    }
    LabelMap::new(oh, ow, data)
}

fn hflip_sample(sample: &SegSample) -> SegSample {
    let (c, h, w) = sample.image.dims3();
    let mut image = vec![0f32; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                image[(ci * h + y) * w + x] = sample.image.data()[(ci * h + y) * w + (w - 1 - x)];
            }
        }
    }
    let mut label = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            label[y * w + x] = sample.label.get(y, w - 1 - x);
        }
    }
    SegSample {
        image: Tensor::new(&[c, h, w], image),
        label: LabelMap::new(h, w, label),
    }
}

/// Apply scale jitter, random crop and horizontal flip, identically to image
/// and label. Deterministic per seed.
pub fn augment(sample: &SegSample, policy: &AugmentPolicy, seed: u64) -> Result<SegSample, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = sample.size();
    let mut out = sample.clone();

    let (lo, hi) = policy.scale_range;
    if lo != 1.0 || hi != 1.0 {
        let s = rng.gen_range(lo..=hi);
        let oh = ((h as f64 * s).round() as usize).max(1);
        let ow = ((w as f64 * s).round() as usize).max(1);
        out = SegSample {
            image: bilinear_resize_image(&out.image, oh, ow),
            label: nearest_resize_label(&out.label, oh, ow),
        };
    }

    if let Some((ch, cw)) = policy.crop {
        let (sh, sw) = out.size();
        if ch > sh || cw > sw {
            return Err(DataError::CropTooLarge {
                crop: (ch, cw),
                image: (sh, sw),
            });
        }
        let oy = rng.gen_range(0..=(sh - ch));
        let ox = rng.gen_range(0..=(sw - cw));
        let (c, _, _) = out.image.dims3();
        let mut image = vec![0f32; c * ch * cw];
        for ci in 0..c {
            for y in 0..ch {
                for x in 0..cw {
                    image[(ci * ch + y) * cw + x] =
                        out.image.data()[(ci * sh + oy + y) * sw + ox + x];
                }
            }
        }
        let mut label = vec![0u8; ch * cw];
        for y in 0..ch {
            for x in 0..cw {
                label[y * cw + x] = out.label.get(oy + y, ox + x);
            }
        }
        out = SegSample {
            image: Tensor::new(&[c, ch, cw], image),
            label: LabelMap::new(ch, cw, label),
        };
    }

    if policy.hflip_prob > 0.0 && rng.gen_range(0.0..1.0) < policy.hflip_prob {
        out = hflip_sample(&out);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_per_seed() {
        let spec = SynthSpec::new(3, 32, 32);
        let a = synth_batch(&spec, 7, 3);
        let b = synth_batch(&spec, 7, 3);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.label, y.label);
        }
        let c = synth_sample(&spec, 8, 0);
        assert_ne!(a[0].label, c.label);
    }

    #[test]
    fn synth_k2_single_disk_has_exactly_two_classes() {
        let spec = SynthSpec::new(2, 48, 48);
        let s = synth_sample(&spec, 1, 0);
        let mut seen = [false; 256];
        for &v in &s.label.data {
            seen[v as usize] = true;
        }
        assert!(seen[0] && seen[1]);
        assert_eq!(seen.iter().filter(|&&v| v).count(), 2);
    }

    #[test]
    fn synth_fractions_match_configured_priors() {
        // Monte-Carlo over the generator: mean class fractions within +-2%
        // absolute of the configured priors.
        let spec = SynthSpec::new(3, 64, 64);
        let trials = 300;
        let mut sums = vec![0f64; spec.num_classes];
        for i in 0..trials {
            let s = synth_sample(&spec, 99, i);
            let mut counts = vec![0usize; spec.num_classes];
            for &v in &s.label.data {
                counts[v as usize] += 1;
            }
            for (k, &c) in counts.iter().enumerate() {
                sums[k] += c as f64 / (64.0 * 64.0);
            }
        }
        let priors = spec.configured_priors();
        for k in 0..spec.num_classes {
            let mean = sums[k] / trials as f64;
            assert!(
                (mean - priors[k]).abs() < 0.02,
                "class {k}: mean {mean:.4} vs prior {:.4}",
                priors[k]
            );
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let spec = SynthSpec::new(3, 24, 24);
        let s = synth_sample(&spec, 3, 0);
        let policy = AugmentPolicy {
            hflip_prob: 1.0,
            scale_range: (1.0, 1.0),
            crop: None,
        };
        let once = augment(&s, &policy, 11).unwrap();
        let twice = augment(&once, &policy, 12).unwrap();
        assert_eq!(twice.image.data(), s.image.data());
        assert_eq!(twice.label, s.label);
    }

    #[test]
    fn crop_shapes_and_oversize_error() {
        let spec = SynthSpec::new(3, 80, 80);
        let s = synth_sample(&spec, 4, 0);
        let policy = AugmentPolicy {
            hflip_prob: 0.0,
            scale_range: (1.0, 1.0),
            crop: Some((64, 64)),
        };
        let out = augment(&s, &policy, 5).unwrap();
        assert_eq!(out.image.shape(), &[3, 64, 64]);
        assert_eq!((out.label.h, out.label.w), (64, 64));

        let policy = AugmentPolicy {
            crop: Some((128, 64)),
            ..policy
        };
        assert!(matches!(
            augment(&s, &policy, 6),
            Err(DataError::CropTooLarge { .. })
        ));
    }

    #[test]
    fn scale_jitter_preserves_label_palette() {
        let spec = SynthSpec::new(4, 40, 40);
        for i in 0..10 {
            let s = synth_sample(&spec, 5, i);
            let mut orig = [false; 256];
            for &v in &s.label.data {
                orig[v as usize] = true;
            }
            let policy = AugmentPolicy {
                hflip_prob: 0.0,
                scale_range: (0.75, 1.5),
                crop: None,
            };
            let out = augment(&s, &policy, 100 + i).unwrap();
            for &v in &out.label.data {
                assert!(orig[v as usize], "value {v} invented by resampling");
            }
        }
    }

    #[test]
    fn augment_keeps_image_and_label_aligned() {
        let spec = SynthSpec::new(3, 64, 64);
        let s = synth_sample(&spec, 6, 0);
        let policy = AugmentPolicy {
            hflip_prob: 1.0,
            scale_range: (0.8, 1.3),
            crop: Some((32, 32)),
        };
        let out = augment(&s, &policy, 7).unwrap();
        let (_, h, w) = out.image.dims3();
        assert_eq!((out.label.h, out.label.w), (h, w));
    }

    #[test]
    fn cityscapes_remap_fixture() {
        // raw id 7 (road) -> train id 0; a few more anchors from the
        // published mapping, everything unlisted -> ignore
        assert_eq!(cityscapes_train_id(7), 0);
        assert_eq!(cityscapes_train_id(26), 13);
        assert_eq!(cityscapes_train_id(33), 18);
        assert_eq!(cityscapes_train_id(0), IGNORE_INDEX);
        assert_eq!(cityscapes_train_id(6), IGNORE_INDEX);
        assert_eq!(cityscapes_train_id(34), IGNORE_INDEX);
        // totality: every raw byte maps to a train id or ignore
        for raw in 0..=255u8 {
            let t = cityscapes_train_id(raw);
            assert!(t == IGNORE_INDEX || t < 19);
        }
    }

    #[test]
    fn batching_stacks_images_and_labels() {
        let spec = SynthSpec::new(3, 16, 16);
        let samples = synth_batch(&spec, 1, 4);
        let (images, labels) = batch_samples(&samples);
        assert_eq!(images.shape(), &[4, 3, 16, 16]);
        assert_eq!(labels.len(), 4 * 16 * 16);
    }

    #[test]
    fn argmax_picks_max_channel() {
        let logits: Tensor<f32> = Tensor::new(
            &[1, 3, 1, 2],
            vec![0.1, 5.0, 0.2, -1.0, 3.0, 0.0],
        );
        let labels = argmax_to_labels(&logits);
        assert_eq!(labels[0].data, vec![2, 0]);
    }

    #[test]
    fn camvid_palette_parses_with_11_classes_plus_void() {
        let palette: Vec<PaletteEntry> = serde_json::from_str(CAMVID_PALETTE_JSON).unwrap();
        let trainable = palette.iter().filter(|e| e.id != IGNORE_INDEX).count();
        assert_eq!(trainable, 11);
        assert!(palette.iter().any(|e| e.id == IGNORE_INDEX));
    }
}
