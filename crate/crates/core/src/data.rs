//! Synthetic dataset generation, the on-disk dataset format, preprocessing
//! and deterministic batching.
//!
//! A dataset directory holds `manifest.json`, `images/<id>.png` (8-bit
//! grayscale) and `masks/<id>.png` (8-bit, raw class indices). Any external
//! converter that writes this layout and a matching manifest produces a
//! loadable dataset.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fnv::FnvHasher;
use image::{GrayImage, ImageBuffer, Luma};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Error, Result};
use crate::losses::LabelMask;
use crate::model::{fnv1a, replicate_channels};
use crate::numerics::{resize_bilinear, FeatureMap, Scalar};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const MIN_CLASSES: usize = 2;
pub const MAX_CLASSES: usize = 10;
pub const MIN_SIZE: usize = 64;

/// One image/mask pair; `image` is `1×1×S×S` in `[0, 1]`, `mask` is `1×S×S`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: FeatureMap<f32>,
    pub mask: LabelMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}; expected train, val or test")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    /// Path relative to the dataset directory.
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub num_classes: usize,
    /// Side length of every image and mask.
    pub size: usize,
    pub samples: Vec<SampleRecord>,
    pub splits: Splits,
    pub generator_seed: Option<u64>,
    /// FNV-1a 64 content digest as 16 lowercase hex digits.
    pub digest: String,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.version != MANIFEST_VERSION {
            return Err(DataError::Manifest(format!("unsupported version {}", self.version)));
        }
        if !(MIN_CLASSES..=256).contains(&self.num_classes) {
            return Err(DataError::Manifest(format!("num_classes {} out of range", self.num_classes)));
        }
        let mut ids = BTreeSet::new();
        for r in &self.samples {
            if !ids.insert(r.id.as_str()) {
                return Err(DataError::Manifest(format!("duplicate sample id {}", r.id)));
            }
            for p in [&r.image, &r.mask] {
                if Path::new(p).is_absolute() || p.split(['/', '\\']).any(|c| c == "..") {
                    return Err(DataError::Manifest(format!("path {p} escapes the dataset directory")));
                }
            }
        }
        let mut seen = BTreeSet::new();
        for split in Split::ALL {
            for id in self.splits.get(split) {
                if !ids.contains(id.as_str()) {
                    return Err(DataError::Manifest(format!("{split} split names unknown id {id}")));
                }
                if !seen.insert(id.as_str()) {
                    return Err(DataError::Manifest(format!("id {id} appears in more than one split")));
                }
            }
        }
        if seen.len() != ids.len() {
            return Err(DataError::Manifest("splits do not cover every sample".into()));
        }
        Ok(())
    }
}

/// Digest over `(id, FNV(image bytes), FNV(mask bytes))` sorted by id.
pub fn content_digest(records: &[(String, u64, u64)]) -> String {
    let mut sorted: Vec<_> = records.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut h = FnvHasher::default();
    for (id, img, mask) in sorted {
        h.write(&(id.len() as u64).to_le_bytes());
        h.write(id.as_bytes());
        h.write(&img.to_le_bytes());
        h.write(&mask.to_le_bytes());
    }
    format!("{:016x}", h.finish())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub size: usize,
    pub num_classes: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_samples: 16,
            size: 64,
            num_classes: 4,
            val_fraction: 0.2,
            test_fraction: 0.1,
            noise_sigma: 0.05,
            blur_sigma: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn new(seed: u64, n_samples: usize, size: usize, num_classes: usize) -> Self {
        SynthConfig {
            seed,
            n_samples,
            size,
            num_classes,
            ..Self::default()
        }
    }

    /// Every sample goes to the training split.
    pub fn train_only(mut self) -> Self {
        self.val_fraction = 0.0;
        self.test_fraction = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(MIN_CLASSES..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be in [{MIN_CLASSES}, {MAX_CLASSES}], got {}",
                self.num_classes
            )));
        }
        if self.size < MIN_SIZE {
            return Err(Error::Config(format!("size must be >= {MIN_SIZE}, got {}", self.size)));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        let frac_ok = |f: f64| (0.0..=1.0).contains(&f);
        if !frac_ok(self.val_fraction) || !frac_ok(self.test_fraction) || self.val_fraction + self.test_fraction > 1.0 {
            return Err(Error::Config("split fractions must be in [0, 1] and sum to <= 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.blur_sigma >= 0.0) {
            return Err(Error::Config("noise and blur sigmas must be >= 0".into()));
        }
        Ok(())
    }

    fn split_counts(&self) -> (usize, usize) {
        let n = self.n_samples as f64;
        let test = (n * self.test_fraction).round() as usize;
        let val = ((n * self.val_fraction).round() as usize).min(self.n_samples - test);
        (val, test)
    }
}

/// Mean intensity of class `k` (0 is background).
fn class_intensity(k: usize, num_classes: usize) -> f64 {
    if k == 0 {
        0.1
    } else {
        0.2 + 0.7 * k as f64 / (num_classes - 1) as f64
    }
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    /// Superellipse exponent: 2 is an ellipse, 4 a rounded rectangle.
    power: f64,
}

impl Blob {
    fn random<R: Rng>(rng: &mut R, size: f64) -> Self {
        Blob {
            cy: rng.random_range(0.2..0.8) * size,
            cx: rng.random_range(0.2..0.8) * size,
            ry: rng.random_range(0.08..0.22) * size,
            rx: rng.random_range(0.08..0.22) * size,
            angle: rng.random_range(0.0..std::f64::consts::PI),
            power: if rng.random_bool(0.5) { 2.0 } else { 4.0 },
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        u.abs().powf(self.power) + v.abs().powf(self.power) <= 1.0
    }
}

/// Rasterizes one sample as (8-bit image, mask) from its own random stream.
fn synth_sample(cfg: &SynthConfig, index: usize) -> (GrayImage, GrayImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let s = cfg.size;
    let k = cfg.num_classes;
    let min_visible = (s * s / 400).max(16);
    let mut mask = vec![0u8; s * s];
    for _attempt in 0..64 {
        mask.fill(0);
        for class in 1..k {
            let blob = Blob::random(&mut rng, s as f64);
            for y in 0..s {
                for x in 0..s {
                    if blob.contains(y as f64 + 0.5, x as f64 + 0.5) {
                        mask[y * s + x] = class as u8;
                    }
                }
            }
        }
        let mut counts = vec![0usize; k];
        mask.iter().for_each(|&m| counts[m as usize] += 1);
        if counts[1..].iter().all(|&c| c >= min_visible) {
            break;
        }
    }
    let levels: Vec<f64> = (0..k)
        .map(|c| class_intensity(c, k) + rng.random_range(-0.03..0.03))
        .collect();
    let clean: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_fn(s as u32, s as u32, |x, y| Luma([levels[mask[y as usize * s + x as usize] as usize] as f32]));
    let blurred = if cfg.blur_sigma > 0.0 {
        image::imageops::blur(&clean, cfg.blur_sigma as f32)
    } else {
        clean
    };
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let img = GrayImage::from_fn(s as u32, s as u32, |x, y| {
        let mut v = blurred.get_pixel(x, y).0[0] as f64;
        if cfg.noise_sigma > 0.0 {
            v += noise.sample(&mut rng);
        }
        Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    let mask_img = GrayImage::from_raw(s as u32, s as u32, mask).expect("mask buffer sized");
    (img, mask_img)
}

fn encode_png(img: &GrayImage, path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| DataError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    Ok(bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn sample_id(index: usize, n: usize) -> String {
    let width = n.saturating_sub(1).to_string().len().max(4);
    format!("s{index:0width$}")
}

/// Generates a synthetic dataset into `out_dir` and writes its manifest.
pub fn gen_synthetic(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(cfg.n_samples);
    let mut digests = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let id = sample_id(i, cfg.n_samples);
        let (img, mask) = synth_sample(cfg, i);
        let rec = SampleRecord {
            image: format!("images/{id}.png"),
            mask: format!("masks/{id}.png"),
            id: id.clone(),
        };
        let img_path = out.join(&rec.image);
        let mask_path = out.join(&rec.mask);
        let img_bytes = encode_png(&img, &img_path)?;
        let mask_bytes = encode_png(&mask, &mask_path)?;
        write_file(&img_path, &img_bytes)?;
        write_file(&mask_path, &mask_bytes)?;
        digests.push((id, fnv1a(&img_bytes), fnv1a(&mask_bytes)));
        records.push(rec);
    }
    let mut order: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);
    let (n_val, n_test) = cfg.split_counts();
    let mut splits = Splits {
        test: order[..n_test].to_vec(),
        val: order[n_test..n_test + n_val].to_vec(),
        train: order[n_test + n_val..].to_vec(),
    };
    for v in [&mut splits.train, &mut splits.val, &mut splits.test] {
        v.sort();
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        num_classes: cfg.num_classes,
        size: cfg.size,
        samples: records,
        splits,
        generator_seed: Some(cfg.seed),
        digest: content_digest(&digests),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&out.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

/// A validated dataset directory; samples decode on demand.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf()).into()
        } else {
            Error::io(path, e)
        }
    })
}

fn decode_gray(bytes: &[u8], path: &Path, size: usize) -> Result<GrayImage> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let img = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(DataError::Image {
                path: path.to_path_buf(),
                message: format!("expected 8-bit grayscale, found {:?}", other.color()),
            }
            .into())
        }
    };
    if img.dimensions() != (size as u32, size as u32) {
        return Err(DataError::Image {
            path: path.to_path_buf(),
            message: format!("expected {size}x{size}, found {}x{}", img.width(), img.height()),
        }
        .into());
    }
    Ok(img)
}

fn check_mask(mask: &GrayImage, path: &Path, num_classes: usize) -> Result<(), DataError> {
    match mask.as_raw().iter().find(|&&v| v as usize >= num_classes) {
        Some(&value) => Err(DataError::LabelOutOfRange {
            file: path.to_path_buf(),
            value,
            num_classes,
        }),
        None => Ok(()),
    }
}

/// Opens a dataset: validates the manifest, checks every file exists,
/// every mask label is in range, and the content digest matches.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref().to_path_buf();
    let mpath = dir.join(MANIFEST_FILE);
    let text = read_bytes(&mpath)?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&text).map_err(|e| DataError::Manifest(format!("{}: {e}", mpath.display())))?;
    manifest.validate()?;
    let mut digests = Vec::with_capacity(manifest.samples.len());
    for r in &manifest.samples {
        let ipath = dir.join(&r.image);
        let mpath = dir.join(&r.mask);
        let ibytes = read_bytes(&ipath)?;
        let mbytes = read_bytes(&mpath)?;
        let mask = decode_gray(&mbytes, &mpath, manifest.size)?;
        check_mask(&mask, &mpath, manifest.num_classes)?;
        digests.push((r.id.clone(), fnv1a(&ibytes), fnv1a(&mbytes)));
    }
    let found = content_digest(&digests);
    if found != manifest.digest {
        return Err(DataError::DigestMismatch {
            expected: manifest.digest.clone(),
            found,
        }
        .into());
    }
    Ok(Dataset { dir, manifest })
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn ids(&self, split: Split) -> &[String] {
        self.manifest.splits.get(split)
    }

    pub fn sample(&self, id: &str) -> Result<Sample> {
        let rec = self
            .manifest
            .samples
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| DataError::Manifest(format!("no sample with id {id}")))?;
        let size = self.manifest.size;
        let ipath = self.dir.join(&rec.image);
        let mpath = self.dir.join(&rec.mask);
        let img = decode_gray(&read_bytes(&ipath)?, &ipath, size)?;
        let mask = decode_gray(&read_bytes(&mpath)?, &mpath, size)?;
        check_mask(&mask, &mpath, self.manifest.num_classes)?;
        let image = FeatureMap::from_vec(
            (1, 1, size, size),
            img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        )?;
        Ok(Sample {
            id: id.to_string(),
            image,
            mask: LabelMask::new(1, size, size, mask.into_raw())?,
        })
    }

    /// Every sample of a split, preprocessed to `size`, in id order.
    pub fn load_split(&self, split: Split, size: usize) -> Result<Vec<Sample>> {
        self.ids(split)
            .iter()
            .map(|id| self.sample(id).and_then(|s| preprocess(&s, size)))
            .collect()
    }
}

/// Nearest-neighbour label resize with `src = floor(i · in / out)`.
pub fn resize_mask_nearest(mask: &LabelMask, out_h: usize, out_w: usize) -> LabelMask {
    let mut labels = Vec::with_capacity(mask.b * out_h * out_w);
    for b in 0..mask.b {
        for y in 0..out_h {
            let sy = y * mask.h / out_h;
            for x in 0..out_w {
                labels.push(mask.at(b, sy, x * mask.w / out_w));
            }
        }
    }
    LabelMask {
        b: mask.b,
        h: out_h,
        w: out_w,
        labels,
    }
}

/// Resizes image (corner-aligned bilinear) and mask (nearest) to `size`.
pub fn preprocess(sample: &Sample, size: usize) -> Result<Sample> {
    let s = sample.image.shape();
    if (s.h, s.w) == (size, size) && (sample.mask.h, sample.mask.w) == (size, size) {
        return Ok(sample.clone());
    }
    Ok(Sample {
        id: sample.id.clone(),
        image: resize_bilinear(&sample.image, size, size)?,
        mask: resize_mask_nearest(&sample.mask, size, size),
    })
}

/// Sample order for `epoch`: a seeded shuffle per epoch, with the first
/// two entries swapped whenever it would repeat the previous epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut prev: Option<Vec<usize>> = None;
    for e in 0..=epoch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(e as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        if n >= 2 && prev.as_ref() == Some(&order) {
            order.swap(0, 1);
        }
        prev = Some(order);
    }
    prev.unwrap_or_default()
}

/// Index batches for one epoch; the last partial batch is kept.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    epoch_order(n, seed, epoch)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub ids: Vec<String>,
    /// `B×3×S×S`.
    pub images: FeatureMap<T>,
    pub masks: LabelMask,
}

/// Stacks samples into a batch, replicating grayscale to three channels.
pub fn collate<T: Scalar>(samples: &[&Sample]) -> Result<Batch<T>> {
    let first = samples.first().ok_or_else(|| Error::Input("empty batch".into()))?;
    let s = first.image.shape();
    let mut data = Vec::with_capacity(samples.len() * s.numel());
    for smp in samples {
        smp.image.expect_shape(s, "batch image")?;
        data.extend(smp.image.data().iter().map(|&v| T::lit(v as f64)));
    }
    let gray = FeatureMap::from_vec((samples.len(), s.c, s.h, s.w), data)?;
    let masks: Vec<&LabelMask> = samples.iter().map(|s| &s.mask).collect();
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        images: replicate_channels(&gray, 3),
        masks: LabelMask::stack(&masks)?,
    })
}

/// Deterministic batches over `samples` for one epoch.
pub fn batches<T: Scalar>(samples: &[Sample], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch<T>>> {
    if samples.is_empty() {
        return Err(Error::Input("cannot batch an empty split".into()));
    }
    batch_indices(samples.len(), batch_size, seed, epoch)
        .iter()
        .map(|idx| collate(&idx.iter().map(|&i| &samples[i]).collect::<Vec<_>>()))
        .collect()
}
