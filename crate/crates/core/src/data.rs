//! Image ingestion, polarization, and deterministic unpaired batching.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use paca_autograd::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::error::{PacaError, Result};

pub const CHANNELS: usize = 3;

/// A `3 x side x side` image with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    side: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(side: usize, data: Vec<f32>) -> Result<Self> {
        if side == 0 {
            return Err(PacaError::Contract("image side must be positive".into()));
        }
        if data.len() != CHANNELS * side * side {
            return Err(PacaError::Contract(format!(
                "image of side {side} needs {} values, got {}",
                CHANNELS * side * side,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(PacaError::Contract(format!("image value {v} outside [-1, 1]")));
        }
        Ok(Self { side, data })
    }

    pub fn filled(side: usize, value: f32) -> Self {
        assert!(value.abs() <= 1.0);
        Self { side, data: vec![value; CHANNELS * side * side] }
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// `1 x 3 x side x side` network input.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, CHANNELS, self.side, self.side], self.data.clone())
    }

    /// Stacks images into one `N x 3 x side x side` batch.
    pub fn batch(images: &[&ImageTensor]) -> Result<Tensor<f32>> {
        let first = images.first().ok_or_else(|| PacaError::Contract("empty batch".into()))?;
        let side = first.side;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if img.side != side {
                return Err(PacaError::Contract(format!("batch mixes sides {side} and {}", img.side)));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::from_vec(&[images.len(), CHANNELS, side, side], data))
    }

    /// Splits a network output batch back into images.
    pub fn unbatch(t: &Tensor<f32>) -> Result<Vec<ImageTensor>> {
        let (n, c, h, w) = t.dims4();
        if c != CHANNELS || h != w {
            return Err(PacaError::Contract(format!("not an image batch: {:?}", t.shape())));
        }
        let step = c * h * w;
        (0..n).map(|i| ImageTensor::new(h, t.data()[i * step..(i + 1) * step].to_vec())).collect()
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        if w != h {
            return Err(PacaError::Contract(format!("image is {w}x{h}, expected square")));
        }
        let side = w as usize;
        let mut data = vec![0.0; CHANNELS * side * side];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..CHANNELS {
                data[(c * side + y as usize) * side + x as usize] = byte_to_unit(px[c]);
            }
        }
        Ok(Self { side, data })
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let s = self.side;
        RgbImage::from_fn(s as u32, s as u32, |x, y| {
            let at = |c: usize| unit_to_byte(self.data[(c * s + y as usize) * s + x as usize]);
            image::Rgb([at(0), at(1), at(2)])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|e| image_error(path, e))
    }

    /// Per-pixel mean over channels.
    pub fn luminance(&self) -> Vec<f32> {
        let plane = self.side * self.side;
        (0..plane).map(|i| (self.data[i] + self.data[plane + i] + self.data[2 * plane + i]) / 3.0).collect()
    }
}

/// `v / 127.5 - 1`.
pub fn byte_to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn unit_to_byte(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Fixed,
    Otsu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeFilter {
    Bilinear,
    Nearest,
}

impl ResizeFilter {
    fn filter_type(self) -> FilterType {
        match self {
            Self::Bilinear => FilterType::Triangle,
            Self::Nearest => FilterType::Nearest,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub side: usize,
    pub polarize: bool,
    pub threshold_mode: ThresholdMode,
    pub fixed_threshold: u32,
    pub resize_filter: ResizeFilter,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            side: 64,
            polarize: false,
            threshold_mode: ThresholdMode::Fixed,
            fixed_threshold: 128,
            resize_filter: ResizeFilter::Bilinear,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side == 0 {
            return Err(PacaError::Config("side must be positive".into()));
        }
        if self.threshold_mode == ThresholdMode::Fixed && self.fixed_threshold > 255 {
            return Err(PacaError::Config(format!("fixed threshold {} outside [0, 255]", self.fixed_threshold)));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        blob::hash_json(self)
    }
}

fn image_error(path: &Path, e: image::ImageError) -> PacaError {
    match e {
        image::ImageError::IoError(io) => PacaError::io(path, io),
        other => PacaError::MalformedInput { path: path.to_path_buf(), reason: other.to_string() },
    }
}

/// Decodes, center-crops to a square, resizes to `cfg.side`, and maps bytes to `[-1, 1]`.
///
/// Polarization is not applied here; see [`preprocess_file`].
pub fn load_image(path: &Path, cfg: &PreprocessConfig) -> Result<ImageTensor> {
    cfg.validate()?;
    let img = image::ImageReader::open(path)
        .map_err(|e| PacaError::io(path, e))?
        .with_guessed_format()
        .map_err(|e| PacaError::io(path, e))?
        .decode()
        .map_err(|e| image_error(path, e))?;
    from_dynamic(path, img, cfg)
}

fn from_dynamic(path: &Path, img: DynamicImage, cfg: &PreprocessConfig) -> Result<ImageTensor> {
    let (w, h) = (img.width(), img.height());
    if w == 0 || h == 0 {
        return Err(PacaError::MalformedInput { path: path.to_path_buf(), reason: "zero-dimension image".into() });
    }
    let s = w.min(h);
    let img = if w != h { img.crop_imm((w - s) / 2, (h - s) / 2, s, s) } else { img };
    let side = cfg.side as u32;
    let img = if s != side { img.resize_exact(side, side, cfg.resize_filter.filter_type()) } else { img };
    ImageTensor::from_rgb8(&img.to_rgb8())
}

/// Otsu's threshold over a 256-bin histogram: pixels `> t` form the bright class.
pub fn otsu_threshold(levels: &[u8]) -> u8 {
    let mut hist = [0u64; 256];
    for &v in levels {
        hist[v as usize] += 1;
    }
    let total = levels.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, 0u8);
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            best_t = t as u8;
        }
    }
    best_t
}

/// Thresholds per-pixel luminance to pure black (`-1`) or white (`+1`) on all channels.
pub fn polarize(img: &ImageTensor, cfg: &PreprocessConfig) -> ImageTensor {
    let levels: Vec<u8> = img.luminance().into_iter().map(unit_to_byte).collect();
    let t = match cfg.threshold_mode {
        ThresholdMode::Fixed => cfg.fixed_threshold.min(255) as u8,
        ThresholdMode::Otsu => otsu_threshold(&levels),
    };
    let plane: Vec<f32> = levels.iter().map(|&q| if q > t { 1.0 } else { -1.0 }).collect();
    let mut data = Vec::with_capacity(CHANNELS * plane.len());
    for _ in 0..CHANNELS {
        data.extend_from_slice(&plane);
    }
    ImageTensor { side: img.side, data }
}

/// [`load_image`] followed by [`polarize`] when `cfg.polarize` is set.
pub fn preprocess_file(path: &Path, cfg: &PreprocessConfig) -> Result<ImageTensor> {
    let img = load_image(path, cfg)?;
    Ok(if cfg.polarize { polarize(&img, cfg) } else { img })
}

/// PNG/JPEG files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| PacaError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| PacaError::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TransferPair {
    pub a: ImageTensor,
    pub b_prime: ImageTensor,
}

/// Two unpaired image pools plus the optional one-shot pair.
#[derive(Clone, Debug)]
pub struct UnpairedDataset {
    pub domain_a: Vec<ImageTensor>,
    pub domain_b: Vec<ImageTensor>,
    pub transfer_pair: Option<TransferPair>,
    pub split_fraction: f64,
    train_a: Vec<usize>,
    train_b: Vec<usize>,
    held_out_a: Vec<usize>,
    held_out_b: Vec<usize>,
}

fn split_indices(n: usize, fraction: f64, seed: u64, stream: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if fraction < 1.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        idx.shuffle(&mut rng);
    }
    let keep = ((n as f64 * fraction).ceil() as usize).clamp(n.min(1), n);
    let held = idx.split_off(keep);
    idx.sort_unstable();
    let mut held = held;
    held.sort_unstable();
    (idx, held)
}

impl UnpairedDataset {
    pub fn new(
        domain_a: Vec<ImageTensor>,
        domain_b: Vec<ImageTensor>,
        transfer_pair: Option<TransferPair>,
        split_fraction: f64,
        split_seed: u64,
    ) -> Result<Self> {
        if !(split_fraction > 0.0 && split_fraction <= 1.0) {
            return Err(PacaError::Config(format!("split fraction {split_fraction} outside (0, 1]")));
        }
        let sides: Vec<usize> = domain_a
            .iter()
            .chain(&domain_b)
            .chain(transfer_pair.iter().flat_map(|p| [&p.a, &p.b_prime]))
            .map(ImageTensor::side)
            .collect();
        if sides.windows(2).any(|w| w[0] != w[1]) {
            return Err(PacaError::Dataset("images have differing sides".into()));
        }
        let (train_a, held_out_a) = split_indices(domain_a.len(), split_fraction, split_seed, 0);
        let (train_b, held_out_b) = split_indices(domain_b.len(), split_fraction, split_seed, 1);
        Ok(Self { domain_a, domain_b, transfer_pair, split_fraction, train_a, train_b, held_out_a, held_out_b })
    }

    /// Dataset holding only the one-shot pair.
    pub fn one_shot(pair: TransferPair) -> Result<Self> {
        Self::new(Vec::new(), Vec::new(), Some(pair), 1.0, 0)
    }

    pub fn side(&self) -> Option<usize> {
        self.domain_a
            .first()
            .or(self.domain_b.first())
            .or(self.transfer_pair.as_ref().map(|p| &p.a))
            .map(ImageTensor::side)
    }

    pub fn train_a(&self) -> impl Iterator<Item = &ImageTensor> {
        self.train_a.iter().map(|&i| &self.domain_a[i])
    }

    pub fn train_b(&self) -> impl Iterator<Item = &ImageTensor> {
        self.train_b.iter().map(|&i| &self.domain_b[i])
    }

    pub fn held_out_a(&self) -> impl Iterator<Item = &ImageTensor> {
        self.held_out_a.iter().map(|&i| &self.domain_a[i])
    }

    pub fn held_out_b(&self) -> impl Iterator<Item = &ImageTensor> {
        self.held_out_b.iter().map(|&i| &self.domain_b[i])
    }

    pub fn train_len_a(&self) -> usize {
        self.train_a.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Transfer,
}

#[derive(Debug)]
pub struct Batch<'a> {
    pub a: Vec<&'a ImageTensor>,
    pub b: Vec<&'a ImageTensor>,
}

/// RNG stream id for one shuffle: domain bit, refill round, then epoch.
fn order_stream(epoch: u64, domain: u64, round: u64) -> u64 {
    (epoch << 20) | (round << 1) | domain
}

/// Deterministic batch stream.
///
/// Pre-training visits every training image of domain A exactly once per
/// epoch, in an order drawn from `(seed, epoch)`; domain B is drawn from its
/// own permutation, cycled when shorter. The transfer stage yields the pair
/// on every call.
pub struct BatchSampler<'a> {
    ds: &'a UnpairedDataset,
    stage: Stage,
    seed: u64,
    batch_size: usize,
    epoch: u64,
    cursor: usize,
    order_a: Vec<usize>,
    order_b: Vec<usize>,
}

impl<'a> BatchSampler<'a> {
    pub fn new(ds: &'a UnpairedDataset, stage: Stage, seed: u64, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(PacaError::Config("batch size must be positive".into()));
        }
        match stage {
            Stage::Pretrain if ds.train_a.is_empty() || ds.train_b.is_empty() => {
                return Err(PacaError::Dataset("pre-training needs non-empty domains A and B".into()));
            }
            Stage::Transfer if ds.transfer_pair.is_none() => {
                return Err(PacaError::Dataset("transfer stage needs a transfer pair".into()));
            }
            _ => {}
        }
        let mut s = Self { ds, stage, seed, batch_size, epoch: 0, cursor: 0, order_a: Vec::new(), order_b: Vec::new() };
        s.seek_epoch(0);
        Ok(s)
    }

    /// Batches in one pre-training epoch.
    pub fn batches_per_epoch(&self) -> usize {
        match self.stage {
            Stage::Pretrain => self.ds.train_a.len().div_ceil(self.batch_size),
            Stage::Transfer => 1,
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn permutation(&self, indices: &[usize], stream: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let mut v = indices.to_vec();
        v.shuffle(&mut rng);
        v
    }

    /// Positions the stream at the start of `epoch`.
    pub fn seek_epoch(&mut self, epoch: u64) {
        self.epoch = epoch;
        self.cursor = 0;
        if self.stage == Stage::Transfer {
            return;
        }
        self.order_a = self.permutation(&self.ds.train_a, order_stream(epoch, 0, 0));
        let need = self.ds.train_a.len();
        let mut order_b = Vec::with_capacity(need);
        let mut round = 0u64;
        while order_b.len() < need {
            let perm = self.permutation(&self.ds.train_b, order_stream(epoch, 1, round));
            order_b.extend(perm);
            round += 1;
        }
        order_b.truncate(need);
        self.order_b = order_b;
    }

    pub fn next_batch(&mut self) -> Batch<'a> {
        if self.stage == Stage::Transfer {
            let pair = self.ds.transfer_pair.as_ref().expect("checked at construction");
            return Batch { a: vec![&pair.a; self.batch_size], b: vec![&pair.b_prime; self.batch_size] };
        }
        if self.cursor >= self.order_a.len() {
            self.seek_epoch(self.epoch + 1);
        }
        let end = (self.cursor + self.batch_size).min(self.order_a.len());
        let a = self.order_a[self.cursor..end].iter().map(|&i| &self.ds.domain_a[i]).collect();
        let b = self.order_b[self.cursor..end].iter().map(|&i| &self.ds.domain_b[i]).collect();
        self.cursor = end;
        Batch { a, b }
    }
}

/// Sidecar written next to every cached tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub side: usize,
    pub channels: usize,
    pub source: PathBuf,
    pub source_sha256: String,
    pub config_hash: String,
}

pub fn write_cached(tensor_path: &Path, img: &ImageTensor, entry: &CacheEntry) -> Result<()> {
    blob::write_f32(tensor_path, img.data())?;
    blob::write_json(&tensor_path.with_extension("json"), entry)
}

pub fn read_cached(tensor_path: &Path) -> Result<(ImageTensor, CacheEntry)> {
    let entry: CacheEntry = blob::read_json(&tensor_path.with_extension("json"))?;
    if entry.channels != CHANNELS {
        return Err(PacaError::integrity(tensor_path.display().to_string(), "unexpected channel count"));
    }
    let data = blob::read_f32(tensor_path, entry.channels * entry.side * entry.side)?;
    let img = ImageTensor::new(entry.side, data)
        .map_err(|e| PacaError::integrity(tensor_path.display().to_string(), e.to_string()))?;
    Ok((img, entry))
}
