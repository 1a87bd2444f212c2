//! Two-stage optimization: pre-training on unpaired domains and one-shot
//! transfer on a single pair.

mod checkpoint;
mod log;
mod trainer;

pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, BlobEntry, Manifest, ParamLayout, CHECKPOINT_FORMAT,
};
pub use log::{LossLog, StepRecord};
pub use trainer::{pretrain, run_epochs, transfer, transfer_state, EpochStats, RunIo, TrainState};

use paca_autograd::Tensor;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageTensor, Stage};
use crate::error::{PacaError, Result};
use crate::freezing::FreezeSpec;
use crate::losses::{LossWeights, SsimConfig};
use crate::networks::Param;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs_flat: usize,
    pub epochs_decay: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weights: LossWeights,
    pub ssim: SsimConfig,
    pub freeze: Option<FreezeSpec>,
    pub seed: u64,
    pub pool_size: usize,
    pub batch_size: usize,
    /// Save a checkpoint every this many epochs; 0 disables periodic saves.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            epochs_flat: 100,
            epochs_decay: 100,
            lr: 0.0002,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            weights: LossWeights::default(),
            ssim: SsimConfig::desk(),
            freeze: None,
            seed: 0,
            pool_size: 50,
            batch_size: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.epochs_flat + self.epochs_decay
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(PacaError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(PacaError::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(PacaError::Config("batch_size must be positive".into()));
        }
        if let Some(FreezeSpec::Random { rate, .. }) = self.freeze {
            if !(0.0..=1.0).contains(&rate) {
                return Err(PacaError::Config(format!("freezing rate must be in [0, 1], got {rate}")));
            }
        }
        self.weights.validate()
    }
}

/// Learning rate for `epoch`: constant for `epochs_flat` epochs, then a
/// linear ramp whose last epoch runs at `lr / epochs_decay`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.total_epochs();
    if epoch >= total {
        return Err(PacaError::Contract(format!("epoch {epoch} outside schedule of {total} epochs")));
    }
    if epoch < cfg.epochs_flat {
        return Ok(cfg.lr);
    }
    let remaining = total - epoch;
    Ok(cfg.lr * (remaining as f64 / cfg.epochs_decay as f64))
}

/// Independent 64-bit seed for a named purpose.
pub fn derive_seed(seed: u64, purpose: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng.next_u64()
}

/// History buffer of generated images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImagePool {
    pub capacity: usize,
    pub images: Vec<ImageTensor>,
}

impl ImagePool {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, images: Vec::with_capacity(capacity) }
    }
}

/// Fills the pool first; once full, returns `fresh` with probability 0.5 and
/// otherwise swaps it with a uniformly chosen stored image.
pub fn pool_query(pool: &mut ImagePool, fresh: ImageTensor, rng: &mut impl Rng) -> ImageTensor {
    if pool.capacity == 0 {
        return fresh;
    }
    if pool.images.len() < pool.capacity {
        pool.images.push(fresh.clone());
        return fresh;
    }
    if rng.random::<f64>() < 0.5 {
        return fresh;
    }
    let slot = rng.random_range(0..pool.images.len());
    std::mem::replace(&mut pool.images[slot], fresh)
}

/// Adam over a fixed list of parameter slots. Elements that are not
/// effectively trainable are skipped entirely, moments included.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Param<f32>>, beta1: f64, beta2: f64) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(|p| p.tensor.len()).collect();
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn slots(&self) -> usize {
        self.m.len()
    }

    /// Advances the step counter; call once per optimization step.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, slot: usize, p: &mut Param<f32>, grad: &Tensor<f32>, lr: f64) {
        if !p.trainable {
            return;
        }
        assert_eq!(grad.len(), p.tensor.len(), "gradient shape mismatch for {}", p.name);
        assert!(self.t > 0, "tick before update");
        let step = AdamStep {
            b1: self.beta1 as f32,
            b2: self.beta2 as f32,
            bc1: (1.0 - self.beta1.powi(self.t as i32)) as f32,
            bc2: (1.0 - self.beta2.powi(self.t as i32)) as f32,
            lr: lr as f32,
            eps: self.eps as f32,
        };
        adam_kernel(&step, p.tensor.data_mut(), &mut self.m[slot], &mut self.v[slot], grad.data(), p.mask.as_deref());
    }
}

struct AdamStep {
    b1: f32,
    b2: f32,
    bc1: f32,
    bc2: f32,
    lr: f32,
    eps: f32,
}

#[multiversion::multiversion(targets("x86_64+avx2+fma"))]
fn adam_kernel(k: &AdamStep, w: &mut [f32], m: &mut [f32], v: &mut [f32], g: &[f32], mask: Option<&[bool]>) {
    let n = g.len();
    let (w, m, v) = (&mut w[..n], &mut m[..n], &mut v[..n]);
    let moment = |m: f32, v: f32, g: f32| {
        let mi = k.b1 * m + (1.0 - k.b1) * g;
        let vi = k.b2 * v + (1.0 - k.b2) * g * g;
        (mi, vi, k.lr * (mi / k.bc1) / ((vi / k.bc2).sqrt() + k.eps))
    };
    match mask {
        None => {
            for i in 0..n {
                let (mi, vi, d) = moment(m[i], v[i], g[i]);
                m[i] = mi;
                v[i] = vi;
                w[i] -= d;
            }
        }
        Some(mask) => {
            // frozen entries keep their weight and moments
            let mask = &mask[..n];
            for i in 0..n {
                let (mi, vi, d) = moment(m[i], v[i], g[i]);
                let on = mask[i];
                m[i] = if on { mi } else { m[i] };
                v[i] = if on { vi } else { v[i] };
                w[i] = if on { w[i] - d } else { w[i] };
            }
        }
    }
}
