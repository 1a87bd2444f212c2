use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use paca_core::Result;
use serde_json::Value;

use crate::config::{json, parse_set, path_value, split_schedule, Override};

#[derive(Debug, Parser)]
#[command(name = "paca", version, about = "Pre-train a CycleGAN, adapt it to one image pair, and evaluate the result")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a small synthetic image set laid out for `preprocess --inputs`.
    Fixture(FixtureArgs),
    /// Decode, crop, resize and optionally polarize images into a tensor cache.
    Preprocess(PreprocessArgs),
    /// Pre-train both generators and discriminators on the unpaired domains.
    Pretrain(PretrainArgs),
    /// One-shot transfer from a pre-trained checkpoint with random freezing.
    Transfer(TransferArgs),
    /// Apply a generator from a checkpoint to a directory of images.
    Infer(InferArgs),
    /// Score one or more checkpoints and write a metric table.
    Evaluate(EvaluateArgs),
    /// Run transfers over a grid of freezing rates and step counts.
    Sweep(SweepArgs),
    /// Re-run a command from its run.json.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON configuration file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory. Relative paths resolve under $PACA_OUT_ROOT when it is set.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set train.lr=0.0001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Collects overrides: `--set` first, then named flags.
struct Ov(Vec<Override>);

impl Ov {
    fn new(c: &Common) -> Result<Self> {
        let mut v = c.set.iter().map(|s| parse_set(s)).collect::<Result<Vec<_>>>()?;
        if let Some(out) = &c.out {
            v.push(("out".into(), path_value(out)));
        }
        Ok(Self(v))
    }

    fn put<T: serde::Serialize>(&mut self, key: &str, v: Option<T>) -> &mut Self {
        if let Some(v) = v {
            self.0.push((key.into(), json(v)));
        }
        self
    }

    fn path(&mut self, key: &str, v: &Option<PathBuf>) -> &mut Self {
        if let Some(p) = v {
            self.0.push((key.into(), path_value(p)));
        }
        self
    }

    fn raw(&mut self, key: &str, v: Value) -> &mut Self {
        self.0.push((key.into(), v));
        self
    }

    /// `--epochs` / `--steps`: an even split between flat and decaying phases.
    fn total(&mut self, prefix: &str, total: Option<usize>) -> &mut Self {
        if let Some(n) = total {
            let (flat, decay) = split_schedule(n);
            self.put(&format!("{prefix}.epochs_flat"), Some(flat));
            self.put(&format!("{prefix}.epochs_decay"), Some(decay));
        }
        self
    }

    fn ssim_scales(&mut self, key: &str, scales: Option<usize>) -> Result<&mut Self> {
        if let Some(s) = scales {
            let cfg = paca_core::losses::SsimConfig::with_scales(s)?;
            self.0.push((key.into(), json(cfg)));
        }
        Ok(self)
    }
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub side: Option<usize>,
    /// Images per domain.
    #[arg(long)]
    pub per_domain: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl FixtureArgs {
    pub fn overrides(&self) -> Result<Vec<Override>> {
        let mut o = Ov::new(&self.common)?;
        o.put("side", self.side).put("per_domain", self.per_domain).put("seed", self.seed);
        Ok(o.0)
    }
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory with domain_a/, domain_b/, domain_b_prime/, pair_a.png and pair_b_prime.png.
    #[arg(long)]
    pub inputs: Option<PathBuf>,
    #[arg(long)]
    pub domain_a: Option<PathBuf>,
    #[arg(long)]
    pub domain_b: Option<PathBuf>,
    #[arg(long)]
    pub domain_b_prime: Option<PathBuf>,
    #[arg(long)]
    pub pair_a: Option<PathBuf>,
    #[arg(long)]
    pub pair_b_prime: Option<PathBuf>,
    #[arg(long)]
    pub side: Option<usize>,
    /// Binarize domain A and the pair's source image.
    #[arg(long)]
    pub polarize: Option<bool>,
    /// `fixed` or `otsu`.
    #[arg(long)]
    pub threshold_mode: Option<String>,
    #[arg(long)]
    pub fixed_threshold: Option<u32>,
}

impl PreprocessArgs {
    pub fn overrides(&self) -> Result<Vec<Override>> {
        let mut o = Ov::new(&self.common)?;
        if let Some(dir) = &self.inputs {
            let p = paca_core::synthetic::FixturePaths::under(dir);
            o.raw("inputs.domain_a", path_value(&p.domain_a))
                .raw("inputs.domain_b", path_value(&p.domain_b))
                .raw("inputs.domain_b_prime", path_value(&p.domain_b_prime))
                .raw("inputs.pair_a", path_value(&p.pair_a))
                .raw("inputs.pair_b_prime", path_value(&p.pair_b_prime));
        }
        o.path("inputs.domain_a", &self.domain_a)
            .path("inputs.domain_b", &self.domain_b)
            .path("inputs.domain_b_prime", &self.domain_b_prime)
            .path("inputs.pair_a", &self.pair_a)
            .path("inputs.pair_b_prime", &self.pair_b_prime)
            .put("image.side", self.side)
            .put("image.polarize", self.polarize)
            .put("image.threshold_mode", self.threshold_mode.clone())
            .put("image.fixed_threshold", self.fixed_threshold);
        Ok(o.0)
    }
}

/// Optimization flags shared by the training commands.
#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda_cyc: Option<f64>,
    #[arg(long)]
    pub lambda_reg: Option<f64>,
    #[arg(long)]
    pub pool_size: Option<usize>,
    /// Number of MS-SSIM scales (images must be large enough for all of them).
    #[arg(long)]
    pub ssim_scales: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

impl TrainFlags {
    fn apply(&self, o: &mut Ov) -> Result<()> {
        o.put("train.seed", self.seed)
            .put("train.lr", self.lr)
            .put("train.weights.lambda_cyc", self.lambda_cyc)
            .put("train.weights.lambda_reg", self.lambda_reg)
            .put("train.pool_size", self.pool_size)
            .put("train.checkpoint_every", self.checkpoint_every)
            .ssim_scales("train.ssim", self.ssim_scales)?;
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Preprocessed cache directory.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// `desk`, `full` or `tiny`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Total epochs, split evenly between constant and decaying learning rate.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub epochs_flat: Option<usize>,
    #[arg(long)]
    pub epochs_decay: Option<usize>,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

impl PretrainArgs {
    pub fn overrides(&self) -> Result<Vec<Override>> {
        let mut o = Ov::new(&self.common)?;
        o.path("cache", &self.cache)
            .put("preset", self.preset.clone())
            .total("train", self.epochs)
            .put("train.epochs_flat", self.epochs_flat)
            .put("train.epochs_decay", self.epochs_decay)
            .path("resume", &self.resume);
        self.train.apply(&mut o)?;
        Ok(o.0)
    }
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub common: Common,
    /// Pre-training checkpoint to start from.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Preprocessed cache holding the transfer pair.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Total transfer steps, split evenly between constant and decaying learning rate.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Fraction of generator parameters to freeze.
    #[arg(long)]
    pub rate: Option<f64>,
    /// `element` or `tensor`.
    #[arg(long)]
    pub granularity: Option<String>,
    /// Seed of the freezing mask.
    #[arg(long)]
    pub mask_seed: Option<u64>,
    /// Freeze one residual block (1-based) instead of a random subset.
    #[arg(long, conflicts_with_all = ["rate", "granularity", "mask_seed"])]
    pub freeze_block: Option<usize>,
    #[command(flatten)]
    pub train: TrainFlags,
}

impl TransferArgs {
    pub fn overrides(&self) -> Result<Vec<Override>> {
        let mut o = Ov::new(&self.common)?;
        o.path("base", &self.base).path("cache", &self.cache).total("train", self.steps);
        if let Some(block) = self.freeze_block {
            o.raw("train.freeze", serde_json::json!({ "kind": "layer", "block": block }));
        }
        o.put("train.freeze.rate", self.rate)
            .put("train.freeze.granularity", self.granularity.clone())
            .put("train.freeze.seed", self.mask_seed);
        self.train.apply(&mut o)?;
        Ok(o.0)
    }
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// A cache root, a cached set directory, or a directory of images.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Set to read when `--input` is a cache root.
    #[arg(long)]
    pub input_set: Option<String>,
    /// `g_a` or `g_b`.
    #[arg(long)]
    pub generator: Option<String>,
    /// Suffix of output file names.
    #[arg(long)]
    pub tag: Option<String>,
    /// Binarize raw input images before inference.
    #[arg(long)]
    pub polarize: Option<bool>,
}

impl InferArgs {
    pub fn overrides(&self) -> Result<Vec<Override>> {
        let mut o = Ov::new(&self.common)?;
        o.path("checkpoint", &self.checkpoint)
            .path("input", &self.input)
            .put("input_set", self.input_set.clone())
            .put("generator", self.generator.clone())
            .put("tag", self.tag.clone())
            .put("image.polarize", self.polarize);
        Ok(o.0)
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// One table row, as NAME=CHECKPOINT. Repeat in table order.
    #[arg(long = "method", value_name = "NAME=CHECKPOINT")]
    pub methods: Vec<String>,
    /// `conv` or `pixel`.
    #[arg(long)]
    pub fid_extractor: Option<String>,
    /// `conv` or `pixel`.
    #[arg(long)]
    pub fpd_extractor: Option<String>,
    #[arg(long)]
    pub ssim_scales: Option<usize>,
}

impl EvaluateArgs {
    pub fn overrides(&self) -> Result<Vec<Override>> {
        let mut o = Ov::new(&self.common)?;
        o.path("cache", &self.cache)
            .put("fid_extractor", self.fid_extractor.clone())
            .put("fpd_extractor", self.fpd_extractor.clone())
            .ssim_scales("ssim", self.ssim_scales)?;
        if !self.methods.is_empty() {
            let mut rows = Vec::new();
            for m in &self.methods {
                let (name, ckpt) = m.split_once('=').ok_or_else(|| {
                    paca_core::PacaError::Config(format!("--method expects NAME=CHECKPOINT, got {m:?}"))
                })?;
                rows.push(serde_json::json!({ "name": name, "checkpoint": ckpt }));
            }
            o.raw("methods", Value::Array(rows));
        }
        Ok(o.0)
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Comma-separated freezing rates (grid columns).
    #[arg(long, value_delimiter = ',')]
    pub rates: Option<Vec<f64>>,
    /// Comma-separated step counts (grid rows).
    #[arg(long, value_delimiter = ',')]
    pub steps: Option<Vec<usize>>,
    /// `element` or `tensor`.
    #[arg(long)]
    pub granularity: Option<String>,
    #[arg(long)]
    pub mask_seed: Option<u64>,
    #[command(flatten)]
    pub train: TrainFlags,
}

impl SweepArgs {
    pub fn overrides(&self) -> Result<Vec<Override>> {
        let mut o = Ov::new(&self.common)?;
        o.path("base", &self.base)
            .path("cache", &self.cache)
            .put("rates", self.rates.clone())
            .put("steps", self.steps.clone())
            .put("granularity", self.granularity.clone())
            .put("mask_seed", self.mask_seed);
        self.train.apply(&mut o)?;
        Ok(o.0)
    }
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// A run.json written by an earlier command.
    pub manifest: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
