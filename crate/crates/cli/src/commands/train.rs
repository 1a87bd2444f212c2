use std::path::{Path, PathBuf};
use std::time::Instant;

use paca_core::data::{Stage, UnpairedDataset};
use paca_core::freezing::{FreezeSpec, Granularity};
use paca_core::losses::{ms_ssim, rmse};
use paca_core::networks::CycleGanArch;
use paca_core::training::{
    load_checkpoint, run_epochs, save_checkpoint, transfer, EpochStats, LossLog, RunIo, TrainConfig, TrainState,
};
use paca_core::{PacaError, Result};
use serde::{Deserialize, Serialize};

use super::{begin, checkpoint_hash, create_dir, remove_stale, required, write_json};
use crate::cache::Cache;
use crate::config::output_dir;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOG_FILE: &str = "log.jsonl";
pub const EPOCHS_FILE: &str = "epochs.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Full,
    Tiny,
}

impl Preset {
    pub fn arch(self) -> CycleGanArch {
        match self {
            Preset::Desk => CycleGanArch::desk(),
            Preset::Full => CycleGanArch::full(),
            Preset::Tiny => CycleGanArch::tiny(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainCmd {
    pub cache: PathBuf,
    pub out: PathBuf,
    pub preset: Preset,
    /// Replaces the preset when set.
    pub arch: Option<CycleGanArch>,
    pub split_fraction: f64,
    pub split_seed: u64,
    pub resume: PathBuf,
    pub train: TrainConfig,
}

impl Default for PretrainCmd {
    fn default() -> Self {
        Self {
            cache: PathBuf::new(),
            out: PathBuf::new(),
            preset: Preset::Desk,
            arch: None,
            split_fraction: 1.0,
            split_seed: 0,
            resume: PathBuf::new(),
            train: TrainConfig::default(),
        }
    }
}

/// Transfer-stage defaults: 200 steps on the pair, 90% of generator entries
/// frozen, regularization on.
pub fn transfer_defaults() -> TrainConfig {
    TrainConfig {
        stage: Stage::Transfer,
        freeze: Some(FreezeSpec::Random { rate: 0.9, seed: 0, granularity: Granularity::Element }),
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferCmd {
    pub base: PathBuf,
    pub cache: PathBuf,
    pub out: PathBuf,
    pub train: TrainConfig,
}

impl Default for TransferCmd {
    fn default() -> Self {
        Self { base: PathBuf::new(), cache: PathBuf::new(), out: PathBuf::new(), train: transfer_defaults() }
    }
}

fn progress(label: &'static str, total: usize) -> impl FnMut(&TrainState) -> Result<()> {
    let t0 = Instant::now();
    move |st: &TrainState| {
        eprintln!("paca {label}: epoch {}/{total} step {} ({:.1}s)", st.epoch, st.step, t0.elapsed().as_secs_f64());
        Ok(())
    }
}

/// Keeps log lines and epoch stats from before `epoch`, so a resumed run
/// rewrites exactly what the interrupted one would have.
fn truncate_history(out: &Path, epoch: u64) -> Result<Vec<EpochStats>> {
    let log = out.join(LOG_FILE);
    let kept = if log.is_file() { LossLog::read_all(&log)? } else { Vec::new() };
    remove_stale(&log)?;
    let mut w = LossLog::open(&log)?;
    for r in kept.iter().filter(|r| r.epoch < epoch) {
        w.write(r)?;
    }
    w.flush()?;
    let path = out.join(EPOCHS_FILE);
    let stats: Vec<EpochStats> = if path.is_file() { paca_core::blob::read_json(&path)? } else { Vec::new() };
    Ok(stats.into_iter().filter(|s| s.epoch < epoch).collect())
}

pub fn run_pretrain(mut cmd: PretrainCmd) -> Result<PathBuf> {
    cmd.out = output_dir(&cmd.out, "pretrain");
    required(&cmd.cache, "--cache")?;
    let arch = cmd.arch.unwrap_or(cmd.preset.arch());
    arch.validate()?;
    if cmd.train.stage != Stage::Pretrain {
        return Err(PacaError::Config("pretrain needs train.stage = pretrain".into()));
    }
    cmd.train.validate()?;
    cmd.train.ssim.validate(arch.side())?;
    let mut m = begin("pretrain", &cmd);

    let cache = Cache::load(&cmd.cache)?;
    m.input_hash(&cmd.cache, cache.index_sha256.clone());
    if cache.index.side != arch.side() {
        return Err(PacaError::Contract(format!(
            "cache side {} differs from architecture side {}",
            cache.index.side,
            arch.side()
        )));
    }
    let ds = UnpairedDataset::new(
        cache.images("domain_a")?,
        cache.images("domain_b")?,
        cache.pair.clone(),
        cmd.split_fraction,
        cmd.split_seed,
    )?;
    create_dir(&cmd.out)?;

    let (mut state, mut history) = if cmd.resume.as_os_str().is_empty() {
        remove_stale(&cmd.out.join(LOG_FILE))?;
        (TrainState::init(arch, cmd.train.clone())?, Vec::new())
    } else {
        let st = load_checkpoint(&cmd.resume)?;
        m.input_hash(&cmd.resume, checkpoint_hash(&cmd.resume)?);
        if st.stage != Stage::Pretrain || st.arch != arch || st.config != cmd.train {
            return Err(PacaError::Config(format!(
                "{} was written by a different pre-training configuration",
                cmd.resume.display()
            )));
        }
        let kept = truncate_history(&cmd.out, st.epoch)?;
        (st, kept)
    };
    let io = RunIo { log: Some(cmd.out.join(LOG_FILE)), checkpoint_dir: Some(cmd.out.join("checkpoints")) };
    let total = cmd.train.total_epochs();
    history.extend(run_epochs(&mut state, &ds, total, &io, &mut progress("pretrain", total))?);

    let ckpt = save_checkpoint(&state, &cmd.out.join(CHECKPOINT_DIR))?;
    m.output(ckpt);
    m.output(write_json(&cmd.out.join(EPOCHS_FILE), &history)?);
    m.output(cmd.out.join(LOG_FILE));
    m.finish(&cmd.out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferSummary {
    pub steps: u64,
    pub frozen_fraction: f64,
    pub mask_hash: String,
    /// MS-SSIM of G_A(a) against b′ before and after transfer.
    pub base_ms_ssim_b_prime: f64,
    pub ms_ssim_b_prime: f64,
    /// RMSE of G_A(a) against the source glyph a.
    pub rmse_a: f64,
}

pub fn run_transfer(mut cmd: TransferCmd) -> Result<PathBuf> {
    cmd.out = output_dir(&cmd.out, "transfer");
    required(&cmd.base, "--base")?;
    required(&cmd.cache, "--cache")?;
    if cmd.train.stage != Stage::Transfer {
        return Err(PacaError::Config("transfer needs train.stage = transfer".into()));
    }
    cmd.train.validate()?;
    let mut m = begin("transfer", &cmd);

    let base = load_checkpoint(&cmd.base)?;
    m.input_hash(&cmd.base, checkpoint_hash(&cmd.base)?);
    cmd.train.ssim.validate(base.arch.side())?;
    let cache = Cache::load(&cmd.cache)?;
    m.input_hash(&cmd.cache, cache.index_sha256.clone());
    let pair = cache.require_pair()?;
    create_dir(&cmd.out)?;
    remove_stale(&cmd.out.join(LOG_FILE))?;

    let io = RunIo { log: Some(cmd.out.join(LOG_FILE)), checkpoint_dir: Some(cmd.out.join("checkpoints")) };
    let total = cmd.train.total_epochs();
    let (st, stats) = transfer(&base, pair, base.arch, &cmd.train, &io, &mut progress("transfer", total))?;

    let before = base.g_a.forward(&pair.a)?;
    let fused = st.g_a.forward(&pair.a)?;
    let mask = st.freeze.as_ref().expect("transfer state carries its mask");
    let summary = TransferSummary {
        steps: st.step,
        frozen_fraction: mask.frozen_fraction(),
        mask_hash: mask.content_hash(),
        base_ms_ssim_b_prime: ms_ssim(&before, &pair.b_prime, &cmd.train.ssim)?,
        ms_ssim_b_prime: ms_ssim(&fused, &pair.b_prime, &cmd.train.ssim)?,
        rmse_a: rmse(&fused, &pair.a)?,
    };
    eprintln!("paca transfer: MS-SSIM vs b′ {:.4} -> {:.4}", summary.base_ms_ssim_b_prime, summary.ms_ssim_b_prime);
    let probe = cmd.out.join("fused_pair.png");
    fused.save_png(&probe)?;
    m.output(probe);
    m.output(save_checkpoint(&st, &cmd.out.join(CHECKPOINT_DIR))?);
    m.output(write_json(&cmd.out.join(EPOCHS_FILE), &stats)?);
    m.output(write_json(&cmd.out.join("summary.json"), &summary)?);
    m.output(cmd.out.join(LOG_FILE));
    m.finish(&cmd.out)
}
