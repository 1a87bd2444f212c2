use std::collections::BTreeMap;
use std::path::PathBuf;

use image::{Rgb, RgbImage};
use paca_core::data::{ImageTensor, Stage, UnpairedDataset};
use paca_core::freezing::{FreezeSpec, Granularity};
use paca_core::losses::{ms_ssim, rmse};
use paca_core::training::{load_checkpoint, run_epochs, transfer_state, RunIo, TrainConfig, TrainState};
use paca_core::{PacaError, Result};
use serde::{Deserialize, Serialize};

use super::train::transfer_defaults;
use super::{begin, checkpoint_hash, create_dir, remove_stale, required, write_json};
use crate::cache::Cache;
use crate::config::{output_dir, split_schedule};

pub const GUTTER: u32 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepCmd {
    pub base: PathBuf,
    pub cache: PathBuf,
    pub out: PathBuf,
    /// Grid columns.
    pub rates: Vec<f64>,
    /// Grid rows: snapshots taken after this many transfer steps.
    pub steps: Vec<usize>,
    pub granularity: Granularity,
    pub mask_seed: u64,
    /// Masks come from `rates`; `train.freeze` must stay unset. Zero epochs
    /// mean an even flat/decay split over the largest step count.
    pub train: TrainConfig,
}

impl Default for SweepCmd {
    fn default() -> Self {
        Self {
            base: PathBuf::new(),
            cache: PathBuf::new(),
            out: PathBuf::new(),
            rates: vec![0.1, 0.2, 0.5, 0.8, 0.9],
            steps: vec![10, 20, 60, 120, 200],
            granularity: Granularity::Element,
            mask_seed: 0,
            train: TrainConfig { freeze: None, epochs_flat: 0, epochs_decay: 0, ..transfer_defaults() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
    pub rate: f64,
    pub steps: usize,
    /// Top-left pixel of the cell in grid.png.
    pub x: u32,
    pub y: u32,
    pub file: PathBuf,
    pub ms_ssim_b_prime: f64,
    pub rmse_a: f64,
    pub mask_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepIndex {
    pub rates: Vec<f64>,
    pub steps: Vec<usize>,
    pub granularity: Granularity,
    pub side: usize,
    pub gutter: u32,
    pub cells: Vec<Cell>,
}

impl SweepIndex {
    pub fn cell(&self, rate: f64, steps: usize) -> Option<&Cell> {
        self.cells.iter().find(|c| c.rate == rate && c.steps == steps)
    }
}

fn validate(cmd: &mut SweepCmd) -> Result<()> {
    if cmd.rates.is_empty() || cmd.steps.is_empty() {
        return Err(PacaError::Config("sweep needs at least one rate and one step count".into()));
    }
    if let Some(r) = cmd.rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(PacaError::Config(format!("freezing rate must be in [0, 1], got {r}")));
    }
    let mut seen = std::collections::BTreeSet::new();
    if cmd.steps.iter().any(|&s| s == 0 || !seen.insert(s)) {
        return Err(PacaError::Config("step counts must be positive and distinct".into()));
    }
    if cmd.train.freeze.is_some() {
        return Err(PacaError::Config("sweep builds masks from rates; leave train.freeze unset".into()));
    }
    if cmd.train.stage != Stage::Transfer {
        return Err(PacaError::Config("sweep needs train.stage = transfer".into()));
    }
    let max = *cmd.steps.iter().max().expect("non-empty");
    if cmd.train.total_epochs() == 0 {
        (cmd.train.epochs_flat, cmd.train.epochs_decay) = split_schedule(max);
    } else if cmd.train.total_epochs() < max {
        return Err(PacaError::Config(format!("schedule of {} steps is shorter than {max}", cmd.train.total_epochs())));
    }
    cmd.train.validate()
}

fn paste(grid: &mut RgbImage, img: &ImageTensor, x: u32, y: u32) {
    let rgb = img.to_rgb8();
    for (px, py, p) in rgb.enumerate_pixels() {
        grid.put_pixel(x + px, y + py, *p);
    }
}

pub fn run(mut cmd: SweepCmd) -> Result<PathBuf> {
    cmd.out = output_dir(&cmd.out, "sweep");
    required(&cmd.base, "--base")?;
    required(&cmd.cache, "--cache")?;
    validate(&mut cmd)?;
    let mut m = begin("sweep", &cmd);

    let base = load_checkpoint(&cmd.base)?;
    m.input_hash(&cmd.base, checkpoint_hash(&cmd.base)?);
    cmd.train.ssim.validate(base.arch.side())?;
    let cache = Cache::load(&cmd.cache)?;
    m.input_hash(&cmd.cache, cache.index_sha256.clone());
    let pair = cache.require_pair()?;
    if pair.a.side() != base.arch.side() {
        return Err(PacaError::Contract(format!(
            "pair side {} differs from checkpoint side {}",
            pair.a.side(),
            base.arch.side()
        )));
    }
    let ds = UnpairedDataset::one_shot(pair.clone())?;
    let max = *cmd.steps.iter().max().expect("non-empty");
    let side = base.arch.side() as u32;
    create_dir(&cmd.out.join("cells"))?;
    create_dir(&cmd.out.join("logs"))?;

    let (rows, cols) = (cmd.steps.len() as u32, cmd.rates.len() as u32);
    let pitch = side + GUTTER;
    let mut grid = RgbImage::from_pixel(cols * pitch - GUTTER, rows * pitch - GUTTER, Rgb([255, 255, 255]));
    let mut cells = Vec::new();
    for (col, &rate) in cmd.rates.iter().enumerate() {
        let cfg = TrainConfig {
            freeze: Some(FreezeSpec::Random { rate, seed: cmd.mask_seed, granularity: cmd.granularity }),
            ..cmd.train.clone()
        };
        let log = cmd.out.join("logs").join(format!("rate-{col:02}.jsonl"));
        remove_stale(&log)?;
        let io = RunIo { log: Some(log), checkpoint_dir: None };
        let mut snaps: BTreeMap<usize, (ImageTensor, String)> = BTreeMap::new();
        let wanted = &cmd.steps;
        let mut observe = |st: &TrainState| {
            let n = st.epoch as usize;
            if wanted.contains(&n) {
                let hash = st.freeze.as_ref().map(|f| f.content_hash()).unwrap_or_default();
                snaps.insert(n, (st.g_a.forward(&pair.a)?, hash));
            }
            Ok(())
        };
        let mut st = transfer_state(&base, base.arch, &cfg)?;
        run_epochs(&mut st, &ds, max, &io, &mut observe)?;
        for (row, &steps) in cmd.steps.iter().enumerate() {
            let (img, mask_hash) = snaps.remove(&steps).expect("every step count is observed");
            let file = PathBuf::from("cells").join(format!("r{row:02}_c{col:02}.png"));
            img.save_png(&cmd.out.join(&file))?;
            let (x, y) = (col as u32 * pitch, row as u32 * pitch);
            paste(&mut grid, &img, x, y);
            let cell = Cell {
                row,
                col,
                rate,
                steps,
                x,
                y,
                file,
                ms_ssim_b_prime: ms_ssim(&img, &pair.b_prime, &cmd.train.ssim)?,
                rmse_a: rmse(&img, &pair.a)?,
                mask_hash,
            };
            eprintln!(
                "paca sweep: rate {rate} steps {steps}: MS-SSIM vs b′ {:.4}, RMSE vs a {:.4}",
                cell.ms_ssim_b_prime, cell.rmse_a
            );
            cells.push(cell);
        }
    }
    let grid_path = cmd.out.join("grid.png");
    grid.save(&grid_path).map_err(|e| PacaError::MalformedInput { path: grid_path.clone(), reason: e.to_string() })?;
    m.output(grid_path);
    let index = SweepIndex {
        rates: cmd.rates.clone(),
        steps: cmd.steps.clone(),
        granularity: cmd.granularity,
        side: side as usize,
        gutter: GUTTER,
        cells,
    };
    m.output(write_json(&cmd.out.join("index.json"), &index)?);
    m.output(cmd.out.join("cells"));
    m.finish(&cmd.out)
}
