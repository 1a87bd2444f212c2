use std::path::PathBuf;

use paca_core::evaluation::{
    evaluate_run, render_table, ConvFeatures, EvalRefs, FeatureExtractor, MetricReport, PixelFeatures,
};
use paca_core::losses::SsimConfig;
use paca_core::training::load_checkpoint;
use paca_core::{PacaError, Result};
use serde::{Deserialize, Serialize};

use super::infer::{slug, Generator};
use super::{begin, checkpoint_hash, create_dir, required, write_json};
use crate::cache::Cache;
use crate::config::output_dir;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extractor {
    Conv,
    Pixel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateCmd {
    pub cache: PathBuf,
    pub out: PathBuf,
    /// Table rows in order.
    pub methods: Vec<MethodSpec>,
    pub generator: Generator,
    /// Cache set fed through each generator.
    pub fused_set: String,
    pub fid_extractor: Extractor,
    pub fpd_extractor: Extractor,
    pub conv_seed: u64,
    pub pixel_grid: usize,
    pub ssim: SsimConfig,
    pub save_fused: bool,
}

impl Default for EvaluateCmd {
    fn default() -> Self {
        Self {
            cache: PathBuf::new(),
            out: PathBuf::new(),
            methods: Vec::new(),
            generator: Generator::GA,
            fused_set: "domain_a".into(),
            fid_extractor: Extractor::Conv,
            fpd_extractor: Extractor::Pixel,
            conv_seed: ConvFeatures::DEFAULT_SEED,
            pixel_grid: 4,
            ssim: SsimConfig::desk(),
            save_fused: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<MetricReport>,
    pub n_reference_a: usize,
    pub n_reference_b_prime: usize,
}

pub fn run(mut cmd: EvaluateCmd) -> Result<PathBuf> {
    cmd.out = output_dir(&cmd.out, "evaluate");
    required(&cmd.cache, "--cache")?;
    if cmd.methods.is_empty() {
        return Err(PacaError::Config("evaluate needs at least one --method NAME=CHECKPOINT".into()));
    }
    if cmd.pixel_grid == 0 {
        return Err(PacaError::Config("pixel_grid must be positive".into()));
    }
    let mut m = begin("evaluate", &cmd);
    let cache = Cache::load(&cmd.cache)?;
    m.input_hash(&cmd.cache, cache.index_sha256.clone());
    cmd.ssim.validate(cache.index.side)?;
    let states = cmd
        .methods
        .iter()
        .map(|spec| {
            let st = load_checkpoint(&spec.checkpoint)?;
            if st.arch.side() != cache.index.side {
                return Err(PacaError::Contract(format!(
                    "{} works on side {}, the cache holds side {}",
                    spec.checkpoint.display(),
                    st.arch.side(),
                    cache.index.side
                )));
            }
            m.input_hash(&spec.checkpoint, checkpoint_hash(&spec.checkpoint)?);
            Ok(st)
        })
        .collect::<Result<Vec<_>>>()?;

    let a = cache.images("domain_a")?;
    let b_prime = cache.images("domain_b_prime")?;
    let target = &cache.require_pair()?.b_prime;
    let inputs = cache.named(&cmd.fused_set)?;
    let conv = ConvFeatures::new(cmd.conv_seed);
    let pixel = PixelFeatures { grid: cmd.pixel_grid };
    let ex = |e: Extractor| -> &dyn FeatureExtractor {
        match e {
            Extractor::Conv => &conv,
            Extractor::Pixel => &pixel,
        }
    };
    let refs = EvalRefs {
        a: &a,
        b_prime: &b_prime,
        target,
        fid: ex(cmd.fid_extractor),
        fpd: ex(cmd.fpd_extractor),
        ssim: &cmd.ssim,
    };

    create_dir(&cmd.out)?;
    let images: Vec<_> = inputs.iter().map(|(_, i)| i.clone()).collect();
    let mut rows = Vec::new();
    for (spec, st) in cmd.methods.iter().zip(&states) {
        let (row, fused) = evaluate_run(&spec.name, cmd.generator.pick(st), &images, &refs)?;
        eprintln!("paca evaluate: {} FID_A {:.4} FID_B′ {:.4}", row.method, row.fid_a, row.fid_b_prime);
        if cmd.save_fused {
            let tag = slug(&spec.name);
            let dir = cmd.out.join("fused").join(&tag);
            create_dir(&dir)?;
            for ((stem, _), img) in inputs.iter().zip(&fused) {
                img.save_png(&dir.join(format!("{stem}__{tag}.png")))?;
            }
            m.output(dir);
        }
        rows.push(row);
    }
    let table = render_table(&rows);
    println!("{table}");
    let report = Report { rows, n_reference_a: a.len(), n_reference_b_prime: b_prime.len() };
    m.output(write_json(&cmd.out.join("report.json"), &report)?);
    let md = cmd.out.join("report.md");
    std::fs::write(&md, table).map_err(|e| PacaError::io(&md, e))?;
    m.output(md);
    m.finish(&cmd.out)
}
