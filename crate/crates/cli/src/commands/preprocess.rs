use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use paca_core::blob::sha256_hex;
use paca_core::data::{list_images, preprocess_file, write_cached, CacheEntry, ImageTensor, PreprocessConfig};
use paca_core::{PacaError, Result};
use serde::{Deserialize, Serialize};

use super::{begin, create_dir};
use crate::cache::{CacheIndex, IndexEntry, INDEX_FILE};
use crate::config::output_dir;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputPaths {
    pub domain_a: PathBuf,
    pub domain_b: PathBuf,
    /// Optional: only evaluation needs it.
    pub domain_b_prime: PathBuf,
    pub pair_a: PathBuf,
    pub pair_b_prime: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessCmd {
    pub inputs: InputPaths,
    pub out: PathBuf,
    /// `polarize` applies to domain A and the pair's source image only.
    pub image: PreprocessConfig,
}

impl Default for PreprocessCmd {
    fn default() -> Self {
        Self {
            inputs: InputPaths::default(),
            out: PathBuf::new(),
            image: PreprocessConfig { polarize: true, ..Default::default() },
        }
    }
}

struct Job {
    set: String,
    sources: Vec<PathBuf>,
    cfg: PreprocessConfig,
}

fn given(p: &Path) -> bool {
    !p.as_os_str().is_empty()
}

fn jobs(cmd: &PreprocessCmd) -> Result<Vec<Job>> {
    let a_cfg = cmd.image.clone();
    let b_cfg = PreprocessConfig { polarize: false, ..cmd.image.clone() };
    let mut out = Vec::new();
    for (set, dir, cfg, needed) in [
        ("domain_a", &cmd.inputs.domain_a, &a_cfg, true),
        ("domain_b", &cmd.inputs.domain_b, &b_cfg, true),
        ("domain_b_prime", &cmd.inputs.domain_b_prime, &b_cfg, false),
    ] {
        if !given(dir) {
            if needed {
                return Err(PacaError::Config(format!("missing required inputs.{set}")));
            }
            continue;
        }
        let sources = list_images(dir)?;
        if sources.is_empty() {
            return Err(PacaError::Dataset(format!("no images in {}", dir.display())));
        }
        out.push(Job { set: set.into(), sources, cfg: cfg.clone() });
    }
    match (given(&cmd.inputs.pair_a), given(&cmd.inputs.pair_b_prime)) {
        (true, true) => {
            out.push(Job { set: "pair/a".into(), sources: vec![cmd.inputs.pair_a.clone()], cfg: a_cfg });
            out.push(Job { set: "pair/b_prime".into(), sources: vec![cmd.inputs.pair_b_prime.clone()], cfg: b_cfg });
        }
        (false, false) => {}
        _ => return Err(PacaError::Config("inputs.pair_a and inputs.pair_b_prime go together".into())),
    }
    Ok(out)
}

fn blob_name(set: &str, source: &Path) -> PathBuf {
    let file = source.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    match set {
        "pair/a" => PathBuf::from("pair/a.f32"),
        "pair/b_prime" => PathBuf::from("pair/b_prime.f32"),
        _ => PathBuf::from(set).join(format!("{file}.f32")),
    }
}

fn up_to_date(out: &Path, index: &CacheIndex) -> bool {
    let Ok(existing) = paca_core::blob::read_json::<CacheIndex>(&out.join(INDEX_FILE)) else { return false };
    existing == *index && index.sets.values().flatten().all(|e| out.join(&e.file).is_file())
}

pub fn run(mut cmd: PreprocessCmd) -> Result<PathBuf> {
    cmd.out = output_dir(&cmd.out, "preprocess");
    cmd.image.validate()?;
    let jobs = jobs(&cmd)?;
    let mut m = begin("preprocess", &cmd);

    let mut index = CacheIndex { side: cmd.image.side, config_hashes: BTreeMap::new(), sets: BTreeMap::new() };
    let mut hashes = Vec::new();
    for job in &jobs {
        index.config_hashes.insert(job.set.clone(), job.cfg.hash());
        let mut entries = Vec::new();
        for src in &job.sources {
            let bytes = std::fs::read(src).map_err(|e| PacaError::io(src, e))?;
            let sha = sha256_hex(&bytes);
            m.input_hash(src, sha.clone());
            hashes.push(sha.clone());
            entries.push(IndexEntry { file: blob_name(&job.set, src), source: src.clone(), source_sha256: sha });
        }
        index.sets.insert(job.set.clone(), entries);
    }
    if up_to_date(&cmd.out, &index) {
        eprintln!("paca preprocess: cache {} is up to date", cmd.out.display());
        return Ok(cmd.out.join(crate::manifest::RUN_FILE));
    }

    let mut decoded: Vec<(PathBuf, ImageTensor, CacheEntry)> = Vec::new();
    let mut bad = Vec::new();
    for job in &jobs {
        for (src, e) in job.sources.iter().zip(&index.sets[&job.set]) {
            match preprocess_file(src, &job.cfg) {
                Ok(img) => decoded.push((
                    e.file.clone(),
                    img,
                    CacheEntry {
                        side: job.cfg.side,
                        channels: paca_core::data::CHANNELS,
                        source: src.clone(),
                        source_sha256: e.source_sha256.clone(),
                        config_hash: job.cfg.hash(),
                    },
                )),
                Err(err @ PacaError::MalformedInput { .. }) => bad.push(err),
                Err(err) => return Err(err),
            }
        }
    }
    if let Some(first) = bad.first() {
        eprintln!("paca preprocess: {} undecodable file(s):", bad.len());
        for e in &bad {
            eprintln!("  {e}");
        }
        return Err(PacaError::MalformedInput {
            path: match first {
                PacaError::MalformedInput { path, .. } => path.clone(),
                _ => unreachable!(),
            },
            reason: format!("{} undecodable input file(s); no cache written", bad.len()),
        });
    }

    // the index goes last so an interrupted run never looks complete
    crate::commands::remove_stale(&cmd.out.join(INDEX_FILE))?;
    for (file, img, entry) in &decoded {
        let path = cmd.out.join(file);
        create_dir(path.parent().expect("blob has a parent"))?;
        write_cached(&path, img, entry)?;
    }
    let index_path = cmd.out.join(INDEX_FILE);
    paca_core::blob::write_json(&index_path, &index)?;
    m.output(&index_path);
    eprintln!("paca preprocess: cached {} image(s) in {}", decoded.len(), cmd.out.display());
    m.finish(&cmd.out)
}
