//! Checkpoint directories: `manifest.json` plus one raw little-endian `f32`
//! blob per network, optimizer moment, image pool and freeze mask.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, ImagePool, TrainConfig, TrainState};
use crate::blob::{f32_to_le_bytes, le_bytes_to_f32, read_json, sha256_hex, write_json};
use crate::data::{ImageTensor, Stage, CHANNELS};
use crate::error::{PacaError, Result};
use crate::freezing::{apply_mask, FreezeMask, Frozen, Granularity, MaskEntry, MaskSummary, NetMask};
use crate::networks::{CycleGanArch, GeneratorNet, NetworkParams};

pub const CHECKPOINT_FORMAT: &str = "paca-checkpoint/1";
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub file: String,
    pub len: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub stage: Stage,
    pub arch: CycleGanArch,
    pub config: TrainConfig,
    pub epoch: u64,
    pub step: u64,
    pub adam_steps: BTreeMap<String, u64>,
    pub rng_pool_a: ChaCha8Rng,
    pub rng_pool_b: ChaCha8Rng,
    pub freeze: Option<MaskSummary>,
    pub layouts: BTreeMap<String, Vec<ParamLayout>>,
    pub blobs: Vec<BlobEntry>,
}

impl Manifest {
    pub fn blob(&self, name: &str) -> Result<&BlobEntry> {
        self.blobs.iter().find(|b| b.name == name).ok_or_else(|| PacaError::integrity(name, "missing from manifest"))
    }
}

fn flatten(params: &NetworkParams<f32>) -> Vec<f32> {
    params.iter().flat_map(|p| p.tensor.data().iter().copied()).collect()
}

fn layout(params: &NetworkParams<f32>) -> Vec<ParamLayout> {
    params.iter().map(|p| ParamLayout { name: p.name.clone(), shape: p.tensor.shape().to_vec() }).collect()
}

fn pool_values(pool: &ImagePool) -> Vec<f32> {
    pool.images.iter().flat_map(|i| i.data().iter().copied()).collect()
}

fn mask_values(mask: &FreezeMask) -> Vec<f32> {
    mask.to_bytes().into_iter().map(f32::from).collect()
}

fn blobs_of(state: &TrainState) -> Vec<(String, Vec<f32>)> {
    let mut out = vec![
        ("g_a".to_string(), flatten(&state.g_a.params)),
        ("g_b".to_string(), flatten(&state.g_b.params)),
        ("d_a".to_string(), flatten(&state.d_a.params)),
        ("d_b".to_string(), flatten(&state.d_b.params)),
    ];
    for (name, opt) in [("opt_g", &state.opt_g), ("opt_d_a", &state.opt_d_a), ("opt_d_b", &state.opt_d_b)] {
        out.push((format!("{name}.m"), opt.m.concat()));
        out.push((format!("{name}.v"), opt.v.concat()));
    }
    out.push(("pool_a".to_string(), pool_values(&state.pool_a)));
    out.push(("pool_b".to_string(), pool_values(&state.pool_b)));
    if let Some(mask) = &state.freeze {
        out.push(("freeze_mask".to_string(), mask_values(mask)));
    }
    out
}

/// Writes `state` to `dir` atomically (temporary sibling, then rename).
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<PathBuf> {
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| PacaError::io(parent, e))?;
    let base = dir.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint").to_string();
    let tmp = parent.join(format!(".{base}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| PacaError::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| PacaError::io(&tmp, e))?;

    let mut entries = Vec::new();
    for (name, values) in blobs_of(state) {
        let file = format!("{name}.f32");
        let bytes = f32_to_le_bytes(&values);
        let path = tmp.join(&file);
        fs::write(&path, &bytes).map_err(|e| PacaError::io(&path, e))?;
        entries.push(BlobEntry { name, file, len: values.len(), sha256: sha256_hex(&bytes) });
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.to_string(),
        stage: state.stage,
        arch: state.arch,
        config: state.config.clone(),
        epoch: state.epoch,
        step: state.step,
        adam_steps: BTreeMap::from([
            ("opt_g".to_string(), state.opt_g.t),
            ("opt_d_a".to_string(), state.opt_d_a.t),
            ("opt_d_b".to_string(), state.opt_d_b.t),
        ]),
        rng_pool_a: state.rng_pool_a.clone(),
        rng_pool_b: state.rng_pool_b.clone(),
        freeze: state.freeze.as_ref().map(FreezeMask::summary),
        layouts: BTreeMap::from([
            ("g_a".to_string(), layout(&state.g_a.params)),
            ("g_b".to_string(), layout(&state.g_b.params)),
            ("d_a".to_string(), layout(&state.d_a.params)),
            ("d_b".to_string(), layout(&state.d_b.params)),
        ]),
        blobs: entries,
    };
    write_json(&tmp.join(MANIFEST), &manifest)?;

    let old = parent.join(format!(".{base}.old-{}", std::process::id()));
    if dir.exists() {
        fs::rename(dir, &old).map_err(|e| PacaError::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| PacaError::io(dir, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| PacaError::io(&old, e))?;
    }
    Ok(dir.to_path_buf())
}

fn read_blob(dir: &Path, entry: &BlobEntry) -> Result<Vec<f32>> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => PacaError::integrity(&entry.name, format!("blob file {} missing", entry.file)),
        _ => PacaError::io(&path, e),
    })?;
    if bytes.len() != entry.len * 4 {
        return Err(PacaError::integrity(
            &entry.name,
            format!("expected {} bytes, found {}", entry.len * 4, bytes.len()),
        ));
    }
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(PacaError::integrity(&entry.name, "content hash mismatch"));
    }
    Ok(le_bytes_to_f32(&bytes))
}

fn fill_params(params: &mut NetworkParams<f32>, expected: &[ParamLayout], values: &[f32], name: &str) -> Result<()> {
    if expected.len() != params.len() {
        return Err(PacaError::Contract(format!("{name}: checkpoint layout does not match architecture")));
    }
    let mut offset = 0;
    for (p, l) in params.iter_mut().zip(expected) {
        if p.name != l.name || p.tensor.shape() != l.shape.as_slice() {
            return Err(PacaError::Contract(format!("{name}: parameter {} does not match {}", l.name, p.name)));
        }
        let n = p.tensor.len();
        let chunk =
            values.get(offset..offset + n).ok_or_else(|| PacaError::integrity(name, "blob shorter than layout"))?;
        p.tensor.data_mut().copy_from_slice(chunk);
        offset += n;
    }
    if offset != values.len() {
        return Err(PacaError::integrity(name, "blob longer than layout"));
    }
    Ok(())
}

fn fill_adam(opt: &mut Adam, m: &[f32], v: &[f32], name: &str) -> Result<()> {
    let total: usize = opt.m.iter().map(Vec::len).sum();
    if m.len() != total || v.len() != total {
        return Err(PacaError::integrity(name, "optimizer moments do not match parameters"));
    }
    let mut offset = 0;
    for (dm, dv) in opt.m.iter_mut().zip(opt.v.iter_mut()) {
        let n = dm.len();
        dm.copy_from_slice(&m[offset..offset + n]);
        dv.copy_from_slice(&v[offset..offset + n]);
        offset += n;
    }
    Ok(())
}

fn read_pool(values: Vec<f32>, capacity: usize, side: usize, name: &str) -> Result<ImagePool> {
    let per = CHANNELS * side * side;
    if !values.len().is_multiple_of(per) || values.len() / per > capacity {
        return Err(PacaError::integrity(name, "pool blob does not hold whole images within capacity"));
    }
    let images = values
        .chunks_exact(per)
        .map(|c| ImageTensor::new(side, c.to_vec()))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| PacaError::integrity(name, e.to_string()))?;
    Ok(ImagePool { capacity, images })
}

fn rebuild_mask(summary: &MaskSummary, g_a: &GeneratorNet, g_b: &GeneratorNet, values: &[f32]) -> Result<FreezeMask> {
    let mut offset = 0;
    let mut net = |name: &str, g: &GeneratorNet| -> Result<NetMask> {
        let mut entries = Vec::new();
        for p in g.params.iter() {
            let len = p.tensor.len();
            let chunk = values
                .get(offset..offset + len)
                .ok_or_else(|| PacaError::integrity("freeze_mask", "mask shorter than generators"))?;
            offset += len;
            let frozen = match summary.granularity {
                Granularity::Tensor => Frozen::Tensor(chunk.first().is_some_and(|&v| v != 0.0)),
                Granularity::Element => Frozen::Elements(chunk.iter().map(|&v| v != 0.0).collect()),
            };
            entries.push(MaskEntry { name: p.name.clone(), len, frozen });
        }
        Ok(NetMask { network: name.to_string(), entries })
    };
    let ma = net("g_a", g_a)?;
    let mb = net("g_b", g_b)?;
    let mask = FreezeMask {
        seed: summary.seed,
        rate: summary.rate,
        granularity: summary.granularity,
        block: summary.block,
        g_a: ma,
        g_b: mb,
    };
    if offset != values.len() || mask.content_hash() != summary.content_sha256 {
        return Err(PacaError::integrity("freeze_mask", "mask content does not match its summary"));
    }
    Ok(mask)
}

/// Reads a checkpoint directory, verifying every blob against the manifest.
pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let mpath = dir.join(MANIFEST);
    if !mpath.exists() {
        return Err(PacaError::io(
            &mpath,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no checkpoint manifest here"),
        ));
    }
    let m: Manifest = read_json(&mpath).map_err(|e| match e {
        PacaError::Integrity { reason, .. } => PacaError::integrity(MANIFEST, reason),
        other => other,
    })?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(PacaError::integrity(MANIFEST, format!("unknown format {}", m.format)));
    }
    let mut state = TrainState::init(m.arch, m.config.clone())?;
    state.stage = m.stage;
    state.epoch = m.epoch;
    state.step = m.step;
    state.rng_pool_a = m.rng_pool_a.clone();
    state.rng_pool_b = m.rng_pool_b.clone();
    let lay = |n: &str| m.layouts.get(n).ok_or_else(|| PacaError::integrity(n, "layout missing from manifest"));
    fill_params(&mut state.g_a.params, lay("g_a")?, &read_blob(dir, m.blob("g_a")?)?, "g_a")?;
    fill_params(&mut state.g_b.params, lay("g_b")?, &read_blob(dir, m.blob("g_b")?)?, "g_b")?;
    fill_params(&mut state.d_a.params, lay("d_a")?, &read_blob(dir, m.blob("d_a")?)?, "d_a")?;
    fill_params(&mut state.d_b.params, lay("d_b")?, &read_blob(dir, m.blob("d_b")?)?, "d_b")?;
    for (name, opt) in [("opt_g", &mut state.opt_g), ("opt_d_a", &mut state.opt_d_a), ("opt_d_b", &mut state.opt_d_b)] {
        let mv = read_blob(dir, m.blob(&format!("{name}.m"))?)?;
        let vv = read_blob(dir, m.blob(&format!("{name}.v"))?)?;
        fill_adam(opt, &mv, &vv, name)?;
        opt.t = *m.adam_steps.get(name).ok_or_else(|| PacaError::integrity(name, "step count missing"))?;
    }
    let side = m.arch.side();
    state.pool_a = read_pool(read_blob(dir, m.blob("pool_a")?)?, m.config.pool_size, side, "pool_a")?;
    state.pool_b = read_pool(read_blob(dir, m.blob("pool_b")?)?, m.config.pool_size, side, "pool_b")?;
    if let Some(summary) = &m.freeze {
        let values = read_blob(dir, m.blob("freeze_mask")?)?;
        let mask = rebuild_mask(summary, &state.g_a, &state.g_b, &values)?;
        state.g_a.params = apply_mask(&state.g_a.params, &mask.g_a)?;
        state.g_b.params = apply_mask(&state.g_b.params, &mask.g_b)?;
        state.freeze = Some(mask);
    }
    Ok(state)
}

/// Reads only the manifest.
pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    read_json(&dir.join(MANIFEST))
}
