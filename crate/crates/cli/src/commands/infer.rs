use std::path::{Path, PathBuf};

use paca_core::blob::sha256_hex;
use paca_core::data::{list_images, preprocess_file, read_cached, ImageTensor, PreprocessConfig};
use paca_core::networks::GeneratorNet;
use paca_core::training::{load_checkpoint, TrainState};
use paca_core::{PacaError, Result};
use serde::{Deserialize, Serialize};

use super::{begin, checkpoint_hash, create_dir, required};
use crate::cache::{Cache, INDEX_FILE};
use crate::config::output_dir;
use crate::manifest::RunManifest;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// A to B: the fusing direction.
    #[default]
    GA,
    GB,
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Generator::GA => "g_a",
            Generator::GB => "g_b",
        }
    }

    pub fn pick(self, st: &TrainState) -> &GeneratorNet {
        match self {
            Generator::GA => &st.g_a,
            Generator::GB => &st.g_b,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferCmd {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    /// Set to read when `input` is a cache root.
    pub input_set: String,
    pub generator: Generator,
    /// Output names are `<stem>__<tag>.png`; empty means the generator name.
    pub tag: String,
    pub out: PathBuf,
    /// Used for raw image inputs; the side always follows the checkpoint.
    pub image: PreprocessConfig,
}

impl Default for InferCmd {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::new(),
            input: PathBuf::new(),
            input_set: "domain_a".into(),
            generator: Generator::GA,
            tag: String::new(),
            out: PathBuf::new(),
            image: PreprocessConfig::default(),
        }
    }
}

/// File-name safe version of a label: ASCII letters, digits, `-` and `_`.
pub fn slug(label: &str) -> String {
    let mut s = String::new();
    for c in label.chars() {
        let mapped = match c {
            'a'..='z' | '0'..='9' | '-' | '_' => Some(c),
            'A'..='Z' => Some(c.to_ascii_lowercase()),
            'à' | 'á' | 'â' | 'ä' => Some('a'),
            'è' | 'é' | 'ê' | 'ë' => Some('e'),
            'ì' | 'í' | 'î' | 'ï' => Some('i'),
            'ò' | 'ó' | 'ô' | 'ö' => Some('o'),
            'ù' | 'ú' | 'û' | 'ü' => Some('u'),
            _ => None,
        };
        match mapped {
            Some(c) => s.push(c),
            None if !s.is_empty() && !s.ends_with('-') => s.push('-'),
            None => {}
        }
    }
    let s = s.trim_end_matches('-').to_string();
    if s.is_empty() {
        "x".into()
    } else {
        s
    }
}

/// Named inputs from a cache root, a cached set directory, or raw images.
pub fn load_inputs(
    input: &Path,
    set: &str,
    image: &PreprocessConfig,
    m: &mut RunManifest,
) -> Result<Vec<(String, ImageTensor)>> {
    if input.join(INDEX_FILE).is_file() {
        let cache = Cache::load(input)?;
        m.input_hash(input, cache.index_sha256.clone());
        return Ok(cache.named(set)?.to_vec());
    }
    let entries = std::fs::read_dir(input).map_err(|e| PacaError::io(input, e))?;
    let mut blobs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "f32"))
        .collect();
    blobs.sort();
    let mut out = Vec::new();
    if !blobs.is_empty() {
        for b in blobs {
            let (img, entry) = read_cached(&b)?;
            m.input_hash(&b, entry.source_sha256.clone());
            let stem = entry.source.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            out.push((stem, img));
        }
    } else {
        for p in list_images(input)? {
            let bytes = std::fs::read(&p).map_err(|e| PacaError::io(&p, e))?;
            m.input_hash(&p, sha256_hex(&bytes));
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            out.push((stem, preprocess_file(&p, image)?));
        }
    }
    if out.is_empty() {
        return Err(PacaError::Dataset(format!("no images in {}", input.display())));
    }
    Ok(out)
}

pub fn run(mut cmd: InferCmd) -> Result<PathBuf> {
    cmd.out = output_dir(&cmd.out, "infer");
    required(&cmd.checkpoint, "--checkpoint")?;
    required(&cmd.input, "--input")?;
    let state = load_checkpoint(&cmd.checkpoint)?;
    cmd.image.side = state.arch.side();
    cmd.image.validate()?;
    if cmd.tag.is_empty() {
        cmd.tag = cmd.generator.name().into();
    }
    let tag = slug(&cmd.tag);
    let mut m = begin("infer", &cmd);
    m.input_hash(&cmd.checkpoint, checkpoint_hash(&cmd.checkpoint)?);

    let inputs = load_inputs(&cmd.input, &cmd.input_set, &cmd.image, &mut m)?;
    let gen = cmd.generator.pick(&state);
    create_dir(&cmd.out)?;
    for (stem, img) in &inputs {
        let path = cmd.out.join(format!("{stem}__{tag}.png"));
        gen.forward(img)?.save_png(&path)?;
        m.output(path);
    }
    eprintln!("paca infer: wrote {} image(s) to {}", inputs.len(), cmd.out.display());
    m.finish(&cmd.out)
}

#[cfg(test)]
mod tests {
    use super::slug;

    #[test]
    fn slugs() {
        assert_eq!(slug("naïve"), "naive");
        assert_eq!(slug("+OSL+PF+REG"), "osl-pf-reg");
        assert_eq!(slug("g_a"), "g_a");
        assert_eq!(slug("+++"), "x");
    }
}
