//! Random and layer-wise parameter freezing for the two generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blob::sha256_hex;
use crate::error::{PacaError, Result};
use crate::networks::{GeneratorNet, NetworkParams};

/// Stream reserved for mask draws so masks do not depend on training seeds.
const MASK_STREAM: u64 = 0x6d61736b;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Tensor,
    #[default]
    Element,
}

/// Frozen flag for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frozen {
    Tensor(bool),
    Elements(Vec<bool>),
}

impl Frozen {
    pub fn frozen_count(&self, len: usize) -> usize {
        match self {
            Frozen::Tensor(true) => len,
            Frozen::Tensor(false) => 0,
            Frozen::Elements(v) => v.iter().filter(|&&b| b).count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub name: String,
    pub len: usize,
    pub frozen: Frozen,
}

/// Frozen entries for one generator, in registry order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetMask {
    pub network: String,
    pub entries: Vec<MaskEntry>,
}

impl NetMask {
    pub fn frozen_elements(&self) -> usize {
        self.entries.iter().map(|e| e.frozen.frozen_count(e.len)).sum()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.len).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub seed: u64,
    pub rate: f64,
    pub granularity: Granularity,
    /// Residual block frozen by [`freeze_layer`]; `None` for random masks.
    pub block: Option<usize>,
    pub g_a: NetMask,
    pub g_b: NetMask,
}

/// Serializable recipe for building a mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FreezeSpec {
    Random { rate: f64, seed: u64, granularity: Granularity },
    Layer { block: usize },
}

impl FreezeSpec {
    pub fn none() -> Self {
        FreezeSpec::Random { rate: 0.0, seed: 0, granularity: Granularity::Element }
    }

    pub fn build(&self, g_a: &GeneratorNet, g_b: &GeneratorNet) -> Result<FreezeMask> {
        match *self {
            FreezeSpec::Random { rate, seed, granularity } => freeze_random(g_a, g_b, rate, seed, granularity),
            FreezeSpec::Layer { block } => freeze_layer(g_a, g_b, block),
        }
    }
}

/// Compact per-network summary stored in manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub seed: u64,
    pub rate: f64,
    pub granularity: Granularity,
    pub block: Option<usize>,
    pub frozen_g_a: usize,
    pub total_g_a: usize,
    pub frozen_g_b: usize,
    pub total_g_b: usize,
    pub content_sha256: String,
}

impl FreezeMask {
    pub fn frozen_elements(&self) -> usize {
        self.g_a.frozen_elements() + self.g_b.frozen_elements()
    }

    pub fn total_elements(&self) -> usize {
        self.g_a.total_elements() + self.g_b.total_elements()
    }

    pub fn frozen_fraction(&self) -> f64 {
        self.frozen_elements() as f64 / self.total_elements().max(1) as f64
    }

    /// One byte per element (1 = frozen), both generators in order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_elements());
        for e in self.g_a.entries.iter().chain(&self.g_b.entries) {
            match &e.frozen {
                Frozen::Tensor(f) => out.extend(std::iter::repeat_n(u8::from(*f), e.len)),
                Frozen::Elements(v) => out.extend(v.iter().map(|&b| u8::from(b))),
            }
        }
        out
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    pub fn summary(&self) -> MaskSummary {
        MaskSummary {
            seed: self.seed,
            rate: self.rate,
            granularity: self.granularity,
            block: self.block,
            frozen_g_a: self.g_a.frozen_elements(),
            total_g_a: self.g_a.total_elements(),
            frozen_g_b: self.g_b.frozen_elements(),
            total_g_b: self.g_b.total_elements(),
            content_sha256: self.content_hash(),
        }
    }
}

fn random_net_mask(
    network: &str,
    params: &NetworkParams<f32>,
    rate: f64,
    granularity: Granularity,
    rng: &mut ChaCha8Rng,
) -> NetMask {
    let entries = params
        .iter()
        .map(|p| {
            let len = p.tensor.len();
            let frozen = match granularity {
                Granularity::Tensor => Frozen::Tensor(rng.random::<f64>() < rate),
                Granularity::Element => Frozen::Elements((0..len).map(|_| rng.random::<f64>() < rate).collect()),
            };
            MaskEntry { name: p.name.clone(), len, frozen }
        })
        .collect();
    NetMask { network: network.to_string(), entries }
}

/// Draws `r ~ U[0, 1)` per tensor or per element of G_A then G_B and
/// freezes where `r < rate`.
pub fn freeze_random(
    g_a: &GeneratorNet,
    g_b: &GeneratorNet,
    rate: f64,
    seed: u64,
    granularity: Granularity,
) -> Result<FreezeMask> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(PacaError::Config(format!("freezing rate must be in [0, 1], got {rate}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(MASK_STREAM);
    let ma = random_net_mask("g_a", &g_a.params, rate, granularity, &mut rng);
    let mb = random_net_mask("g_b", &g_b.params, rate, granularity, &mut rng);
    Ok(FreezeMask { seed, rate, granularity, block: None, g_a: ma, g_b: mb })
}

/// Freezes residual block `block` (1-based) in both generators.
pub fn freeze_layer(g_a: &GeneratorNet, g_b: &GeneratorNet, block: usize) -> Result<FreezeMask> {
    for g in [g_a, g_b] {
        if block == 0 || block > g.arch.n_res {
            return Err(PacaError::Config(format!("block index {block} outside 1..={}", g.arch.n_res)));
        }
    }
    let prefix = GeneratorNet::block_prefix(block);
    let net = |name: &str, g: &GeneratorNet| NetMask {
        network: name.to_string(),
        entries: g
            .params
            .iter()
            .map(|p| MaskEntry {
                name: p.name.clone(),
                len: p.tensor.len(),
                frozen: Frozen::Tensor(p.name.starts_with(&prefix)),
            })
            .collect(),
    };
    let total = g_a.params.count().elements + g_b.params.count().elements;
    let frozen = g_a.params.count_prefix(&prefix).elements + g_b.params.count_prefix(&prefix).elements;
    Ok(FreezeMask {
        seed: 0,
        rate: frozen as f64 / total as f64,
        granularity: Granularity::Tensor,
        block: Some(block),
        g_a: net("g_a", g_a),
        g_b: net("g_b", g_b),
    })
}

/// Returns `params` with trainability flags set from `mask`. Frozen flags
/// are replaced, not combined with existing ones.
pub fn apply_mask(params: &NetworkParams<f32>, mask: &NetMask) -> Result<NetworkParams<f32>> {
    if params.len() != mask.entries.len() {
        return Err(PacaError::Contract(format!(
            "mask for {} has {} entries, network has {} parameters",
            mask.network,
            mask.entries.len(),
            params.len()
        )));
    }
    let mut out = params.clone();
    out.unfreeze_all();
    for (i, e) in mask.entries.iter().enumerate() {
        let p = out.at_mut(i);
        if p.name != e.name || p.tensor.len() != e.len {
            return Err(PacaError::Contract(format!("mask entry {} does not match parameter {}", e.name, p.name)));
        }
        match &e.frozen {
            Frozen::Tensor(f) => p.trainable = !f,
            Frozen::Elements(v) => {
                if v.len() != e.len {
                    return Err(PacaError::Contract(format!("mask entry {} has wrong length", e.name)));
                }
                p.mask = Some(v.iter().map(|f| !f).collect());
            }
        }
    }
    Ok(out)
}
