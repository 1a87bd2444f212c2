use std::path::PathBuf;

use paca_core::synthetic::Fixture;
use paca_core::{PacaError, Result};
use serde::{Deserialize, Serialize};

use super::{begin, create_dir};
use crate::config::output_dir;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureConfig {
    pub out: PathBuf,
    pub side: usize,
    pub per_domain: usize,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self { out: PathBuf::new(), side: 64, per_domain: 64, seed: 0 }
    }
}

pub fn run(mut cfg: FixtureConfig) -> Result<PathBuf> {
    cfg.out = output_dir(&cfg.out, "fixture");
    if cfg.side < 8 || cfg.per_domain == 0 {
        return Err(PacaError::Config("fixture needs side >= 8 and per_domain >= 1".into()));
    }
    let mut m = begin("fixture", &cfg);
    create_dir(&cfg.out)?;
    let paths = Fixture::generate(cfg.side, cfg.per_domain, cfg.seed).write(&cfg.out)?;
    for p in [paths.domain_a, paths.domain_b, paths.domain_b_prime, paths.pair_a, paths.pair_b_prime] {
        m.output(p);
    }
    m.finish(&cfg.out)
}
