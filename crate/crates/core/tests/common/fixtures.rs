//! Small training setups shared by the integration tests.

#![allow(dead_code)]

use paca_core::data::{Stage, TransferPair, UnpairedDataset};
use paca_core::freezing::{FreezeSpec, Granularity};
use paca_core::losses::SsimConfig;
use paca_core::networks::CycleGanArch;
use paca_core::synthetic::Fixture;
use paca_core::training::{TrainConfig, TrainState};

pub fn tiny() -> CycleGanArch {
    CycleGanArch::tiny()
}

pub fn pretrain_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        stage: Stage::Pretrain,
        epochs_flat: epochs.div_ceil(2),
        epochs_decay: epochs / 2,
        ssim: SsimConfig::with_scales(1).unwrap(),
        seed,
        pool_size: 4,
        ..Default::default()
    }
}

pub fn transfer_config(steps: usize, rate: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        stage: Stage::Transfer,
        epochs_flat: steps,
        epochs_decay: 0,
        ssim: SsimConfig::with_scales(1).unwrap(),
        freeze: Some(FreezeSpec::Random { rate, seed: seed ^ 0x5a, granularity: Granularity::Element }),
        seed,
        pool_size: 4,
        ..Default::default()
    }
}

pub fn tiny_fixture(per_domain: usize, seed: u64) -> Fixture {
    Fixture::generate(16, per_domain, seed)
}

pub fn dataset(f: &Fixture) -> UnpairedDataset {
    UnpairedDataset::new(f.domain_a.clone(), f.domain_b.clone(), Some(f.pair.clone()), 1.0, 0).unwrap()
}

pub fn pair(f: &Fixture) -> TransferPair {
    f.pair.clone()
}

/// Untrained pre-training state, enough to exercise the transfer stage.
pub fn base_state(seed: u64) -> TrainState {
    TrainState::init(tiny(), pretrain_config(2, seed)).unwrap()
}
