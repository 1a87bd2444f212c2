//! Command-line driver: layered configuration, run manifests, and one
//! subcommand per pipeline stage.
//!
//! Exit codes follow [`paca_core::PacaError::exit_code`]: 2 for configuration
//! and usage errors, 3 for missing or malformed input, 4 for numerical
//! failure, 5 for integrity failures.

pub mod args;
pub mod cache;
pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use paca_core::Result;
use serde_json::Value;

use args::Command;
use commands::{evaluate, fixture, infer, preprocess, sweep, train};
use config::{from_value, path_value, resolve};
use manifest::RunManifest;

/// Runs one parsed command; returns the path of the run manifest it wrote.
pub fn execute(command: Command) -> Result<PathBuf> {
    match command {
        Command::Fixture(a) => fixture::run(resolve(a.common.config.as_deref(), &a.overrides()?)?),
        Command::Preprocess(a) => preprocess::run(resolve(a.common.config.as_deref(), &a.overrides()?)?),
        Command::Pretrain(a) => train::run_pretrain(resolve(a.common.config.as_deref(), &a.overrides()?)?),
        Command::Transfer(a) => train::run_transfer(resolve(a.common.config.as_deref(), &a.overrides()?)?),
        Command::Infer(a) => infer::run(resolve(a.common.config.as_deref(), &a.overrides()?)?),
        Command::Evaluate(a) => evaluate::run(resolve(a.common.config.as_deref(), &a.overrides()?)?),
        Command::Sweep(a) => sweep::run(resolve(a.common.config.as_deref(), &a.overrides()?)?),
        Command::Replay(a) => {
            let m = RunManifest::read(&a.manifest)?;
            let mut cfg = m.config;
            if let (Some(out), Value::Object(obj)) = (&a.out, &mut cfg) {
                obj.insert("out".into(), path_value(out));
            }
            dispatch(&m.command, cfg)
        }
    }
}

/// Runs `command` from an already resolved configuration value.
pub fn dispatch(command: &str, cfg: Value) -> Result<PathBuf> {
    match command {
        "fixture" => fixture::run(from_value(cfg)?),
        "preprocess" => preprocess::run(from_value(cfg)?),
        "pretrain" => train::run_pretrain(from_value(cfg)?),
        "transfer" => train::run_transfer(from_value(cfg)?),
        "infer" => infer::run(from_value(cfg)?),
        "evaluate" => evaluate::run(from_value(cfg)?),
        "sweep" => sweep::run(from_value(cfg)?),
        other => Err(paca_core::PacaError::Config(format!("unknown command {other:?} in run manifest"))),
    }
}
