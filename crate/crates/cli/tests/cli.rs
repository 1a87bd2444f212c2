use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use paca_cli::manifest::RunManifest;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_paca"))
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("PACA_OUT_ROOT")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
        out
    }

    /// Tiny fixture plus a 16px cache.
    fn cached(&self) -> &Self {
        self.ok(&["fixture", "--out", "fx", "--side", "16", "--per-domain", "4", "--seed", "3"]);
        self.ok(&["preprocess", "--inputs", "fx", "--side", "16", "--out", "cache"]);
        self
    }

    fn pretrain(&self, out: &str, epochs: &str, extra: &[&str]) {
        let mut args = vec!["pretrain", "--cache", "cache", "--preset", "tiny", "--epochs", epochs];
        args.extend(["--ssim-scales", "1", "--pool-size", "4", "--out", out]);
        args.extend(extra);
        self.ok(&args);
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), bytes(&p)))
        .collect();
    v.sort();
    v
}

#[test]
fn usage_errors_exit_2() {
    let env = Env::new();
    assert_eq!(code(&env.run(&[])), 2);
    assert_eq!(code(&env.run(&["pretrain", "--no-such-flag"])), 2);
    assert_eq!(code(&env.run(&["transfer", "--cache", "x"])), 2);
    assert_eq!(code(&env.run(&["sweep", "--base", "b", "--cache", "c", "--rates", ""])), 2);
    assert_eq!(code(&env.run(&["pretrain", "--cache", "c", "--set", "train.no_such_key=1"])), 2);
    assert_eq!(code(&env.run(&["pretrain", "--cache", "c", "--lr", "-1"])), 2);
    std::fs::write(env.path("bad.json"), r#"{"train": {"lr": 0.1, "typo": 1}}"#).unwrap();
    let out = env.run(&["pretrain", "--cache", "c", "--config", "bad.json"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.typo"));
}

#[test]
fn preprocess_rejects_empty_and_undecodable_inputs() {
    let env = Env::new();
    for d in ["a", "b"] {
        std::fs::create_dir(env.path(d)).unwrap();
    }
    let out = env.run(&["preprocess", "--domain-a", "a", "--domain-b", "b", "--out", "cache"]);
    assert_eq!(code(&out), 3);
    assert!(!env.path("cache/cache.json").exists());

    paca_core::data::ImageTensor::filled(8, 0.0).save_png(&env.path("a/good.png")).unwrap();
    paca_core::data::ImageTensor::filled(8, 0.0).save_png(&env.path("b/good.png")).unwrap();
    std::fs::write(env.path("a/broken.png"), b"garbage").unwrap();
    std::fs::write(env.path("b/also_broken.jpg"), b"garbage").unwrap();
    let out = env.run(&["preprocess", "--domain-a", "a", "--domain-b", "b", "--side", "8", "--out", "cache"]);
    assert_eq!(code(&out), 3);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("broken.png") && err.contains("also_broken.jpg"), "{err}");
    assert!(!env.path("cache/cache.json").exists());
}

#[test]
fn preprocess_rerun_is_a_noop_and_polarizes_domain_a_only() {
    let env = Env::new();
    env.cached();
    let index = env.path("cache/cache.json");
    let before = std::fs::metadata(&index).unwrap().modified().unwrap();
    let blob = env.path("cache/domain_a/0000.png.f32");
    let blob_before = std::fs::metadata(&blob).unwrap().modified().unwrap();
    let out = env.ok(&["preprocess", "--inputs", "fx", "--side", "16", "--out", "cache"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("up to date"));
    assert_eq!(std::fs::metadata(&index).unwrap().modified().unwrap(), before);
    assert_eq!(std::fs::metadata(&blob).unwrap().modified().unwrap(), blob_before);

    let cache = paca_cli::cache::Cache::load(&env.path("cache")).unwrap();
    let binary =
        |imgs: Vec<paca_core::data::ImageTensor>| imgs.iter().all(|i| i.data().iter().all(|&v| v == 1.0 || v == -1.0));
    assert!(binary(cache.images("domain_a").unwrap()));
    assert!(!binary(cache.images("domain_b").unwrap()));
    let pair = cache.require_pair().unwrap();
    assert!(binary(vec![pair.a.clone()]) && !binary(vec![pair.b_prime.clone()]));

    // a changed setting reprocesses domain A; B settings are unaffected
    let hashes = |c: &paca_cli::cache::Cache| c.index.config_hashes.clone();
    let old = hashes(&cache);
    env.ok(&["preprocess", "--inputs", "fx", "--side", "16", "--polarize", "false", "--out", "cache"]);
    let new = hashes(&paca_cli::cache::Cache::load(&env.path("cache")).unwrap());
    assert_ne!(old["domain_a"], new["domain_a"]);
    assert_ne!(old["pair/a"], new["pair/a"]);
    assert_eq!(old["domain_b"], new["domain_b"]);
    assert_eq!(old["domain_b"], new["domain_a"]);
    assert_ne!(std::fs::metadata(&blob).unwrap().modified().unwrap(), blob_before);
}

#[test]
fn flags_beat_config_file_beats_defaults() {
    let env = Env::new();
    env.cached();
    std::fs::write(env.path("c.json"), r#"{"preset": "tiny", "train": {"lr": 0.001, "seed": 9}}"#).unwrap();
    let base = ["pretrain", "--cache", "cache", "--epochs", "0", "--ssim-scales", "1", "--config", "c.json"];
    env.ok(&[&base[..], &["--out", "r1"]].concat());
    env.ok(&[&base[..], &["--out", "r2", "--lr", "0.002"]].concat());
    let cfg = |run: &str| RunManifest::read(&env.path(run).join("run.json")).unwrap().config;
    assert_eq!(cfg("r1")["train"]["lr"], 0.001);
    assert_eq!(cfg("r2")["train"]["lr"], 0.002);
    assert_eq!(cfg("r2")["train"]["seed"], 9);
    assert_eq!(cfg("r2")["train"]["weights"]["lambda_cyc"], 10.0);
}

#[test]
fn out_root_anchors_relative_outputs() {
    let env = Env::new();
    let out = Command::new(env!("CARGO_BIN_EXE_paca"))
        .args(["fixture", "--side", "8", "--per-domain", "1", "--out", "fx"])
        .current_dir(env.dir.path())
        .env("PACA_OUT_ROOT", env.path("root"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(env.path("root/fx/run.json").is_file());
    assert!(!env.path("fx").exists());
}

#[test]
fn run_manifest_records_provenance() {
    let env = Env::new();
    env.cached();
    env.pretrain("pre", "1", &[]);
    let m = RunManifest::read(&env.path("pre/run.json")).unwrap();
    assert_eq!(m.command, "pretrain");
    assert_eq!(m.code_hash.len(), 64);
    assert!(m.code_hash.chars().all(|c| c.is_ascii_hexdigit()));
    assert!(m.finished_unix_ms >= m.started_unix_ms);
    assert!(m.inputs.keys().any(|k| k.ends_with("cache")));
    assert!(m.outputs.iter().any(|p| p.ends_with("checkpoint")));
    assert_eq!(m.config["preset"], "tiny");
    // exactly one run manifest per run directory
    let manifests =
        std::fs::read_dir(env.path("pre")).unwrap().filter(|e| e.as_ref().unwrap().file_name() == "run.json").count();
    assert_eq!(manifests, 1);
}

#[test]
fn pretrain_is_deterministic_and_resumable() {
    let env = Env::new();
    env.cached();
    env.pretrain("a", "4", &["--checkpoint-every", "2"]);
    env.pretrain("b", "4", &["--checkpoint-every", "2"]);
    assert_eq!(dir_bytes(&env.path("a/checkpoint")), dir_bytes(&env.path("b/checkpoint")));

    // interrupted after epoch 2: keep its checkpoint and a partial log, then resume
    env.pretrain("c", "4", &["--checkpoint-every", "2"]);
    std::fs::remove_dir_all(env.path("c/checkpoint")).unwrap();
    env.pretrain("c", "4", &["--checkpoint-every", "2", "--resume", "c/checkpoints/epoch-0002"]);
    assert_eq!(dir_bytes(&env.path("a/checkpoint")), dir_bytes(&env.path("c/checkpoint")));
    assert_eq!(bytes(&env.path("a/log.jsonl")), bytes(&env.path("c/log.jsonl")));
    assert_eq!(bytes(&env.path("a/epochs.json")), bytes(&env.path("c/epochs.json")));

    let out = env.run(&[
        "pretrain",
        "--cache",
        "cache",
        "--preset",
        "tiny",
        "--epochs",
        "6",
        "--ssim-scales",
        "1",
        "--out",
        "d",
        "--resume",
        "a/checkpoints/epoch-0002",
    ]);
    assert_eq!(code(&out), 2, "resuming under a different schedule must be refused");
}

#[test]
fn numerical_failure_exits_4_with_diagnostic() {
    let env = Env::new();
    env.cached();
    let out = env.run(&[
        "pretrain",
        "--cache",
        "cache",
        "--preset",
        "tiny",
        "--epochs",
        "2",
        "--ssim-scales",
        "1",
        "--lr",
        "1e30",
        "--out",
        "boom",
    ]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(env.path("boom/checkpoints/diagnostic/manifest.json").is_file());
}

#[test]
fn transfer_checks_base_integrity() {
    let env = Env::new();
    env.cached();
    env.pretrain("pre", "1", &[]);
    let manifest = paca_core::training::read_manifest(&env.path("pre/checkpoint")).unwrap();
    let blob = env.path("pre/checkpoint").join(&manifest.blobs[0].file);
    let mut b = bytes(&blob);
    b[0] ^= 0xff;
    std::fs::write(&blob, b).unwrap();
    let out =
        env.run(&["transfer", "--base", "pre/checkpoint", "--cache", "cache", "--ssim-scales", "1", "--steps", "2"]);
    assert_eq!(code(&out), 5);
    let missing = env.run(&["transfer", "--base", "nowhere", "--cache", "cache", "--ssim-scales", "1"]);
    assert_eq!(code(&missing), 3);
}

#[test]
fn infer_names_outputs_by_stem_and_tag() {
    let env = Env::new();
    env.cached();
    env.pretrain("pre", "1", &[]);
    env.ok(&["infer", "--checkpoint", "pre/checkpoint", "--input", "cache", "--tag", "Base G", "--out", "i1"]);
    env.ok(&["infer", "--checkpoint", "pre/checkpoint", "--input", "cache/domain_a", "--tag", "Base G", "--out", "i2"]);
    let names: Vec<String> =
        dir_bytes(&env.path("i1")).into_iter().map(|(n, _)| n).filter(|n| n.ends_with(".png")).collect();
    assert_eq!(names, ["0000__base-g.png", "0001__base-g.png", "0002__base-g.png", "0003__base-g.png"]);
    // cache root and set directory give the same pixels
    for n in &names {
        assert_eq!(bytes(&env.path("i1").join(n)), bytes(&env.path("i2").join(n)));
    }
}

#[test]
fn evaluate_writes_rows_in_method_order() {
    let env = Env::new();
    env.cached();
    env.pretrain("init", "0", &[]);
    env.pretrain("pre", "1", &[]);
    env.ok(&[
        "evaluate",
        "--cache",
        "cache",
        "--ssim-scales",
        "1",
        "--method",
        "naïve=init/checkpoint",
        "--method",
        "+OSL=pre/checkpoint",
        "--out",
        "ev",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&bytes(&env.path("ev/report.json"))).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["method"], "naïve");
    assert_eq!(rows[1]["method"], "+OSL");
    assert_eq!(rows[0]["n_fused"], 4);
    let md = String::from_utf8(bytes(&env.path("ev/report.md"))).unwrap();
    assert!(md.contains("| naïve |") && md.contains("| +OSL |"));
    assert!(env.path("ev/fused/naive/0000__naive.png").is_file());
    assert!(env.path("ev/fused/osl/0003__osl.png").is_file());
}

#[test]
fn single_cell_sweep_matches_plain_transfer() {
    let env = Env::new();
    env.cached();
    env.pretrain("pre", "1", &[]);
    let common = ["--base", "pre/checkpoint", "--cache", "cache", "--ssim-scales", "1", "--pool-size", "4"];
    env.ok(&[&["transfer"][..], &common, &["--steps", "3", "--rate", "0.7", "--out", "tr"]].concat());
    env.ok(&[&["sweep"][..], &common, &["--steps", "3", "--rates", "0.7", "--out", "sw"]].concat());
    assert_eq!(bytes(&env.path("tr/fused_pair.png")), bytes(&env.path("sw/cells/r00_c00.png")));
    let grid = image::open(env.path("sw/grid.png")).unwrap();
    assert_eq!((grid.width(), grid.height()), (16, 16));
}

#[test]
fn sweep_grid_layout_and_replay() {
    let env = Env::new();
    env.cached();
    env.pretrain("pre", "1", &[]);
    env.ok(&[
        "sweep",
        "--base",
        "pre/checkpoint",
        "--cache",
        "cache",
        "--ssim-scales",
        "1",
        "--pool-size",
        "4",
        "--rates",
        "0.2,0.5,0.8",
        "--steps",
        "1,2",
        "--out",
        "sw",
    ]);
    let grid = image::open(env.path("sw/grid.png")).unwrap();
    assert_eq!((grid.width(), grid.height()), (3 * 18 - 2, 2 * 18 - 2));
    let index: paca_cli::commands::sweep::SweepIndex =
        serde_json::from_slice(&bytes(&env.path("sw/index.json"))).unwrap();
    assert_eq!(index.cells.len(), 6);
    let c = index.cell(0.5, 2).unwrap();
    assert_eq!((c.row, c.col, c.x, c.y), (1, 1, 18, 18));
    // the three rates share one mask seed but differ in mask
    assert_ne!(index.cell(0.2, 1).unwrap().mask_hash, index.cell(0.8, 1).unwrap().mask_hash);

    env.ok(&["replay", "sw/run.json", "--out", "sw2"]);
    assert_eq!(bytes(&env.path("sw/grid.png")), bytes(&env.path("sw2/grid.png")));
    assert_eq!(bytes(&env.path("sw/index.json")), bytes(&env.path("sw2/index.json")));
}
