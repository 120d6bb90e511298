use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use bidedpo::diffusion::{load_checkpoint, save_checkpoint, ArtifactStamp, ModelConfig, NoiseSchedule, ScheduleConfig};
use bidedpo::trainer::{pretrain_base, PretrainConfig};
use bidedpo::world::WorldConfig;
use sha2::Digest;

/// Same cache location as the library tests, so the base is pretrained once.
fn base() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let seed = 1u64;
        let key = serde_json::to_vec(&(
            PretrainConfig::default(),
            ModelConfig::default(),
            WorldConfig::default(),
            ScheduleConfig::default(),
            seed,
        ))
        .unwrap();
        let digest = &hex::encode(sha2::Sha256::digest(&key))[..16];
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("base-{digest}"));
        if load_checkpoint(&dir).is_err() {
            let schedule = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
            let (m, _) = pretrain_base(
                &WorldConfig::default(),
                &ModelConfig::default(),
                &schedule,
                &PretrainConfig::default(),
                seed,
            )
            .unwrap();
            let tmp = dir.with_extension(format!("tmp{}", std::process::id()));
            save_checkpoint(&m, &tmp, &ArtifactStamp::new("test-base", seed)).unwrap();
            if std::fs::rename(&tmp, &dir).is_err() {
                let _ = std::fs::remove_dir_all(&tmp);
            }
        }
        dir
    })
}

fn bidedpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bidedpo"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const SMALL: &[&str] = &[
    "--set",
    "pipeline.records=10",
    "--set",
    "pipeline.wave=16",
    "--set",
    "sft.steps=5",
    "--set",
    "dpo.steps=5",
    "--set",
    "testset.n_cases=6",
];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(SMALL);
    v
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_with_zero_steps_copies_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let out = tmp.path().join("ck");
    let o = bidedpo(&with_small(&["generate-data", "--checkpoint", s(base()), "--out", s(&ds), "--records", "4"]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = bidedpo(&[
        "train",
        "--checkpoint",
        s(base()),
        "--dataset",
        s(&ds),
        "--out",
        s(&out),
        "--steps",
        "0",
        "--set",
        "sft=null",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let hash = |p: &Path| load_checkpoint(p).unwrap().1.content_hash;
    assert_eq!(hash(&out), hash(base()));
}

#[test]
fn missing_checkpoint_has_its_own_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bidedpo(&["evaluate", "--checkpoint", s(&tmp.path().join("none")), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bidedpo(&["evaluate", "--checkpoint", s(base()), "--out", s(tmp.path()), "--set", "dpo.nonsense=1"]);
    assert_eq!(code(&o), 1);
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"schema_version": 2}"#).unwrap();
    let o = bidedpo(&["--config", s(&cfg), "evaluate", "--checkpoint", s(base()), "--out", s(tmp.path())]);
    assert_eq!(code(&o), 1);
    let o = bidedpo(&["--config", s(&tmp.path().join("absent.json")), "diagnose", "--out", s(tmp.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn budget_exhaustion_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bidedpo(&with_small(&[
        "generate-data",
        "--checkpoint",
        s(base()),
        "--out",
        s(&tmp.path().join("ds")),
        "--set",
        "pipeline.max_attempts=1",
    ]));
    assert_eq!(code(&o), 3);
}

#[test]
fn iterate_writes_one_directory_per_round() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = bidedpo(&with_small(&["iterate", "--base", s(base()), "--rounds", "3", "--out", s(&out)]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for i in 1..=3 {
        let dir = out.join(format!("iter{i}"));
        assert!(dir.join("dataset/manifest.json").is_file(), "{}", dir.display());
        assert!(dir.join("checkpoint/manifest.json").is_file());
        assert!(dir.join("report.json").is_file());
    }
    assert!(!out.join("iter4").exists());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("iter")).count(), 3);
}
