//! Runs the `cdpo` binary end to end on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[pretrain]
iterations = 30
batch_size = 32
log_every = 10

[distill]
iterations = 10
batch_size = 16

[finetune]
iterations = 25
batch_size = 4
reward_samples = 8
log_every = 5

[curriculum]
stage_iterations = 5
samples_per_condition = 12

[eval]
n_samples = 16
"#;

fn cdpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdpo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let pre = dir.path().join("pre");
    let o = cdpo(&["pretrain", "--config", s(&cfg), "--out", s(&pre)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let header = std::fs::read_to_string(pre.join("metrics.csv")).unwrap();
    assert!(header.starts_with(
        "iteration,stage,rank,active_layers,trainable_params,loss,grad_weight,mean_reward,implicit_acc\n"
    ));
    let teacher = pre.join("checkpoint.bin");

    let cm = dir.path().join("cm");
    let o = cdpo(&[
        "distill",
        "--config",
        s(&cfg),
        "--teacher",
        s(&teacher),
        "--out",
        s(&cm),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let ft = dir.path().join("ft");
    let o = cdpo(&[
        "finetune",
        "--config",
        s(&cfg),
        "--base",
        s(&teacher),
        "--out",
        s(&ft),
        "--seed",
        "4",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        String::from_utf8_lossy(&o.stdout)
            .lines()
            .filter(|l| l.starts_with("stage "))
            .count(),
        5
    );

    let ftc = dir.path().join("ftc");
    let o = cdpo(&[
        "finetune",
        "--config",
        s(&cfg),
        "--variant",
        "consistency",
        "--mode",
        "mask-free",
        "--base",
        s(&cm.join("checkpoint.bin")),
        "--teacher",
        s(&teacher),
        "--out",
        s(&ftc),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = cdpo(&["curves", "--out", s(&ft)]);
    assert!(o.status.success());
    let bounds = std::fs::read_to_string(ft.join("curves/stage_boundaries.csv")).unwrap();
    assert_eq!(bounds.lines().count(), 5);

    let o = cdpo(&[
        "sample",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ft.join("checkpoint.bin")),
        "--out",
        s(&ft),
    ]);
    assert!(o.status.success());
    assert_eq!(
        std::fs::read_to_string(ft.join("samples.csv")).unwrap().lines().count(),
        17
    );

    let o = cdpo(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ft.join("checkpoint.bin")),
        "--reference",
        s(&teacher),
        "--out",
        s(&ft),
    ]);
    assert!(o.status.success());
    let summary = std::fs::read_to_string(ft.join("eval.toml")).unwrap();
    assert!(summary.contains("win_rate") && summary.contains("ties"));
}

#[test]
fn repeated_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let read = |name: &str| {
        let out = dir.path().join(name);
        assert!(
            cdpo(&["pretrain", "--config", s(&cfg), "--out", s(&out), "--seed", "11"])
                .status
                .success()
        );
        std::fs::read(out.join("metrics.csv")).unwrap()
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[finetune]\nunknown_key = 1\n").unwrap();
    assert_eq!(cdpo(&["pretrain", "--config", s(&bad)]).status.code(), Some(2));

    let mismatch = dir.path().join("mismatch.toml");
    std::fs::write(&mismatch, "[curriculum]\nstage_budgets = [1, 2, 3, 4, 5]\n").unwrap();
    assert_eq!(cdpo(&["pretrain", "--config", s(&mismatch)]).status.code(), Some(2));

    let missing = dir.path().join("nope.bin");
    let o = cdpo(&["distill", "--teacher", s(&missing), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(
        cdpo(&["pretrain", "--config", s(&dir.path().join("nope.toml"))])
            .status
            .code(),
        Some(4)
    );
    assert_eq!(
        cdpo(&["curves", "--out", s(&dir.path().join("empty"))]).status.code(),
        Some(4)
    );

    let blowup = dir.path().join("blowup.toml");
    std::fs::write(
        &blowup,
        "[pretrain]\niterations = 50\nbatch_size = 8\n[pretrain.optimizer]\nlr = 1e200\n",
    )
    .unwrap();
    let o = cdpo(&["pretrain", "--config", s(&blowup), "--out", s(&dir.path().join("b"))]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
