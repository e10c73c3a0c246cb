use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn vitac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vitac"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn micro(args: &[&str]) -> Output {
    let cfg = configs().join("micro.cfg");
    let mut all = vec!["--config", cfg.to_str().unwrap()];
    all.extend_from_slice(args);
    vitac(&all)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "status {:?}\n{}\n{}",
        o.status,
        stdout(o),
        stderr(o)
    );
    stdout(o)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn datagen_default_writes_fifty_episodes_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&vitac(&["datagen", "--out", p(&a)]));
    ok(&vitac(&["datagen", "--out", p(&b)]));
    let manifest = std::fs::read_to_string(a.join("manifest.txt")).unwrap();
    let rows: Vec<&str> = manifest.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 50);
    assert!(rows.iter().all(|r| r.ends_with(" true")));
    for i in 0..50 {
        let f = format!("episode_{i:04}.bin");
        assert_eq!(
            std::fs::read(a.join(&f)).unwrap(),
            std::fs::read(b.join(&f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(
        manifest,
        std::fs::read_to_string(b.join("manifest.txt")).unwrap()
    );
}

#[test]
fn datagen_refuses_world_without_information_gap() {
    let dir = tempfile::tempdir().unwrap();
    let o = vitac(&[
        "--set",
        "world.quantization=0.05",
        "datagen",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("world.tolerance"), "{}", stderr(&o));
    assert!(!dir.path().join("manifest.txt").exists());
}

#[test]
fn train_logs_are_reproducible_and_follow_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&micro(&["datagen", "--out", p(&data)]));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&micro(&["train", "--data", p(&data), "--out", p(&a)]));
    ok(&micro(&["train", "--data", p(&data), "--out", p(&b)]));
    let strip = |d: &Path| -> Vec<String> {
        std::fs::read_to_string(d.join("metrics.csv"))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
            .collect()
    };
    let log = strip(&a);
    assert_eq!(log.len(), 4, "digest line, header, two epochs");
    assert_eq!(log, strip(&b));
    assert_eq!(
        std::fs::read(a.join("checkpoint.bin")).unwrap(),
        std::fs::read(b.join("checkpoint.bin")).unwrap()
    );

    let c = dir.path().join("c");
    ok(&micro(&[
        "--set",
        "train.epochs=4",
        "train",
        "--data",
        p(&data),
        "--out",
        p(&c),
    ]));
    let csv = std::fs::read_to_string(c.join("metrics.csv")).unwrap();
    let phases: Vec<&str> = csv
        .lines()
        .skip(2)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(
        phases,
        ["ground_truth", "ground_truth", "ground_truth", "predicted"]
    );
}

#[test]
fn eval_refuses_checkpoint_from_other_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&micro(&["datagen", "--out", p(&data)]));
    let run = dir.path().join("run");
    ok(&micro(&[
        "--set",
        "train.epochs=1",
        "train",
        "--data",
        p(&data),
        "--out",
        p(&run),
    ]));
    let ck = run.join("checkpoint.bin");
    let out = ok(&micro(&["eval", "--checkpoint", p(&ck), "--out", p(&run)]));
    assert!(out.contains("over 10 runs"), "{out}");
    let report = std::fs::read_to_string(run.join("eval_report.csv")).unwrap();
    assert!(report.starts_with("# config_digest="));
    assert_eq!(
        report.lines().filter(|l| l.starts_with("model/")).count(),
        10
    );

    let o = micro(&[
        "--set",
        "model.dim=12",
        "eval",
        "--checkpoint",
        p(&ck),
        "--out",
        p(&run),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("digest"));
}

#[test]
fn eval_expert_succeeds_and_untrained_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&vitac(&[
        "eval",
        "--checkpoint",
        "expert",
        "--out",
        p(dir.path()),
    ]));
    assert!(out.contains("success rate 1.0000"), "{out}");
    let out = ok(&vitac(&[
        "eval",
        "--checkpoint",
        "untrained",
        "--out",
        p(dir.path()),
    ]));
    let rate: f64 = out
        .lines()
        .last()
        .unwrap()
        .split_whitespace()
        .nth(2)
        .unwrap()
        .parse()
        .unwrap();
    assert!(rate <= 0.1, "{out}");
}

#[test]
fn ablate_emits_ladder_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&micro(&[
        "--set",
        "train.epochs=1",
        "--runs",
        "2",
        "ablate",
        "--seeds",
        "1",
        "--out",
        p(dir.path()),
    ]));
    assert!(out.contains("# data_digest="));
    let text = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let summary: Vec<&str> = text
        .lines()
        .skip_while(|l| !l.starts_with("variant,seeds"))
        .skip(1)
        .take_while(|l| !l.is_empty())
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        summary,
        [
            "without_touch",
            "naive_touch",
            "cross_attention",
            "next_touch_pred",
            "autoregressive",
            "full"
        ]
    );
}

#[test]
fn gradcheck_passes_and_names_corrupted_op() {
    let o = vitac(&["gradcheck"]);
    let out = ok(&o);
    assert!(out.starts_with("# eps=1e-5\n"), "{out}");
    assert!(out.contains("model,1e-3,"));
    assert!(out.contains("layers,1e-4,"));
    assert!(!out.contains("FAIL"));

    let o = vitac(&["gradcheck", "--fault", "tanh", "--coords", "2"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stdout(&o).contains("failed ops/tanh"), "{}", stdout(&o));
}

#[test]
fn hns_scores_sheets() {
    let dir = tempfile::tempdir().unwrap();
    let sheet = dir.path().join("sheet.txt");
    std::fs::write(&sheet, "peg_insertion 3.0 2.7\npeg_insertion 0 0\n").unwrap();
    let out = ok(&vitac(&["hns", p(&sheet)]));
    assert!(out.contains("run_0,3,2.7,0.9333,1"), "{out}");
    assert!(out.contains("run_1,0,0,0.0000,0"), "{out}");

    std::fs::write(&sheet, "hamburger 2.9 3 1.9 1.8 2.7 2.9 2 2.8 2.4 2.5 3\n").unwrap();
    let out = ok(&vitac(&["hns", p(&sheet), "--task", "hamburger"]));
    assert!(out.contains(",0.8833,1"), "{out}");

    std::fs::write(&sheet, "peg_insertion 3 2\n\npeg_insertion 3 two\n").unwrap();
    let o = vitac(&["hns", p(&sheet)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "train.epochs=2\ntrain.epoch=3\n").unwrap();
    let o = vitac(&["--config", p(&cfg), "datagen", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.epoch"));
}
