//! End-to-end acceptance checks, one line per criterion.
//!
//! `cargo test --test acceptance` runs everything, including the five-seed
//! ablation sweep. Pass `-- --quick` or set `VITAC_QUICK=1` for two seeds.

use std::process::ExitCode;
use std::time::Instant;

use vitac::ablation::{train_and_evaluate, variant_config};
use vitac::checkpoint::FormatError;
use vitac::config::ModelConfig;
use vitac::gradcheck::{run_suites, Suite, MODEL_COORDS};
use vitac::hns::TaskScheme;
use vitac::policy::{gaussian, Batch, Latent, Observation, Phase, PolicyModel, Sample};
use vitac::synthworld::{
    future_tactile_l1, generate_dataset, generate_episode, training_set, write_dataset, Episode,
    EpisodeDims,
};
use vitac::tensor::{Checker, Graph, Tensor};
use vitac::training::losses::{composite_loss, kl_diag_gaussian};
use vitac::training::{train, ChannelStats, CurriculumSchedule, TrainOutcome};
use vitac::{Config, Variant};

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e(err: impl std::fmt::Display) -> String {
    err.to_string()
}

fn micro_config() -> Config {
    let mut cfg = Config::default();
    cfg.model = ModelConfig::micro();
    cfg.train.batch = 16;
    cfg
}

fn hns_references() -> Check {
    let printed = [
        ("peg_insertion", 0.93),
        ("cap_twist", 0.98),
        ("vase_wipe", 0.98),
        ("book_flip", 0.93),
        ("hamburger", 0.88),
    ];
    let mut out = Vec::new();
    for (task, want) in printed {
        let scheme = TaskScheme::builtin(task).map_err(e)?;
        let checks = scheme.reference_checks().map_err(e)?;
        let ours = checks
            .iter()
            .find(|c| c.label == "ours")
            .ok_or_else(|| format!("{task}: no ours row"))?;
        ensure(ours.printed == want, || {
            format!("{task}: printed {}", ours.printed)
        })?;
        ensure(ours.agrees(), || {
            format!("{task}: {:.4} vs {want}", ours.recomputed)
        })?;
        out.push(format!("{task} {:.4}", ours.recomputed));
    }
    let burger = TaskScheme::builtin("hamburger").map_err(e)?;
    let checks = burger.reference_checks().map_err(e)?;
    let ours = &checks
        .iter()
        .find(|c| c.label == "ours")
        .unwrap()
        .recomputed;
    ensure((ours - 0.8833).abs() < 5e-5, || {
        format!("hamburger ours {ours}")
    })?;
    let base = checks
        .iter()
        .find(|c| c.label == "without_touch")
        .ok_or("hamburger: no without_touch row")?;
    ensure((base.recomputed - 0.619).abs() < 5e-4, || {
        format!("hamburger without_touch {}", base.recomputed)
    })?;
    ensure(!base.agrees(), || "baseline unexpectedly agrees".into())?;
    println!(
        "note: hamburger without_touch recomputes to {:.4}, printed {:.2}",
        base.recomputed, base.printed
    );
    out.push(format!(
        "hamburger baseline {:.4} (printed 0.61, flagged)",
        base.recomputed
    ));
    Ok(out.join(", "))
}

fn gradients() -> Check {
    let report =
        run_suites(&ModelConfig::micro(), &Checker::default(), MODEL_COORDS, 0).map_err(e)?;
    if let Some(f) = report.failures().next() {
        return Err(format!(
            "{}/{} rel error {:e}",
            f.suite.name(),
            f.case,
            f.check.max_error
        ));
    }
    let suites = [
        Suite::Ops,
        Suite::Layers,
        Suite::Fusion,
        Suite::Losses,
        Suite::Model,
    ];
    let mut out = Vec::new();
    for s in suites {
        let w = report
            .worst(s)
            .ok_or_else(|| format!("{} suite is empty", s.name()))?;
        out.push(format!(
            "{} {:.1e}<{:.0e}",
            s.name(),
            w.check.max_error,
            s.rtol()
        ));
    }
    Ok(out.join(", "))
}

fn phases_match(out: &TrainOutcome, epochs: usize) -> std::result::Result<(), String> {
    let s = CurriculumSchedule::new(epochs, CurriculumSchedule::DEFAULT_FRACTION);
    ensure(out.log.records.len() == epochs, || "log length".into())?;
    for r in &out.log.records {
        ensure(r.phase == s.phase(r.epoch).map_err(e)?, || {
            format!(
                "{epochs}-epoch run: epoch {} logged {}",
                r.epoch,
                r.phase.name()
            )
        })?;
    }
    Ok(())
}

fn curriculum() -> Check {
    let s = CurriculumSchedule::new(100, 0.75);
    for epoch in 0..100 {
        let want = if epoch < 75 {
            Phase::GroundTruth
        } else {
            Phase::Predicted
        };
        ensure(s.phase(epoch).map_err(e)? == want, || {
            format!("schedule epoch {epoch}")
        })?;
    }
    let mut cfg = micro_config();
    let eps = generate_dataset(&cfg, 2, 0).map_err(e)?;
    let data = training_set(&cfg.model, &eps).map_err(e)?;
    let mut recs = Vec::new();
    for epochs in [2, 100] {
        cfg.train.epochs = epochs;
        let out = train(&cfg, &data, None, &mut |_| {}).map_err(e)?;
        phases_match(&out, epochs)?;
        recs = out.log.records;
    }
    Ok(format!(
        "schedule switches at 75; micro 100-epoch log: epoch 74 {}, epoch 75 {}",
        recs[74].phase.name(),
        recs[75].phase.name()
    ))
}

fn paper_shapes() -> Check {
    let cfg = ModelConfig::paper();
    cfg.validate().map_err(e)?;
    let model = PolicyModel::new(&cfg, 0).map_err(e)?;
    let obs = Observation {
        views: cfg
            .views
            .iter()
            .map(|v| Tensor::zeros([v.channels, v.height, v.width]))
            .collect(),
        proprio: Tensor::zeros([6, 50]),
        tactile: Tensor::zeros([18, 120]),
    };
    let batch = Batch::from_observations(&cfg, &[&obs]).map_err(e)?;
    let actions = model.infer(&batch, Latent::Zero).map_err(e)?;
    ensure(actions.shape() == [1, 100, 50], || {
        format!("actions {:?}", actions.shape())
    })?;

    let mut bad = obs.clone();
    bad.proprio = Tensor::zeros([5, 50]);
    ensure(Batch::from_observations(&cfg, &[&bad]).is_err(), || {
        "proprio 5x50 accepted".into()
    })?;
    let mut bad = obs;
    bad.tactile = Tensor::zeros([18, 118]);
    ensure(Batch::from_observations(&cfg, &[&bad]).is_err(), || {
        "tactile 18x118 accepted".into()
    })?;

    let variants: [(&str, fn(&mut ModelConfig)); 5] = [
        ("chunk", |c| c.chunk = 99),
        ("proprio history", |c| c.proprio_history = 5),
        ("tactile channels", |c| c.tactile_channels = 59),
        ("proprio groups", |c| c.proprio_groups[4] = 3),
        ("tactile history", |c| c.tactile_history = 17),
    ];
    for (what, edit) in variants {
        let mut c = ModelConfig::paper();
        edit(&mut c);
        ensure(PolicyModel::new(&c, 0).is_err(), || {
            format!("altered {what} constructed")
        })?;
    }
    Ok(
        "infer (1, 100, 50) from proprio (6, 50) and tactile (18, 120); 5 altered shapes refused"
            .into(),
    )
}

fn loss_arithmetic() -> Check {
    let cfg = micro_config();
    let eps = generate_dataset(&cfg, 2, 0).map_err(e)?;
    let data = training_set(&cfg.model, &eps).map_err(e)?;
    let samples: Vec<&Sample> = data.samples.iter().take(4).collect();
    let batch = Batch::from_samples(&cfg.model, &samples).map_err(e)?;
    let objective = vitac::policy::Objective::new(
        &cfg.model,
        cfg.train.weights,
        cfg.train.lambdas,
        data.stats.action.clone(),
    );
    let noise = gaussian(batch.size, cfg.model.latent_dim, 3);
    let model = PolicyModel::new(&cfg.model, 1).map_err(e)?;
    for phase in [Phase::GroundTruth, Phase::Predicted] {
        let mut g = Graph::new();
        let b = model.params.bind(&mut g, true);
        let (total, bundle) = model
            .forward_train(&mut g, &b, &batch, &noise, phase, &objective)
            .map_err(e)?;
        let sum = composite_loss(&bundle.parts, cfg.train.weights);
        ensure(
            sum == bundle.total && g.value(total).item() == Some(sum),
            || format!("{} total {} vs parts {sum}", phase.name(), bundle.total),
        )?;
    }

    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros([4, cfg.model.latent_dim]));
    let kl = kl_diag_gaussian(&mut g, z, z).map_err(e)?;
    ensure(g.value(kl).item() == Some(0.0), || {
        "KL(0,0) is not zero".into()
    })?;

    let mut zero = PolicyModel::new(&cfg.model, 0).map_err(e)?;
    zero.params.fill(0.0);
    let mut batch = batch;
    let (h, p) = (cfg.model.chunk, cfg.model.action_dim());
    batch.actions = Some(Tensor::zeros([batch.size, h, p]));
    batch.future_tactile = Some(Tensor::zeros([
        batch.size,
        cfg.model.future_horizon,
        cfg.model.tactile_width(),
    ]));
    let objective = vitac::policy::Objective::new(
        &cfg.model,
        cfg.train.weights,
        cfg.train.lambdas,
        ChannelStats::identity(p),
    );
    let mut g = Graph::new();
    let b = zero.params.bind(&mut g, false);
    let (_, bundle) = zero
        .forward_train(&mut g, &b, &batch, &noise, Phase::Predicted, &objective)
        .map_err(e)?;
    let parts = bundle.parts;
    ensure(
        parts.joint == 0.0 && parts.tactile == Some(0.0) && parts.arm == 0.0,
        || format!("exact predictions give {parts:?}"),
    )?;
    Ok("total equals weighted parts bit for bit; KL(0,0) = 0; exact predictions give zero JA, tactile, arm".into())
}

struct DeskRun {
    check: Check,
    full_seed0: Option<f64>,
}

fn desk_learning(cfg: &Config, data: &vitac::training::TrainingSet) -> DeskRun {
    let run = || -> std::result::Result<(String, f64), String> {
        let t = Instant::now();
        let c = variant_config(cfg, Variant::Full, 0);
        let (out, ev) = train_and_evaluate(&c, data, &mut |_| {}).map_err(e)?;
        let recs = &out.log.records;
        let (first, last) = (recs[0].total, recs[recs.len() - 1].total);
        let held = generate_dataset(&c, c.data.heldout_episodes, c.data.heldout_seed).map_err(e)?;
        let untrained = PolicyModel::new(&c.model, c.train.seed).map_err(e)?;
        let l1 = future_tactile_l1(&out.model, &c.model, &out.stats, &held).map_err(e)?;
        let l1_untrained = future_tactile_l1(&untrained, &c.model, &out.stats, &held).map_err(e)?;
        let detail = format!(
            "loss {first:.4} -> {last:.4} ({:.1}x), held-out L1 {l1:.4} vs untrained {l1_untrained:.4}, {:.0}s",
            first / last,
            t.elapsed().as_secs_f64()
        );
        ensure(first >= 5.0 * last, || {
            format!("loss ratio too small: {detail}")
        })?;
        ensure(l1 < 0.5 * l1_untrained, || {
            format!("held-out L1 too large: {detail}")
        })?;
        // First verified run on the reference machine.
        let pins = [
            ("first loss", first, 5.2936),
            ("final loss", last, 0.0847),
            ("held-out L1", l1, 0.0880),
            ("untrained L1", l1_untrained, 0.8593),
        ];
        for (what, got, want) in pins {
            ensure((got - want).abs() <= 0.05 * want, || {
                format!("{what} {got:.4} drifted from fixture {want}: {detail}")
            })?;
        }
        Ok((detail, ev.aggregate.success_rate))
    };
    match run() {
        Ok((detail, rate)) => DeskRun {
            check: Ok(detail),
            full_seed0: Some(rate),
        },
        Err(msg) => DeskRun {
            check: Err(msg),
            full_seed0: None,
        },
    }
}

fn ablation_order(
    cfg: &Config,
    data: &vitac::training::TrainingSet,
    seeds: usize,
    full_seed0: Option<f64>,
) -> Check {
    let rates = |variant: Variant| -> std::result::Result<Vec<f64>, String> {
        (0..seeds as u64)
            .map(|k| match (variant, k, full_seed0) {
                (Variant::Full, 0, Some(r)) => Ok(r),
                _ => {
                    let c = variant_config(cfg, variant, cfg.train.seed + k);
                    let (_, ev) = train_and_evaluate(&c, data, &mut |_| {}).map_err(e)?;
                    Ok(ev.aggregate.success_rate)
                }
            })
            .collect()
    };
    let full = rates(Variant::Full)?;
    let without = rates(Variant::WithoutTouch)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (f, w) = (mean(&full), mean(&without));
    let detail = format!("{seeds} seeds: full {f:.2} {full:?}, without_touch {w:.2} {without:?}");
    ensure(f >= w, || format!("full below without_touch: {detail}"))?;
    ensure(w < 1.0, || {
        format!("without_touch always succeeds: {detail}")
    })?;
    Ok(detail)
}

fn determinism() -> Check {
    let mut cfg = micro_config();
    cfg.data.episodes = 6;
    cfg.data.heldout_episodes = 2;
    cfg.train.epochs = 2;
    let dir = tempfile::tempdir().map_err(e)?;
    let mut files = 0;
    let mut texts = Vec::new();
    for run in ["a", "b"] {
        let root = dir.path().join(run);
        write_dataset(&cfg, &root).map_err(e)?;
        let eps = generate_dataset(&cfg, cfg.data.episodes, cfg.data.seed).map_err(e)?;
        let data = training_set(&cfg.model, &eps).map_err(e)?;
        let out = train(&cfg, &data, Some(&root.join("run")), &mut |_| {}).map_err(e)?;
        texts.push(out.log.deterministic_text());
    }
    ensure(texts[0] == texts[1], || "metrics logs differ".into())?;
    let mut stack = vec![std::path::PathBuf::new()];
    while let Some(rel) = stack.pop() {
        for entry in std::fs::read_dir(dir.path().join("a").join(&rel)).map_err(e)? {
            let entry = entry.map_err(e)?;
            let rel = rel.join(entry.file_name());
            if entry.file_type().map_err(e)?.is_dir() {
                stack.push(rel);
                continue;
            }
            if rel.file_name().is_some_and(|n| n == "metrics.csv") {
                continue;
            }
            let a = std::fs::read(dir.path().join("a").join(&rel)).map_err(e)?;
            let b = std::fs::read(dir.path().join("b").join(&rel)).map_err(e)?;
            ensure(a == b, || format!("{} differs", rel.display()))?;
            files += 1;
        }
    }
    ensure(files >= 10, || format!("only {files} files compared"))?;
    Ok(format!(
        "{files} dataset and checkpoint files byte-identical; metrics logs identical without wall_ms"
    ))
}

fn episode_format() -> Check {
    let cfg = Config::default();
    let dims = EpisodeDims::from_model(&cfg.model);
    let mut checked = 0;
    for seed in 1..=20u64 {
        let ep = generate_episode(&cfg.world, &dims, seed);
        let bytes = ep.to_bytes();
        let back = Episode::from_bytes(&bytes).map_err(e)?;
        ensure(back == ep && back.to_bytes() == bytes, || {
            format!("seed {seed} round trip")
        })?;
        let replay = back.replay(&cfg.world);
        let replayed = Episode {
            frames: replay.frames,
            ..back.clone()
        };
        ensure(replayed.to_bytes() == bytes, || {
            format!("seed {seed} replay differs")
        })?;
        checked += 1;
    }
    let bytes = generate_episode(&cfg.world, &dims, 7).to_bytes();
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    ensure(
        matches!(Episode::from_bytes(&bad), Err(FormatError::BadMagic { .. })),
        || "bad magic accepted".into(),
    )?;
    let mut bad = bytes.clone();
    bad[8..12].copy_from_slice(&99u32.to_le_bytes());
    ensure(
        matches!(
            Episode::from_bytes(&bad),
            Err(FormatError::Version { found: 99, .. })
        ),
        || "unknown version accepted".into(),
    )?;
    ensure(
        matches!(
            Episode::from_bytes(&bytes[..bytes.len() - 8]),
            Err(FormatError::Truncated { .. })
        ),
        || "truncated file accepted".into(),
    )?;
    let mut long = bytes.clone();
    long.push(0);
    ensure(
        matches!(Episode::from_bytes(&long), Err(FormatError::Corrupt(_))),
        || "trailing bytes accepted".into(),
    )?;
    Ok(format!(
        "{checked} episodes round-trip and replay bit-exactly; magic, version, truncation, trailing bytes rejected"
    ))
}

fn main() -> ExitCode {
    let quick = std::env::args().any(|a| a == "--quick")
        || std::env::var("VITAC_QUICK").is_ok_and(|v| v != "0" && !v.is_empty());
    let seeds = if quick {
        2
    } else {
        Config::default().ablate.seeds
    };

    let mut results: Vec<(usize, &str, Check, f64)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Check| {
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => ("FAIL", d.as_str()),
        };
        println!("criterion {n} {name}: {tag} ({secs:.1}s) {detail}");
        results.push((n, name, r, secs));
    };

    run(1, "hns reference rows", &mut hns_references);
    run(2, "gradient integrity", &mut gradients);
    run(3, "curriculum boundary", &mut curriculum);
    run(4, "paper-scale shapes", &mut paper_shapes);
    run(5, "loss arithmetic", &mut loss_arithmetic);

    let cfg = Config::default();
    let desk = generate_dataset(&cfg, cfg.data.episodes, cfg.data.seed)
        .and_then(|eps| training_set(&cfg.model, &eps));
    let mut full_seed0 = None;
    match &desk {
        Ok(data) => {
            run(6, "desk-scale learning", &mut || {
                let d = desk_learning(&cfg, data);
                full_seed0 = d.full_seed0;
                d.check
            });
            run(7, "ablation ordering", &mut || {
                ablation_order(&cfg, data, seeds, full_seed0)
            });
        }
        Err(err) => {
            let msg = err.to_string();
            run(6, "desk-scale learning", &mut || Err(msg.clone()));
            run(7, "ablation ordering", &mut || Err(msg.clone()));
        }
    }
    run(8, "determinism", &mut determinism);
    run(9, "episode format", &mut episode_format);

    let failed = results.iter().filter(|r| r.2.is_err()).count();
    println!(
        "acceptance: {}/{} passed{}",
        results.len() - failed,
        results.len(),
        if quick { " (quick mode)" } else { "" }
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
