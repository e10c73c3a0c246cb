use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vitac::ablation::{sweep, table};
use vitac::checkpoint::{Checkpoint, FormatError};
use vitac::config::{ModelConfig, Variant};
use vitac::gradcheck::{run_suites, MODEL_COORDS};
use vitac::hns::{aggregate, parse_score_sheet, report_table, score_sheet, TaskScheme};
use vitac::policy::PolicyModel;
use vitac::synthworld::dataset::TASK_ID;
use vitac::synthworld::{
    evaluate, fit_stats, future_tactile_l1, load_or_generate, load_split, training_set,
    write_dataset, EpisodeDims, ExpertPolicy, ModelPolicy, Policy, RandomPolicy, Split,
};
use vitac::tensor::Checker;
use vitac::training::{load_policy, train, NormStats};
use vitac::{Config, Error, Result};

/// Exit status for a configuration error.
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser)]
#[command(
    name = "vitac",
    version,
    about = "Visuo-tactile chunked policies on a synthetic insertion world"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file; defaults apply to absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory (defaults to paths.out, or paths.data for datagen).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed override: data.seed for datagen, train.seed for train and
    /// ablate, eval.seed for eval.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of evaluation rollouts (eval.runs).
    #[arg(long, global = true)]
    runs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate expert episodes and their manifests.
    Datagen,
    /// Train a policy on a generated dataset.
    Train {
        /// Dataset directory (defaults to paths.data).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Roll a policy out in closed loop and score it.
    Eval {
        /// Checkpoint file, or one of `expert`, `random`, `untrained`.
        #[arg(long)]
        checkpoint: String,
        /// Dataset directory for normalization statistics of `untrained`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train and evaluate every variant on the same data.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Training seeds per variant (ablate.seeds).
        #[arg(long)]
        seeds: Option<usize>,
        /// Comma-separated variant names; all six by default.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
    },
    /// Finite-difference gradient checks on the micro model.
    Gradcheck {
        /// Sampled parameter coordinates for the full-model suite.
        #[arg(long, default_value_t = MODEL_COORDS)]
        coords: usize,
        /// Corrupt the backward rule of this op (checks the checker).
        #[arg(long, value_name = "OP")]
        fault: Option<String>,
    },
    /// Score a sheet of per-stage judgments.
    Hns {
        /// One run per line: task, then stage scores.
        sheet: Option<PathBuf>,
        /// Task scheme; defaults to the task named on the first row.
        #[arg(long)]
        task: Option<String>,
        /// Print the reference rows shipped with every scheme instead.
        #[arg(long)]
        references: bool,
    },
}

fn load_config(c: &Common) -> Result<Config> {
    let mut cfg = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for kv in &c.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            Error::Config(vitac::config::ConfigError::Malformed {
                line: 0,
                text: kv.clone(),
            })
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(r) = c.runs {
        cfg.eval.runs = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn datagen(cfg: &mut Config, c: &Common) -> Result<()> {
    if let Some(s) = c.seed {
        cfg.data.seed = s;
    }
    let root = c
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.paths.data));
    let (train, held) = write_dataset(cfg, &root)?;
    for m in [&train, &held] {
        let n = m.entries.len();
        let ok = m.entries.iter().filter(|e| e.success).count();
        let frames: usize = m.entries.iter().map(|e| e.len).sum();
        println!(
            "{}: {n} episodes, {frames} frames, {ok}/{n} successful",
            m.split.name()
        );
    }
    println!(
        "wrote {} (data_digest={})",
        root.display(),
        train.data_digest
    );
    Ok(())
}

fn data_root(cfg: &Config, data: &Option<PathBuf>) -> PathBuf {
    data.clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.paths.data))
}

fn cmd_train(cfg: &mut Config, c: &Common, data: &Option<PathBuf>) -> Result<()> {
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    let root = data_root(cfg, data);
    let (_, episodes) = load_split(cfg, &root, Split::Train)?;
    let set = training_set(&cfg.model, &episodes)?;
    let out = c
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.paths.out));
    println!("config_digest={}", cfg.digest());
    println!(
        "training {} on {} samples",
        cfg.model.variant,
        set.samples.len()
    );
    let result = train(cfg, &set, Some(&out), &mut |r| {
        let tactile = r
            .parts
            .tactile
            .map_or("NA".to_string(), |t| format!("{t:.6}"));
        println!(
            "epoch {:>4} {:<12} total {:.6} kl {:.6} joint {:.6} tactile {} arm {:.6}",
            r.epoch,
            r.phase.name(),
            r.total,
            r.parts.kl,
            r.parts.joint,
            tactile,
            r.parts.arm
        );
    })?;
    if result.model.variant().has_tactile_head() && split_exists(&root, Split::Heldout) {
        let (_, held) = load_split(cfg, &root, Split::Heldout)?;
        if !held.is_empty() {
            let l1 = future_tactile_l1(&result.model, &cfg.model, &result.stats, &held)?;
            println!("held-out future tactile L1 {l1:.6}");
        }
    }
    println!("wrote {}", out.join("checkpoint.bin").display());
    Ok(())
}

fn split_exists(root: &Path, split: Split) -> bool {
    split
        .dir(root)
        .join(vitac::synthworld::dataset::MANIFEST)
        .exists()
}

fn cmd_eval(cfg: &mut Config, c: &Common, checkpoint: &str, data: &Option<PathBuf>) -> Result<()> {
    if let Some(s) = c.seed {
        cfg.eval.seed = s;
    }
    let cfg = &*cfg;
    let dims = EpisodeDims::from_model(&cfg.model);
    let loaded: Option<(PolicyModel, NormStats)> = match checkpoint {
        "expert" | "random" => None,
        "untrained" => {
            let root = data_root(cfg, data);
            let eps = load_or_generate(cfg, Some(&root), Split::Train)?;
            Some((
                PolicyModel::new(&cfg.model, cfg.train.seed)?,
                fit_stats(&cfg.model, &eps),
            ))
        }
        path => Some(load_policy(cfg, &Checkpoint::load(Path::new(path))?)?),
    };
    let label = match checkpoint {
        "expert" | "random" | "untrained" => checkpoint,
        _ => "model",
    };
    let ev = evaluate(cfg, label, &mut |seed| -> Box<dyn Policy + '_> {
        match (checkpoint, &loaded) {
            ("expert", _) => Box::new(ExpertPolicy {
                world: cfg.world.clone(),
                dims: dims.clone(),
                chunk: cfg.model.chunk,
            }),
            ("random", _) => Box::new(RandomPolicy::new(
                seed,
                cfg.model.chunk,
                cfg.model.action_dim(),
                cfg.world.max_step,
                0.05,
            )),
            (_, Some((m, s))) => {
                Box::new(ModelPolicy::new(m, &cfg.model, s, cfg.eval.latent, seed))
            }
            (_, None) => unreachable!("model checkpoints are loaded above"),
        }
    })?;
    let scheme = TaskScheme::builtin(TASK_ID)?;
    let mut report = format!(
        "# config_digest={}\n# checkpoint={checkpoint}\n",
        cfg.digest()
    );
    report.push_str(&report_table(&scheme, &ev.reports, &[ev.aggregate.clone()]));
    print!("{report}");
    let out = c
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.paths.out));
    write(&out.join("eval_report.csv"), &report)?;
    println!(
        "success rate {:.4} mean HNS {:.4} over {} runs",
        ev.aggregate.success_rate, ev.aggregate.mean_hns, ev.aggregate.runs
    );
    Ok(())
}

fn cmd_ablate(
    cfg: &mut Config,
    c: &Common,
    data: &Option<PathBuf>,
    seeds: Option<usize>,
    variants: &[Variant],
) -> Result<()> {
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    let seeds = seeds.unwrap_or(cfg.ablate.seeds);
    let variants = if variants.is_empty() {
        &Variant::ALL[..]
    } else {
        variants
    };
    let root = data_root(cfg, data);
    let eps = load_or_generate(cfg, Some(&root), Split::Train)?;
    let set = training_set(&cfg.model, &eps)?;
    let runs = sweep(cfg, &set, variants, seeds, &mut |r| {
        println!(
            "{:<16} seed {:>3} loss {:.6} -> {:.6} hns {:.4} success {:.4}",
            r.variant.name(),
            r.seed,
            r.first_loss,
            r.final_loss,
            r.aggregate.mean_hns,
            r.aggregate.success_rate
        );
    })?;
    let text = table(&cfg.digest(), &cfg.data_digest(), &runs);
    print!("{text}");
    let out = c
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.paths.out));
    write(&out.join("ablation.csv"), &text)
}

fn cmd_gradcheck(coords: usize, fault: &Option<String>) -> Result<bool> {
    let mut checker = Checker::default();
    if let Some(op) = fault {
        checker = checker.with_fault(op.clone());
    }
    let report = run_suites(&ModelConfig::micro(), &checker, coords, 0)?;
    print!("{}", report.to_text());
    Ok(report.passed())
}

fn cmd_hns(
    c: &Common,
    sheet: &Option<PathBuf>,
    task: &Option<String>,
    references: bool,
) -> Result<()> {
    if references {
        let names: Vec<String> = match task {
            Some(t) => vec![t.clone()],
            None => TaskScheme::builtin_names().map(str::to_string).collect(),
        };
        println!("task,label,recomputed,printed,agrees");
        for name in names {
            let scheme = TaskScheme::builtin(&name)?;
            for r in scheme.reference_checks()? {
                println!(
                    "{name},{},{:.4},{:.2},{}",
                    r.label,
                    r.recomputed,
                    r.printed,
                    r.agrees()
                );
            }
        }
        return Ok(());
    }
    let path = sheet.as_ref().ok_or_else(|| {
        Error::Incompatible("hns needs a score sheet path, or --references".into())
    })?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = parse_score_sheet(&text)?;
    let name = match (task, rows.first()) {
        (Some(t), _) => t.clone(),
        (None, Some(r)) => r.task.clone(),
        (None, None) => {
            return Err(Error::Incompatible(format!(
                "{} has no runs",
                path.display()
            )))
        }
    };
    let scheme = TaskScheme::builtin(&name)?;
    let reports = score_sheet(&scheme, &rows)?;
    let agg = aggregate("mean", &reports);
    let text = report_table(&scheme, &reports, &[agg]);
    print!("{text}");
    if let Some(out) = &c.out {
        write(&out.join("hns_report.csv"), &text)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Gradcheck { coords, fault } => {
            let ok = cmd_gradcheck(*coords, fault)?;
            return Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_VERIFY)
            });
        }
        Command::Hns {
            sheet,
            task,
            references,
        } => cmd_hns(&cli.common, sheet, task, *references)?,
        cmd => {
            let mut cfg = load_config(&cli.common)?;
            match cmd {
                Command::Datagen => datagen(&mut cfg, &cli.common)?,
                Command::Train { data } => cmd_train(&mut cfg, &cli.common, data)?,
                Command::Eval { checkpoint, data } => {
                    cmd_eval(&mut cfg, &cli.common, checkpoint, data)?
                }
                Command::Ablate {
                    data,
                    seeds,
                    variants,
                } => cmd_ablate(&mut cfg, &cli.common, data, *seeds, variants)?,
                Command::Gradcheck { .. } | Command::Hns { .. } => unreachable!("handled above"),
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Format(FormatError::DigestMismatch { .. }) => EXIT_VERIFY,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
