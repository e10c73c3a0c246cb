//! Variant sweeps on a shared dataset.

use std::fmt::Write as _;

use crate::config::{Config, Variant};
use crate::hns::Aggregate;
use crate::synthworld::{evaluate, Evaluation, ModelPolicy};
use crate::training::{train, EpochRecord, TrainOutcome, TrainingSet};
use crate::Result;

/// One trained and evaluated (variant, seed) pair.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub variant: Variant,
    /// Training seed: `train.seed + k` for the k-th seed of the sweep.
    pub seed: u64,
    pub first_loss: f64,
    pub final_loss: f64,
    pub aggregate: Aggregate,
}

/// Per-variant means over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: usize,
    pub final_loss: f64,
    pub mean_hns: f64,
    pub success_rate: f64,
}

/// `cfg` with the variant and training seed replaced.
pub fn variant_config(cfg: &Config, variant: Variant, seed: u64) -> Config {
    let mut c = cfg.clone();
    c.model.variant = variant;
    c.train.seed = seed;
    c
}

/// Trains `cfg` on `data` and rolls the result out `eval.runs` times.
pub fn train_and_evaluate(
    cfg: &Config,
    data: &TrainingSet,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(TrainOutcome, Evaluation)> {
    let out = train(cfg, data, None, on_epoch)?;
    let ev = evaluate(cfg, cfg.model.variant.name(), &mut |s| {
        Box::new(ModelPolicy::new(
            &out.model,
            &cfg.model,
            &out.stats,
            cfg.eval.latent,
            s,
        ))
    })?;
    Ok((out, ev))
}

/// Every variant in `variants` for `seeds` consecutive training seeds.
/// `progress` sees each run as it finishes.
pub fn sweep(
    cfg: &Config,
    data: &TrainingSet,
    variants: &[Variant],
    seeds: usize,
    progress: &mut dyn FnMut(&AblationRun),
) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::with_capacity(variants.len() * seeds);
    for &variant in variants {
        for k in 0..seeds {
            let c = variant_config(cfg, variant, cfg.train.seed + k as u64);
            let (out, ev) = train_and_evaluate(&c, data, &mut |_| {})?;
            let recs = &out.log.records;
            let run = AblationRun {
                variant,
                seed: c.train.seed,
                first_loss: recs.first().map_or(f64::NAN, |r| r.total),
                final_loss: recs.last().map_or(f64::NAN, |r| r.total),
                aggregate: ev.aggregate,
            };
            progress(&run);
            runs.push(run);
        }
    }
    Ok(runs)
}

/// Means per variant, in the order variants first appear.
pub fn summarize(runs: &[AblationRun]) -> Vec<AblationRow> {
    let mut order: Vec<Variant> = Vec::new();
    for r in runs {
        if !order.contains(&r.variant) {
            order.push(r.variant);
        }
    }
    order
        .into_iter()
        .map(|v| {
            let rs: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == v).collect();
            let n = rs.len() as f64;
            AblationRow {
                variant: v,
                seeds: rs.len(),
                final_loss: rs.iter().map(|r| r.final_loss).sum::<f64>() / n,
                mean_hns: rs.iter().map(|r| r.aggregate.mean_hns).sum::<f64>() / n,
                success_rate: rs.iter().map(|r| r.aggregate.success_rate).sum::<f64>() / n,
            }
        })
        .collect()
}

/// Comma-separated table with the config and dataset digests in the header.
pub fn table(config_digest: &str, data_digest: &str, runs: &[AblationRun]) -> String {
    let mut s = format!("# config_digest={config_digest}\n# data_digest={data_digest}\n");
    s.push_str("variant,seeds,final_loss,mean_hns,success_rate\n");
    for r in summarize(runs) {
        writeln!(
            s,
            "{},{},{:.6},{:.4},{:.4}",
            r.variant.name(),
            r.seeds,
            r.final_loss,
            r.mean_hns,
            r.success_rate
        )
        .expect("string write");
    }
    s.push_str("\nvariant,seed,first_loss,final_loss,mean_hns,success_rate\n");
    for r in runs {
        writeln!(
            s,
            "{},{},{:.6},{:.6},{:.4},{:.4}",
            r.variant.name(),
            r.seed,
            r.first_loss,
            r.final_loss,
            r.aggregate.mean_hns,
            r.aggregate.success_rate
        )
        .expect("string write");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::synthworld::{generate_dataset, training_set};

    #[test]
    fn sweep_covers_ladder_in_order() {
        let mut cfg = Config::default();
        cfg.model = ModelConfig::micro();
        cfg.train.epochs = 1;
        cfg.train.batch = 16;
        cfg.eval.runs = 2;
        cfg.eval.replan_every = 4;
        let eps = generate_dataset(&cfg, 3, 0).unwrap();
        let data = training_set(&cfg.model, &eps).unwrap();
        let mut seen = 0;
        let runs = sweep(&cfg, &data, &Variant::ALL, 2, &mut |_| seen += 1).unwrap();
        assert_eq!(seen, 12);
        let rows = summarize(&runs);
        let names: Vec<Variant> = rows.iter().map(|r| r.variant).collect();
        assert_eq!(names, Variant::ALL);
        assert!(rows.iter().all(|r| r.seeds == 2));
        assert_eq!(runs[0].seed, 0);
        assert_eq!(runs[1].seed, 1);
        let t = table("c", "d", &runs);
        assert_eq!(t.lines().filter(|l| l.starts_with("full,")).count(), 3);
    }
}
