use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::{Checkpoint, FormatError};
use crate::config::Config;
use crate::policy::{Batch, Objective, Phase, PolicyModel, Sample};
use crate::tensor::{Graph, Tensor};
use crate::training::losses::LossParts;
use crate::training::metrics::{EpochRecord, MetricsLog};
use crate::training::normalize::NormStats;
use crate::training::{Adam, CurriculumSchedule};
use crate::{Error, Result};

/// Normalized samples plus the statistics that normalized them.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub samples: Vec<Sample>,
    pub stats: NormStats,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: PolicyModel,
    pub stats: NormStats,
    pub log: MetricsLog,
}

/// Parameters and normalization statistics, tagged with the model digest.
pub fn policy_checkpoint(model: &PolicyModel, stats: &NormStats, model_digest: &str) -> Checkpoint {
    let mut blobs: Vec<(String, Tensor)> = model
        .params
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    blobs.extend(stats.to_blobs());
    Checkpoint {
        model_digest: model_digest.to_string(),
        blobs,
    }
}

/// Rebuilds a policy for `cfg` from a checkpoint written under the same model config.
pub fn load_policy(cfg: &Config, ckpt: &Checkpoint) -> Result<(PolicyModel, NormStats)> {
    let digest = cfg.model_digest();
    if ckpt.model_digest != digest {
        return Err(FormatError::DigestMismatch {
            expected: digest,
            found: ckpt.model_digest.clone(),
        }
        .into());
    }
    let mut model = PolicyModel::new(&cfg.model, 0)?;
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id).to_string();
        let t = ckpt
            .get(&name)
            .ok_or_else(|| FormatError::Corrupt(format!("missing parameter {name}")))?;
        if t.shape() != model.params.get(id).shape() {
            return Err(FormatError::Corrupt(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                t.shape(),
                model.params.get(id).shape()
            ))
            .into());
        }
        *model.params.get_mut(id) = t.clone();
    }
    let stats = NormStats::from_checkpoint(ckpt)?;
    Ok((model, stats))
}

#[derive(Default)]
struct Running {
    n: usize,
    total: f64,
    kl: f64,
    joint: f64,
    tactile: Option<f64>,
    arm: f64,
}

impl Running {
    fn add(&mut self, size: usize, total: f64, p: &LossParts) {
        let w = size as f64;
        self.n += size;
        self.total += w * total;
        self.kl += w * p.kl;
        self.joint += w * p.joint;
        self.arm += w * p.arm;
        if let Some(t) = p.tactile {
            *self.tactile.get_or_insert(0.0) += w * t;
        }
    }

    fn mean(&self) -> (f64, LossParts) {
        let n = self.n.max(1) as f64;
        (
            self.total / n,
            LossParts {
                kl: self.kl / n,
                joint: self.joint / n,
                tactile: self.tactile.map(|t| t / n),
                arm: self.arm / n,
            },
        )
    }
}

/// Trains a fresh model. With `out_dir`, writes `metrics.csv`, periodic
/// `checkpoint_eNNNN.bin` files and the final `checkpoint.bin`.
pub fn train(
    cfg: &Config,
    data: &TrainingSet,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.samples.is_empty() {
        return Err(Error::Incompatible("training set is empty".into()));
    }
    let t = &cfg.train;
    let mut model = PolicyModel::new(&cfg.model, t.seed)?;
    let mut opt = Adam::new(&model.params, t.lr, t.beta1, t.beta2, t.eps);
    let schedule = CurriculumSchedule::new(t.epochs, t.switch_fraction);
    let objective = Objective::new(&cfg.model, t.weights, t.lambdas, data.stats.action.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    rng.set_stream(1);
    let mut log = MetricsLog::new(cfg.digest());
    let model_digest = cfg.model_digest();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut order: Vec<usize> = (0..data.samples.len()).collect();

    for epoch in 0..t.epochs {
        let start = Instant::now();
        let phase = if model.variant().has_tactile_head() {
            schedule.phase(epoch)?
        } else {
            Phase::GroundTruth
        };
        order.shuffle(&mut rng);
        let mut run = Running::default();
        for (k, idx) in order.chunks(t.batch).enumerate() {
            let samples: Vec<&Sample> = idx.iter().map(|&i| &data.samples[i]).collect();
            let batch = Batch::from_samples(&cfg.model, &samples)?;
            let noise = Tensor::from_fn([batch.size, cfg.model.latent_dim], |_| {
                StandardNormal.sample(&mut rng)
            });
            let mut g = Graph::new();
            let b = model.params.bind(&mut g, true);
            let (loss, bundle) =
                model.forward_train(&mut g, &b, &batch, &noise, phase, &objective)?;
            if !bundle.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss is {} at epoch {epoch}, batch {k}",
                    bundle.total
                )));
            }
            g.backward(loss)?;
            let grads: Vec<Option<&[f64]>> = b.vars().iter().map(|&v| g.grad(v)).collect();
            opt.step(&mut model.params, &grads)?;
            run.add(batch.size, bundle.total, &bundle.parts);
        }
        let (total, parts) = run.mean();
        let rec = EpochRecord {
            epoch,
            phase,
            total,
            parts,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&rec);
        log.records.push(rec);
        if let Some(dir) = out_dir {
            let p = dir.join("metrics.csv");
            std::fs::write(&p, log.to_csv()).map_err(|e| Error::io(&p, e))?;
            if t.checkpoint_every > 0
                && (epoch + 1) % t.checkpoint_every == 0
                && epoch + 1 < t.epochs
            {
                policy_checkpoint(&model, &data.stats, &model_digest)
                    .save(&dir.join(format!("checkpoint_e{:04}.bin", epoch + 1)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        policy_checkpoint(&model, &data.stats, &model_digest).save(&dir.join("checkpoint.bin"))?;
    }
    Ok(TrainOutcome {
        model,
        stats: data.stats.clone(),
        log,
    })
}
