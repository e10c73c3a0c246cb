//! Finite-difference verification suites over ops, layers, fusion, losses
//! and the full model.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{ModelConfig, Variant};
use crate::fusion::{naive_token_fuse, CrossModalFusion, ModalityTokens};
use crate::nn::{
    AttentionConfig, Bound, DecoderBlock, EncoderBlock, FeedForward, Init, LayerNorm, Linear,
    MultiHeadAttention, Params,
};
use crate::policy::{Batch, Objective, Observation, Phase, PolicyModel, Sample};
use crate::tensor::{Checker, GradCheck, Graph, ReduceOp, Tensor, TensorError, UnaryOp, Var};
use crate::training::losses::{arm_loss, kl_diag_gaussian, l1, PlanarFk};
use crate::training::ChannelStats;
use crate::{Error, Result};

pub const COMPONENT_RTOL: f64 = 1e-4;
pub const MODEL_RTOL: f64 = 1e-3;
pub const MODEL_COORDS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Ops,
    Layers,
    Fusion,
    Losses,
    Model,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Ops,
        Suite::Layers,
        Suite::Fusion,
        Suite::Losses,
        Suite::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Ops => "ops",
            Suite::Layers => "layers",
            Suite::Fusion => "fusion",
            Suite::Losses => "losses",
            Suite::Model => "model",
        }
    }

    pub fn rtol(self) -> f64 {
        match self {
            Suite::Model => MODEL_RTOL,
            _ => COMPONENT_RTOL,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub suite: Suite,
    pub case: String,
    pub check: GradCheck,
}

impl CaseResult {
    pub fn passes(&self) -> bool {
        self.check.passes(self.suite.rtol())
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub eps: f64,
    pub fault: Option<String>,
    pub cases: Vec<CaseResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passes)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passes())
    }

    /// Worst case of `suite`.
    pub fn worst(&self, suite: Suite) -> Option<&CaseResult> {
        self.cases
            .iter()
            .filter(|c| c.suite == suite)
            .max_by(|a, b| a.check.max_error.total_cmp(&b.check.max_error))
    }

    /// One line per suite with its worst case, then one per failing case.
    pub fn to_text(&self) -> String {
        let mut s = format!("# eps={:e}", self.eps);
        if let Some(f) = &self.fault {
            write!(s, " fault={f}").unwrap();
        }
        s.push('\n');
        s.push_str("suite,rtol,cases,worst_case,max_rel_error,status\n");
        for suite in Suite::ALL {
            let Some(w) = self.worst(suite) else { continue };
            let n = self.cases.iter().filter(|c| c.suite == suite).count();
            let ok = self
                .cases
                .iter()
                .filter(|c| c.suite == suite)
                .all(CaseResult::passes);
            writeln!(
                s,
                "{},{:e},{n},{},{:.3e},{}",
                suite.name(),
                suite.rtol(),
                w.case,
                w.check.max_error,
                if ok { "pass" } else { "FAIL" }
            )
            .unwrap();
        }
        for c in self.failures() {
            writeln!(
                s,
                "failed {}/{}: analytic {:.6e} numeric {:.6e} at input {} index {}",
                c.suite.name(),
                c.case,
                c.check.analytic,
                c.check.numeric,
                c.check.worst.0,
                c.check.worst.1
            )
            .unwrap();
        }
        s
    }
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(rng))
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = StandardNormal.sample(rng);
        0.5 + z.abs()
    })
}

/// Contracts `y` with fixed pseudo-random weights so every output entry matters.
fn project(g: &mut Graph, y: Var) -> crate::tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(g.value(y).len() as u64);
    let w = g.constant(normal(g.shape(y), &mut rng));
    let p = g.mul(y, w)?;
    g.sum(p)
}

struct Runner<'a> {
    checker: &'a Checker,
    rng: ChaCha8Rng,
    cases: Vec<CaseResult>,
}

impl Runner<'_> {
    fn run(
        &mut self,
        suite: Suite,
        case: &str,
        inputs: &[Tensor],
        f: impl Fn(&mut Graph, &[Var]) -> crate::tensor::Result<Var>,
    ) -> Result<()> {
        let check = self.checker.check(
            |g, v| {
                let y = f(g, v)?;
                project(g, y)
            },
            inputs,
        )?;
        self.cases.push(CaseResult {
            suite,
            case: case.into(),
            check,
        });
        Ok(())
    }

    /// Checks a module's parameters and one input together.
    fn run_module(
        &mut self,
        suite: Suite,
        case: &str,
        params: &Params,
        extra: Vec<Tensor>,
        f: impl Fn(&mut Graph, &Bound, &[Var]) -> crate::tensor::Result<Var>,
    ) -> Result<()> {
        let n = params.len();
        let mut inputs = params.tensors().to_vec();
        inputs.extend(extra);
        self.run(suite, case, &inputs, |g, v| {
            let b = Bound::from_vars(v[..n].to_vec());
            f(g, &b, &v[n..])
        })
    }
}

fn ops(r: &mut Runner) -> Result<()> {
    let x = normal(&[2, 3], &mut r.rng);
    let pos = positive(&[2, 3], &mut r.rng);
    for op in UnaryOp::ALL {
        let input = if matches!(op, UnaryOp::Ln | UnaryOp::Sqrt) {
            pos.clone()
        } else {
            x.clone()
        };
        r.run(Suite::Ops, op.name(), &[input], |g, v| g.unary(op, v[0]))?;
    }
    let y = normal(&[2, 3], &mut r.rng);
    r.run(Suite::Ops, "add", &[x.clone(), y.clone()], |g, v| {
        g.add(v[0], v[1])
    })?;
    r.run(Suite::Ops, "sub", &[x.clone(), y.clone()], |g, v| {
        g.sub(v[0], v[1])
    })?;
    r.run(Suite::Ops, "mul", &[x.clone(), y.clone()], |g, v| {
        g.mul(v[0], v[1])
    })?;
    r.run(Suite::Ops, "div", &[x.clone(), pos.clone()], |g, v| {
        g.div(v[0], v[1])
    })?;
    let a = normal(&[2, 3, 4], &mut r.rng);
    let b = normal(&[4, 5], &mut r.rng);
    r.run(Suite::Ops, "matmul", &[a.clone(), b], |g, v| {
        g.matmul(v[0], v[1])
    })?;
    r.run(Suite::Ops, "transpose", &[a.clone()], |g, v| {
        g.transpose(v[0])
    })?;
    r.run(Suite::Ops, "reshape", &[a.clone()], |g, v| {
        g.reshape(v[0], [6, 4])
    })?;
    r.run(Suite::Ops, "softmax", &[a.clone()], |g, v| {
        g.softmax(v[0], 2)
    })?;
    r.run(Suite::Ops, "slice", &[a.clone()], |g, v| {
        g.slice(v[0], 1, 1, 3)
    })?;
    r.run(Suite::Ops, "tile", &[x.clone()], |g, v| g.tile(v[0], 3))?;
    r.run(Suite::Ops, "concat", &[x.clone(), y], |g, v| {
        g.concat(&[v[0], v[1]], 1)
    })?;
    for op in [ReduceOp::Sum, ReduceOp::Mean, ReduceOp::Max] {
        r.run(Suite::Ops, op.name(), &[a.clone()], |g, v| {
            g.reduce(op, v[0], Some(1))
        })?;
    }
    let gain = positive(&[4], &mut r.rng);
    let bias = normal(&[4], &mut r.rng);
    r.run(Suite::Ops, "layer_norm", &[a, gain, bias], |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    })?;
    Ok(())
}

fn attention_config(dim: usize, heads: usize) -> Result<AttentionConfig> {
    AttentionConfig::new(dim, heads).map_err(Error::Incompatible)
}

fn layers(r: &mut Runner, seed: u64) -> Result<()> {
    let (d, heads) = (8, 2);
    let cfg = attention_config(d, heads)?;
    let mut init = Init::new(seed);
    let x = normal(&[2, 3, d], &mut r.rng);
    let mem = normal(&[2, 4, d], &mut r.rng);

    let mut p = Params::new();
    let lin = Linear::new(&mut p, &mut init, "lin", d, 5);
    r.run_module(Suite::Layers, "linear", &p, vec![x.clone()], |g, b, v| {
        lin.forward(g, b, v[0])
    })?;

    let mut p = Params::new();
    let ln = LayerNorm::new(&mut p, "ln", d);
    for (i, v) in p.get_mut(ln.gain).data_mut().iter_mut().enumerate() {
        *v += 0.1 * i as f64;
    }
    r.run_module(
        Suite::Layers,
        "layer_norm",
        &p,
        vec![x.clone()],
        |g, b, v| ln.forward(g, b, v[0]),
    )?;

    let mut p = Params::new();
    let ff = FeedForward::new(&mut p, &mut init, "ff", d);
    r.run_module(
        Suite::Layers,
        "feed_forward",
        &p,
        vec![x.clone()],
        |g, b, v| ff.forward(g, b, v[0]),
    )?;

    let mut p = Params::new();
    let mha = MultiHeadAttention::new(&mut p, &mut init, "mha", cfg);
    r.run_module(
        Suite::Layers,
        "attention",
        &p,
        vec![x.clone(), mem.clone()],
        |g, b, v| mha.forward(g, b, v[0], v[1]),
    )?;

    let mut p = Params::new();
    let enc = EncoderBlock::new(&mut p, &mut init, "enc", cfg);
    r.run_module(
        Suite::Layers,
        "encoder_block",
        &p,
        vec![x.clone()],
        |g, b, v| enc.forward(g, b, v[0]),
    )?;

    let mut p = Params::new();
    let dec = DecoderBlock::new(&mut p, &mut init, "dec", cfg);
    r.run_module(
        Suite::Layers,
        "decoder_block",
        &p,
        vec![x, mem],
        |g, b, v| dec.forward(g, b, v[0], v[1]),
    )?;
    Ok(())
}

fn fusion(r: &mut Runner, seed: u64) -> Result<()> {
    let d = 8;
    let mut init = Init::new(seed ^ 0x5a);
    let visual = normal(&[2, 5, d], &mut r.rng);
    let tactile = normal(&[2, 3, d], &mut r.rng);
    let mut p = Params::new();
    let fuse = CrossModalFusion::new(&mut p, &mut init, "fuse", attention_config(d, 2)?);
    r.run_module(
        Suite::Fusion,
        "cross_attention",
        &p,
        vec![visual.clone(), tactile.clone()],
        |g, b, v| {
            fuse.fuse(
                g,
                b,
                ModalityTokens {
                    visual: v[0],
                    tactile: v[1],
                },
            )
        },
    )?;
    r.run(Suite::Fusion, "naive_concat", &[visual, tactile], |g, v| {
        naive_token_fuse(
            g,
            ModalityTokens {
                visual: v[0],
                tactile: v[1],
            },
        )
    })?;
    Ok(())
}

fn losses(r: &mut Runner, cfg: &ModelConfig) -> Result<()> {
    let mu = normal(&[3, 4], &mut r.rng);
    let lv = normal(&[3, 4], &mut r.rng);
    r.run(Suite::Losses, "kl", &[mu, lv], |g, v| {
        kl_diag_gaussian(g, v[0], v[1])
    })?;
    let p = normal(&[2, 5], &mut r.rng);
    let t = normal(&[2, 5], &mut r.rng);
    r.run(Suite::Losses, "l1", &[p, t], |g, v| l1(g, v[0], v[1]))?;
    let fk = PlanarFk::from_config(cfg);
    let w = cfg.action_dim();
    let pred = normal(&[2, 3, w], &mut r.rng);
    let target = normal(&[2, 3, w], &mut r.rng);
    r.run(Suite::Losses, "arm_fk", &[pred, target], |g, v| {
        arm_loss(g, &fk, v[0], v[1], [1.0, 1.0])
    })?;
    let stats = ChannelStats {
        mean: normal(&[w], &mut r.rng).data().to_vec(),
        std: positive(&[w], &mut r.rng).data().to_vec(),
    };
    let x = normal(&[2, w], &mut r.rng);
    r.run(Suite::Losses, "denormalize", &[x], |g, v| {
        stats.denormalize_var(g, v[0])
    })?;
    Ok(())
}

fn random_batch(cfg: &ModelConfig, n: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let samples: Vec<Sample> = (0..n)
        .map(|_| Sample {
            obs: Observation {
                views: cfg
                    .views
                    .iter()
                    .map(|v| normal(&[v.channels, v.height, v.width], rng))
                    .collect(),
                proprio: normal(&[cfg.proprio_history, cfg.action_dim()], rng),
                tactile: normal(&[cfg.tactile_history, cfg.tactile_width()], rng),
            },
            actions: normal(&[cfg.chunk, cfg.action_dim()], rng),
            future_tactile: normal(&[cfg.future_horizon, cfg.tactile_width()], rng),
        })
        .collect();
    let refs: Vec<&Sample> = samples.iter().collect();
    Batch::from_samples(cfg, &refs)
}

fn to_tensor_error(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "model",
            reason: other.to_string(),
        },
    }
}

/// Composite training loss of a Full model in both curriculum phases, over
/// `coords` sampled parameter coordinates.
fn model(r: &mut Runner, cfg: &ModelConfig, coords: usize, seed: u64) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.variant = Variant::Full;
    let model = PolicyModel::new(&cfg, seed)?;
    let batch = random_batch(&cfg, 2, &mut r.rng)?;
    let noise = normal(&[2, cfg.latent_dim], &mut r.rng);
    let objective = Objective::new(
        &cfg,
        [10.0, 1.0, 1.0, 1.0],
        [1.0, 1.0],
        ChannelStats::identity(cfg.action_dim()),
    );
    let inputs = model.params.tensors().to_vec();
    let flat: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    let mut picked: Vec<(usize, usize)> = sample(&mut r.rng, flat.len(), coords.min(flat.len()))
        .into_iter()
        .map(|k| flat[k])
        .collect();
    picked.sort_unstable();
    for phase in [Phase::GroundTruth, Phase::Predicted] {
        let f = |g: &mut Graph, v: &[Var]| {
            let b = Bound::from_vars(v.to_vec());
            model
                .forward_train(g, &b, &batch, &noise, phase, &objective)
                .map(|(loss, _)| loss)
                .map_err(to_tensor_error)
        };
        let check = r.checker.check_coords(f, &inputs, &picked)?;
        r.cases.push(CaseResult {
            suite: Suite::Model,
            case: format!("composite_loss_{}", phase.name()),
            check,
        });
    }
    Ok(())
}

/// Runs every suite. The model suite uses `cfg` (normally the micro config).
pub fn run_suites(
    cfg: &ModelConfig,
    checker: &Checker,
    model_coords: usize,
    seed: u64,
) -> Result<GradcheckReport> {
    let mut r = Runner {
        checker,
        rng: ChaCha8Rng::seed_from_u64(seed),
        cases: Vec::new(),
    };
    ops(&mut r)?;
    layers(&mut r, seed)?;
    fusion(&mut r, seed)?;
    losses(&mut r, cfg)?;
    model(&mut r, cfg, model_coords, seed)?;
    Ok(GradcheckReport {
        eps: checker.eps,
        fault: checker.fault.clone(),
        cases: r.cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_suites_pass() {
        let rep = run_suites(&ModelConfig::micro(), &Checker::default(), MODEL_COORDS, 0).unwrap();
        assert!(rep.passed(), "{}", rep.to_text());
        assert!(Suite::ALL.iter().all(|s| rep.worst(*s).is_some()));
        let text = rep.to_text();
        assert!(text.starts_with("# eps=1e-5\n"));
        assert_eq!(
            rep.cases
                .iter()
                .filter(|c| c.suite == Suite::Model)
                .map(|c| c.check.coords_checked)
                .sum::<usize>(),
            40
        );
    }

    #[test]
    fn corrupted_rule_is_named() {
        let rep = run_suites(
            &ModelConfig::micro(),
            &Checker::default().with_fault("softmax"),
            4,
            0,
        )
        .unwrap();
        assert!(!rep.passed());
        let failed: Vec<&str> = rep.failures().map(|c| c.case.as_str()).collect();
        assert!(failed.contains(&"softmax"), "{failed:?}");
        assert!(failed.contains(&"attention"));
        assert!(rep.to_text().contains("fault=softmax"));
    }
}
