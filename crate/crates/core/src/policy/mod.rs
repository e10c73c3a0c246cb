//! The CVAE action model with cross-modal fusion and tactile forecasting.
//!
//! Training path for the full variant:
//!
//! ```text
//! style encoder([cls, proprio, actions]) -> (mu, logvar) -> z
//! visual patches, tactile frames, proprio frames -> tokens
//! fusion 1 -> tactile head(memory = [z, proprio, fused]) -> future tactile
//! fusion 2 -> action head(memory = [z, proprio, fused, future tokens]) -> action chunk
//! ```
//!
//! Lower rungs of the [`Variant`] ladder drop pieces of this pipeline.

mod batch;

pub use batch::{patchify, temporal_smooth, Batch, Observation, Sample};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{ModelConfig, Variant};
use crate::fusion::{naive_token_fuse, CrossModalFusion, ModalityTokens};
use crate::nn::{
    add_positions, AttentionConfig, Bound, DecoderBlock, EncoderBlock, Init, LayerNorm, Linear,
    ParamId, Params,
};
use crate::tensor::{Graph, Tensor, Var};
use crate::training::losses::{arm_loss, kl_diag_gaussian, l1, LossBundle, LossParts, PlanarFk};
use crate::training::normalize::ChannelStats;
use crate::{Error, Result};

/// Which future tactile tokens condition action generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    GroundTruth,
    Predicted,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::GroundTruth => "ground_truth",
            Phase::Predicted => "predicted",
        }
    }
}

/// Where the style latent comes from.
#[derive(Clone, Copy, Debug)]
pub enum Latent<'a> {
    /// Encode the expert chunk and reparameterize with this `[B, Z]` noise.
    Posterior(&'a Tensor),
    /// `z = 0`.
    Zero,
    /// `z ~ N(0, I)` from a seeded generator.
    Sampled(u64),
}

/// `mu + exp(logvar / 2)·noise`.
pub fn reparameterize(
    g: &mut Graph,
    mu: Var,
    logvar: Var,
    noise: Var,
) -> crate::tensor::Result<Var> {
    let half = g.mul(logvar, 0.5)?;
    let sd = g.exp(half)?;
    let e = g.mul(sd, noise)?;
    g.add(mu, e)
}

/// Standard normal `[rows, cols]` from a seeded generator.
pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([rows, cols], |_| StandardNormal.sample(&mut rng))
}

/// Learned query tokens read out through a decoder stack.
#[derive(Clone, Debug)]
struct Head {
    queries: ParamId,
    blocks: Vec<DecoderBlock>,
    norm: LayerNorm,
    out: Linear,
}

impl Head {
    fn new(
        p: &mut Params,
        init: &mut Init,
        name: &str,
        cfg: &ModelConfig,
        len: usize,
        d_out: usize,
    ) -> Self {
        let att = AttentionConfig::new(cfg.dim, cfg.heads).expect("validated config");
        Self {
            queries: p.push(
                format!("{name}.queries"),
                init.uniform(&[len, cfg.dim], cfg.dim),
            ),
            blocks: (0..cfg.decoder_layers)
                .map(|i| DecoderBlock::new(p, init, &format!("{name}.dec{i}"), att))
                .collect(),
            norm: LayerNorm::new(p, &format!("{name}.norm"), cfg.dim),
            out: Linear::new(p, init, &format!("{name}.out"), cfg.dim, d_out),
        }
    }

    fn forward(&self, g: &mut Graph, b: &Bound, batch: usize, memory: Var) -> Result<Var> {
        let q = b.var(self.queries);
        let mut x = g.tile(q, batch)?;
        x = add_positions(g, x)?;
        for blk in &self.blocks {
            x = blk.forward(g, b, x, memory)?;
        }
        let x = self.norm.forward(g, b, x)?;
        Ok(self.out.forward(g, b, x)?)
    }
}

#[derive(Clone, Debug)]
struct StyleEncoder {
    cls: ParamId,
    proprio_in: Linear,
    action_in: Linear,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
    out: Linear,
}

/// Token embeddings of one batch of observations, each `[B, L, D]`.
#[derive(Clone, Copy, Debug)]
pub struct Embedded {
    pub visual: Var,
    pub tactile: Option<Var>,
    pub proprio: Var,
}

/// Raw outputs of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub mu: Option<Var>,
    pub logvar: Option<Var>,
    /// `[B, H_a, P]`, normalized.
    pub actions: Var,
    /// `[B, H_f, 2C]`, normalized; present when the variant has a tactile head.
    pub tactile: Option<Var>,
}

/// Memory lengths seen by each head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryLayout {
    pub tactile_head: Option<usize>,
    pub action_head: usize,
}

#[derive(Clone, Debug)]
pub struct PolicyModel {
    pub cfg: ModelConfig,
    pub params: Params,
    style: StyleEncoder,
    visual_in: Vec<Linear>,
    proprio_in: Linear,
    tactile_in: Option<Linear>,
    latent_in: Linear,
    fusion: Option<CrossModalFusion>,
    action_fusion: Option<CrossModalFusion>,
    tactile_head: Option<Head>,
    future_in: Option<Linear>,
    action_head: Head,
}

impl PolicyModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let cfg = cfg.clone();
        let variant = cfg.variant;
        let (d, pd, tw) = (cfg.dim, cfg.action_dim(), cfg.tactile_width());
        let att = AttentionConfig::new(d, cfg.heads).map_err(Error::Incompatible)?;
        let mut p = Params::new();
        let mut init = Init::new(seed);
        let init = &mut init;

        let style = StyleEncoder {
            cls: p.push("style.cls", init.uniform(&[1, d], d)),
            proprio_in: Linear::without_bias(&mut p, init, "style.proprio_in", pd, d),
            action_in: Linear::without_bias(&mut p, init, "style.action_in", pd, d),
            blocks: (0..cfg.encoder_layers)
                .map(|i| EncoderBlock::new(&mut p, init, &format!("style.enc{i}"), att))
                .collect(),
            norm: LayerNorm::new(&mut p, "style.norm", d),
            out: Linear::without_bias(&mut p, init, "style.out", d, 2 * cfg.latent_dim),
        };
        let visual_in = cfg
            .views
            .iter()
            .enumerate()
            .map(|(i, v)| {
                Linear::without_bias(&mut p, init, &format!("embed.view{i}"), cfg.patch_dim(v), d)
            })
            .collect();
        let proprio_in = Linear::without_bias(&mut p, init, "embed.proprio", pd, d);
        let tactile_in = variant
            .uses_tactile()
            .then(|| Linear::without_bias(&mut p, init, "embed.tactile", tw, d));
        let latent_in = Linear::without_bias(&mut p, init, "embed.latent", cfg.latent_dim, d);
        let fusion = variant
            .uses_cross_attention()
            .then(|| CrossModalFusion::new(&mut p, init, "fusion1", att));
        let action_fusion = (variant == Variant::Full && !cfg.share_fusion)
            .then(|| CrossModalFusion::new(&mut p, init, "fusion2", att));
        let tactile_head = variant
            .has_tactile_head()
            .then(|| Head::new(&mut p, init, "tactile_head", &cfg, cfg.future_horizon, tw));
        let future_in = variant
            .feeds_back_tactile()
            .then(|| Linear::without_bias(&mut p, init, "embed.future", tw, d));
        let action_head = Head::new(&mut p, init, "action_head", &cfg, cfg.chunk, pd);
        Ok(Self {
            cfg,
            params: p,
            style,
            visual_in,
            proprio_in,
            tactile_in,
            latent_in,
            fusion,
            action_fusion,
            tactile_head,
            future_in,
            action_head,
        })
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn memory_layout(&self) -> MemoryLayout {
        let c = &self.cfg;
        let obs = c.visual_tokens()
            + if c.variant.uses_tactile() {
                c.tactile_history
            } else {
                0
            };
        let base = 1 + c.proprio_history + obs;
        MemoryLayout {
            tactile_head: c.variant.has_tactile_head().then_some(base),
            action_head: base
                + if c.variant.feeds_back_tactile() {
                    c.future_horizon
                } else {
                    0
                },
        }
    }

    /// Posterior `(mu, logvar)`, each `[B, Z]`, from actions `[B, H_a, P]`
    /// and proprio `[B, H_p, P]`.
    pub fn encode_style(
        &self,
        g: &mut Graph,
        b: &Bound,
        actions: Var,
        proprio: Var,
    ) -> Result<(Var, Var)> {
        let s = &self.style;
        let batch = g.shape(actions)[0];
        let cls = g.tile(b.var(s.cls), batch)?;
        let p = s.proprio_in.forward(g, b, proprio)?;
        let a = s.action_in.forward(g, b, actions)?;
        let mut x = g.concat(&[cls, p, a], 1)?;
        x = add_positions(g, x)?;
        for blk in &s.blocks {
            x = blk.forward(g, b, x)?;
        }
        let x = s.norm.forward(g, b, x)?;
        let first = g.slice(x, 1, 0, 1)?;
        let first = g.reshape(first, [batch, self.cfg.dim])?;
        let stats = s.out.forward(g, b, first)?;
        let z = self.cfg.latent_dim;
        Ok((g.slice(stats, 1, 0, z)?, g.slice(stats, 1, z, 2 * z)?))
    }

    pub fn embed_observations(&self, g: &mut Graph, b: &Bound, batch: &Batch) -> Result<Embedded> {
        let mut views = Vec::with_capacity(batch.patches.len());
        for (lin, patches) in self.visual_in.iter().zip(&batch.patches) {
            let x = g.constant(patches.clone());
            views.push(lin.forward(g, b, x)?);
        }
        let visual = if views.len() == 1 {
            views[0]
        } else {
            g.concat(&views, 1)?
        };
        let visual = add_positions(g, visual)?;
        let tactile = match &self.tactile_in {
            Some(lin) => {
                let x = g.constant(batch.tactile.clone());
                let t = lin.forward(g, b, x)?;
                Some(add_positions(g, t)?)
            }
            None => None,
        };
        let p = g.constant(batch.proprio.clone());
        let p = self.proprio_in.forward(g, b, p)?;
        let proprio = add_positions(g, p)?;
        Ok(Embedded {
            visual,
            tactile,
            proprio,
        })
    }

    /// `z: [B, Z]` -> `[B, 1, D]`.
    pub fn latent_token(&self, g: &mut Graph, b: &Bound, z: Var) -> Result<Var> {
        let batch = g.shape(z)[0];
        let z = g.reshape(z, [batch, 1, self.cfg.latent_dim])?;
        Ok(self.latent_in.forward(g, b, z)?)
    }

    /// Observation tokens for the tactile head (`site = 0`) or the action head (`site = 1`).
    fn observation_tokens(
        &self,
        g: &mut Graph,
        b: &Bound,
        e: &Embedded,
        site: usize,
    ) -> Result<Var> {
        let Some(tactile) = e.tactile else {
            return Ok(e.visual);
        };
        let m = ModalityTokens {
            visual: e.visual,
            tactile,
        };
        let f = match (site, &self.fusion, &self.action_fusion) {
            (_, None, _) => return Ok(naive_token_fuse(g, m)?),
            (1, Some(_), Some(second)) => second,
            (_, Some(first), _) => first,
        };
        Ok(f.fuse(g, b, m)?)
    }

    /// Future tactile `[B, H_f, 2C]` from memory `[z, proprio, fused]`.
    pub fn predict_future_tactile(
        &self,
        g: &mut Graph,
        b: &Bound,
        z_tok: Var,
        proprio: Var,
        fused: Var,
    ) -> Result<Var> {
        let head = self.tactile_head.as_ref().ok_or_else(|| {
            Error::Incompatible(format!("variant {} has no tactile head", self.variant()))
        })?;
        let batch = g.shape(z_tok)[0];
        let memory = g.concat(&[z_tok, proprio, fused], 1)?;
        head.forward(g, b, batch, memory)
    }

    /// Projects future tactile values `[B, H_f, 2C]` into tokens.
    pub fn future_tokens(&self, g: &mut Graph, b: &Bound, tactile: Var) -> Result<Var> {
        let lin = self.future_in.as_ref().ok_or_else(|| {
            Error::Incompatible(format!(
                "variant {} does not consume future tactile",
                self.variant()
            ))
        })?;
        let t = lin.forward(g, b, tactile)?;
        Ok(add_positions(g, t)?)
    }

    /// Action chunk `[B, H_a, P]` from memory `[z, proprio, fused, future?]`.
    pub fn generate_actions(
        &self,
        g: &mut Graph,
        b: &Bound,
        z_tok: Var,
        proprio: Var,
        fused: Var,
        future: Option<Var>,
    ) -> Result<Var> {
        let batch = g.shape(z_tok)[0];
        let mut parts = vec![z_tok, proprio, fused];
        parts.extend(future);
        let memory = g.concat(&parts, 1)?;
        self.action_head.forward(g, b, batch, memory)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        batch: &Batch,
        latent: Latent,
        phase: Phase,
    ) -> Result<Forward> {
        let v = self.variant();
        if phase == Phase::Predicted && !v.has_tactile_head() {
            return Err(Error::Incompatible(format!(
                "variant {v} has no tactile head, so it cannot train on predicted tactile"
            )));
        }
        let n = batch.size;
        let (mu, logvar, z) = match latent {
            Latent::Posterior(noise) => {
                let actions = batch.actions.as_ref().ok_or_else(|| {
                    Error::Incompatible("posterior latent needs expert actions".into())
                })?;
                let a = g.constant(actions.clone());
                let p = g.constant(batch.proprio.clone());
                let (mu, lv) = self.encode_style(g, b, a, p)?;
                let eps = g.constant(noise.clone());
                let z = reparameterize(g, mu, lv, eps)?;
                (Some(mu), Some(lv), z)
            }
            Latent::Zero => (
                None,
                None,
                g.constant(Tensor::zeros([n, self.cfg.latent_dim])),
            ),
            Latent::Sampled(seed) => (
                None,
                None,
                g.constant(gaussian(n, self.cfg.latent_dim, seed)),
            ),
        };
        let e = self.embed_observations(g, b, batch)?;
        let z_tok = self.latent_token(g, b, z)?;
        let fused = self.observation_tokens(g, b, &e, 0)?;
        let tactile = if v.has_tactile_head() {
            Some(self.predict_future_tactile(g, b, z_tok, e.proprio, fused)?)
        } else {
            None
        };
        let future = if v.feeds_back_tactile() {
            let values = match phase {
                Phase::Predicted => tactile.expect("variant has a tactile head"),
                Phase::GroundTruth => {
                    let t = batch.future_tactile.as_ref().ok_or_else(|| {
                        Error::Incompatible(
                            "ground-truth phase needs future tactile targets".into(),
                        )
                    })?;
                    g.constant(t.clone())
                }
            };
            Some(self.future_tokens(g, b, values)?)
        } else {
            None
        };
        let fused2 = if self.action_fusion.is_some() {
            self.observation_tokens(g, b, &e, 1)?
        } else {
            fused
        };
        let actions = self.generate_actions(g, b, z_tok, e.proprio, fused2, future)?;
        Ok(Forward {
            mu,
            logvar,
            actions,
            tactile,
        })
    }

    /// Weighted training loss for one batch. The returned var is the total,
    /// ready for backward.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        b: &Bound,
        batch: &Batch,
        noise: &Tensor,
        phase: Phase,
        objective: &Objective,
    ) -> Result<(Var, LossBundle)> {
        let out = self.forward(g, b, batch, Latent::Posterior(noise), phase)?;
        let (Some(actions), Some(future)) = (&batch.actions, &batch.future_tactile) else {
            return Err(Error::Incompatible("training batch lacks targets".into()));
        };
        let w = objective.weights;
        let kl = kl_diag_gaussian(
            g,
            out.mu.expect("posterior"),
            out.logvar.expect("posterior"),
        )?;
        let target = g.constant(actions.clone());
        let joint = l1(g, out.actions, target)?;
        let tactile = match out.tactile {
            Some(pred) => {
                let t = g.constant(future.clone());
                Some(l1(g, pred, t)?)
            }
            None => None,
        };
        let pred_raw = objective.action_stats.denormalize_var(g, out.actions)?;
        let target_raw = objective.action_stats.denormalize_var(g, target)?;
        let arm = arm_loss(g, &objective.fk, pred_raw, target_raw, objective.lambdas)?;

        let mut total = g.mul(kl, w[0])?;
        let t = g.mul(joint, w[1])?;
        total = g.add(total, t)?;
        if let Some(tac) = tactile {
            let t = g.mul(tac, w[2])?;
            total = g.add(total, t)?;
        }
        let t = g.mul(arm, w[3])?;
        total = g.add(total, t)?;

        let item = |g: &Graph, v: Var| g.value(v).item().expect("scalar loss");
        let parts = LossParts {
            kl: item(g, kl),
            joint: item(g, joint),
            tactile: tactile.map(|t| item(g, t)),
            arm: item(g, arm),
        };
        let fk_violations = objective
            .fk
            .violations(g.value(pred_raw).data(), self.cfg.action_dim());
        Ok((
            total,
            LossBundle {
                total: item(g, total),
                parts,
                fk_violations,
            },
        ))
    }

    /// Action chunks `[B, H_a, P]` without the style encoder. Variants that
    /// feed back tactile use their own forecast.
    pub fn infer(&self, batch: &Batch, latent: Latent) -> Result<Tensor> {
        if matches!(latent, Latent::Posterior(_)) {
            return Err(Error::Incompatible(
                "inference does not use the style encoder".into(),
            ));
        }
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let phase = if self.variant().has_tactile_head() {
            Phase::Predicted
        } else {
            Phase::GroundTruth
        };
        let out = self.forward(&mut g, &b, batch, latent, phase)?;
        Ok(g.value(out.actions).clone())
    }

    /// Forecast future tactile `[B, H_f, 2C]` at inference.
    pub fn infer_tactile(&self, batch: &Batch, latent: Latent) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &b, batch, latent, Phase::Predicted)?;
        let t = out.tactile.ok_or_else(|| {
            Error::Incompatible(format!("variant {} has no tactile head", self.variant()))
        })?;
        Ok(g.value(t).clone())
    }
}

/// Everything the loss needs besides model outputs.
#[derive(Clone, Debug)]
pub struct Objective {
    pub weights: [f64; 4],
    pub lambdas: [f64; 2],
    pub fk: PlanarFk,
    /// Undoes action normalization before forward kinematics.
    pub action_stats: ChannelStats,
}

impl Objective {
    pub fn new(
        cfg: &ModelConfig,
        weights: [f64; 4],
        lambdas: [f64; 2],
        action_stats: ChannelStats,
    ) -> Self {
        Self {
            weights,
            lambdas,
            fk: PlanarFk::from_config(cfg),
            action_stats,
        }
    }
}

#[cfg(test)]
mod tests;
