use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, EvalConfig, LatentMode, ModelConfig, WorldConfig};
use crate::hns::{aggregate, Aggregate, HnsReport, TaskScheme};
use crate::policy::{temporal_smooth, Batch, Latent, PolicyModel};
use crate::synthworld::dataset::{episode_seed, observation_at, TASK_ID};
use crate::synthworld::episode::tactile_rows;
use crate::synthworld::expert::expert_chunk;
use crate::synthworld::world::{
    cell_box, distance_to_box, initial_state, observe, step, EpisodeDims, Frame, WorldPhase,
    WorldState, INSERT_CHANNEL,
};
use crate::tensor::Tensor;
use crate::training::NormStats;
use crate::Result;

/// Anything that can propose an action chunk from the current state and the
/// observations so far.
pub trait Policy {
    /// Raw (unnormalized) `[len, P]` actions; `frames` ends with the current observation.
    fn plan(&mut self, state: &WorldState, frames: &[Frame]) -> Result<Tensor>;
}

pub struct ExpertPolicy {
    pub world: WorldConfig,
    pub dims: EpisodeDims,
    pub chunk: usize,
}

impl Policy for ExpertPolicy {
    fn plan(&mut self, state: &WorldState, _: &[Frame]) -> Result<Tensor> {
        Ok(expert_chunk(&self.world, &self.dims, state, self.chunk))
    }
}

/// Uniform moves within the step limit; inserts with probability `insert_rate`.
pub struct RandomPolicy {
    rng: ChaCha8Rng,
    chunk: usize,
    width: usize,
    max_step: f64,
    insert_rate: f64,
}

impl RandomPolicy {
    pub fn new(seed: u64, chunk: usize, width: usize, max_step: f64, insert_rate: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            chunk,
            width,
            max_step,
            insert_rate,
        }
    }
}

impl Policy for RandomPolicy {
    fn plan(&mut self, _: &WorldState, _: &[Frame]) -> Result<Tensor> {
        let mut out = vec![0.0; self.chunk * self.width];
        for row in out.chunks_exact_mut(self.width) {
            row[0] = self.rng.random_range(-self.max_step..=self.max_step);
            row[1] = self.rng.random_range(-self.max_step..=self.max_step);
            row[INSERT_CHANNEL] = f64::from(u8::from(self.rng.random_bool(self.insert_rate)));
        }
        Ok(Tensor::new([self.chunk, self.width], out)?)
    }
}

/// A trained model queried on the latest normalized observation window.
pub struct ModelPolicy<'a> {
    pub model: &'a PolicyModel,
    pub cfg: &'a ModelConfig,
    pub stats: &'a NormStats,
    pub latent: LatentMode,
    /// Base seed for sampled latents; call `k` uses `seed + k`.
    pub seed: u64,
    calls: u64,
}

impl<'a> ModelPolicy<'a> {
    pub fn new(
        model: &'a PolicyModel,
        cfg: &'a ModelConfig,
        stats: &'a NormStats,
        latent: LatentMode,
        seed: u64,
    ) -> Self {
        Self {
            model,
            cfg,
            stats,
            latent,
            seed,
            calls: 0,
        }
    }
}

impl Policy for ModelPolicy<'_> {
    fn plan(&mut self, _: &WorldState, frames: &[Frame]) -> Result<Tensor> {
        let rows = tactile_rows(frames);
        let obs = observation_at(self.cfg, self.stats, frames, &rows, frames.len() - 1)?;
        let batch = Batch::from_observations(self.cfg, &[&obs])?;
        let latent = match self.latent {
            LatentMode::Zero => Latent::Zero,
            LatentMode::Sampled => Latent::Sampled(self.seed.wrapping_add(self.calls)),
        };
        self.calls += 1;
        let out = self.model.infer(&batch, latent)?;
        let chunk = out.reshape([self.cfg.chunk, self.cfg.action_dim()])?;
        Ok(self.stats.action.denormalized(&chunk))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    /// Observation before each executed action, then the final one.
    pub frames: Vec<Frame>,
    pub actions: Vec<Vec<f64>>,
    pub final_state: WorldState,
    /// Closest approach to the rendered target cell.
    pub min_cell_distance: f64,
    /// Distance to the target when the insert command was given.
    pub insert_distance: Option<f64>,
    pub success: bool,
}

/// Closed-loop execution: every `replan_every` steps the policy proposes a
/// chunk, which is blended with the unexecuted rest of the previous one.
pub fn rollout(
    world: &WorldConfig,
    dims: &EpisodeDims,
    policy: &mut dyn Policy,
    seed: u64,
    replan_every: usize,
    blend: usize,
) -> Result<Trajectory> {
    let mut s = initial_state(world, seed);
    let cell = cell_box(world, s.target);
    let mut frames = vec![observe(world, dims, &s)];
    let mut actions = Vec::new();
    let mut min_cell = distance_to_box(s.pos, cell);
    let mut insert_distance = None;
    let mut chunk: Option<Tensor> = None;
    let mut idx = 0;
    while s.phase != WorldPhase::Done && actions.len() < world.horizon {
        let stale = chunk
            .as_ref()
            .is_none_or(|c| idx >= replan_every || idx >= c.shape()[0]);
        if stale {
            let new = policy.plan(&s, &frames)?;
            let tail = match &chunk {
                Some(c) if idx < c.shape()[0] => {
                    let w = c.shape()[1];
                    Some(Tensor::new(
                        [c.shape()[0] - idx, w],
                        c.data()[idx * w..].to_vec(),
                    )?)
                }
                _ => None,
            };
            chunk = Some(temporal_smooth(tail.as_ref(), &new, blend)?);
            idx = 0;
        }
        let a = chunk.as_ref().expect("planned above").row(idx).to_vec();
        idx += 1;
        let (n, f) = step(world, dims, &s, &a);
        if n.phase == WorldPhase::Done && insert_distance.is_none() {
            insert_distance = Some(n.distance());
        }
        s = n;
        min_cell = min_cell.min(distance_to_box(s.pos, cell));
        frames.push(f);
        actions.push(a);
    }
    Ok(Trajectory {
        seed,
        frames,
        actions,
        final_state: s,
        min_cell_distance: min_cell,
        insert_distance,
        success: s.phase == WorldPhase::Done && s.distance() < world.tolerance,
    })
}

fn band(value: f64, bands: [f64; 3], unit: f64, within: impl Fn(f64, f64) -> bool) -> f64 {
    match bands.iter().position(|b| within(value, b * unit)) {
        Some(i) => (3 - i) as f64,
        None => 0.0,
    }
}

/// Stage scores from measured distances.
///
/// Reach scores 3, 2, 1 when the closest approach to the target cell is at
/// most `coarse_bands × q`. Insert scores 3, 2, 1 when the distance at
/// insertion is below `fine_bands × τ`; without an insertion the final
/// distance is used and the score is capped at 1.
pub fn stage_scores(world: &WorldConfig, eval: &EvalConfig, t: &Trajectory) -> [f64; 2] {
    let reach = band(
        t.min_cell_distance,
        eval.coarse_bands,
        world.quantization,
        |v, b| v <= b,
    );
    let d = t
        .insert_distance
        .unwrap_or_else(|| t.final_state.distance());
    let mut insert = band(d, eval.fine_bands, world.tolerance, |v, b| v < b);
    if t.insert_distance.is_none() {
        insert = insert.min(1.0);
    }
    [reach, insert]
}

/// Result of `runs` rollouts on seeds `eval.seed ^ r`.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub trajectories: Vec<Trajectory>,
    pub reports: Vec<HnsReport>,
    pub aggregate: Aggregate,
}

/// Rolls out a fresh policy per run and scores every run.
pub fn evaluate<'p>(
    cfg: &Config,
    label: &str,
    make: &mut dyn FnMut(u64) -> Box<dyn Policy + 'p>,
) -> Result<Evaluation> {
    let scheme = TaskScheme::builtin(TASK_ID)?;
    let dims = EpisodeDims::from_model(&cfg.model);
    let e = &cfg.eval;
    let mut trajectories = Vec::with_capacity(e.runs);
    let mut reports = Vec::with_capacity(e.runs);
    for r in 0..e.runs {
        let seed = episode_seed(e.seed, r);
        let mut p = make(seed);
        let t = rollout(&cfg.world, &dims, p.as_mut(), seed, e.replan_every, e.blend)?;
        let scores = stage_scores(&cfg.world, e, &t);
        reports.push(scheme.score(format!("{label}/{seed}"), &scores)?);
        trajectories.push(t);
    }
    let aggregate = aggregate(label, &reports);
    Ok(Evaluation {
        trajectories,
        reports,
        aggregate,
    })
}
