//! A 2-D insertion world whose fine phase needs touch.
//!
//! The target cell is rendered coarsely, so vision alone brings the
//! effector only to within a cell. The tactile bump reveals the offset to
//! the exact target once the effector is close.

pub mod dataset;
pub mod episode;
pub mod expert;
pub mod rollout;
pub mod world;

pub use dataset::{
    episode_seed, fit_stats, future_tactile_l1, generate_dataset, generate_episode,
    load_or_generate, load_split, training_set, write_dataset, Manifest, Split,
};
pub use episode::Episode;
pub use expert::{expert_action, expert_chunk};
pub use rollout::{
    evaluate, rollout, stage_scores, Evaluation, ExpertPolicy, ModelPolicy, Policy, RandomPolicy,
    Trajectory,
};
pub use world::{initial_state, observe, step, EpisodeDims, Frame, WorldPhase, WorldState};
