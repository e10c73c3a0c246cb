//! Losses, normalization, the optimizer, the curriculum and the epoch loop.

mod adam;
mod curriculum;
pub mod losses;
pub mod metrics;
pub mod normalize;
mod trainer;

pub use adam::Adam;
pub use curriculum::CurriculumSchedule;
pub use metrics::{EpochRecord, MetricsLog};
pub use normalize::{ChannelStats, NormStats};
pub use trainer::{load_policy, policy_checkpoint, train, TrainOutcome, TrainingSet};
