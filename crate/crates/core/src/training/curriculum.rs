use crate::policy::Phase;
use crate::{Error, Result};

/// Ground-truth future tactile for the first `ceil(switch_fraction · total)`
/// epochs, the model's own forecast afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurriculumSchedule {
    pub total_epochs: usize,
    pub switch_fraction: f64,
}

impl CurriculumSchedule {
    pub const DEFAULT_FRACTION: f64 = 0.75;

    pub fn new(total_epochs: usize, switch_fraction: f64) -> Self {
        Self {
            total_epochs,
            switch_fraction,
        }
    }

    /// First epoch trained on predicted tactile.
    pub fn switch_epoch(&self) -> usize {
        // The small slack keeps products like 0.7·10 = 7.000000000000001 from rounding up.
        let x = self.switch_fraction * self.total_epochs as f64;
        ((x - 1e-9).ceil().max(0.0) as usize).min(self.total_epochs)
    }

    pub fn phase(&self, epoch: usize) -> Result<Phase> {
        if epoch >= self.total_epochs {
            return Err(Error::Incompatible(format!(
                "epoch {epoch} is outside a {}-epoch schedule",
                self.total_epochs
            )));
        }
        Ok(if epoch < self.switch_epoch() {
            Phase::GroundTruth
        } else {
            Phase::Predicted
        })
    }
}
