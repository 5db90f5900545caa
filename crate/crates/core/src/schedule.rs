use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Keep-probability schedule `α(t)` of the absorbing forward process: a token
/// survives to time `t` with probability `α(t)` and is otherwise replaced by MASK.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskSchedule {
    #[default]
    Linear,
}

impl MaskSchedule {
    pub fn alpha(self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::InvalidArgument(format!("t = {t} outside (0, 1]")));
        }
        Ok(match self {
            MaskSchedule::Linear => 1.0 - t,
        })
    }

    pub fn mask_probability(self, t: f64) -> Result<f64> {
        Ok(1.0 - self.alpha(t)?)
    }
}

/// Free-function form of [`MaskSchedule::alpha`].
pub fn alpha(schedule: MaskSchedule, t: f64) -> Result<f64> {
    schedule.alpha(t)
}
