//! Curriculum factor that shifts weight from the clean-set loss to the
//! noisy-set and entropy terms as training progresses.
//!
//! Each step multiplies gamma by `1 - alpha * exp(-L_n / L_{n-1})`, where `L`
//! is the clean-set cross-entropy. A rising clean loss shrinks the decrement;
//! a falling one enlarges it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor on the previous loss in the ratio.
pub const RATIO_DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    gamma: f64,
    prev_clean_loss: Option<f64>,
    alpha: f64,
    iteration: u64,
}

impl CurriculumState {
    pub fn new(gamma0: f64, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma0) {
            return Err(Error::Validation(format!("gamma0 must be in [0,1], got {gamma0}")));
        }
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Validation(format!("alpha must be in [0,1), got {alpha}")));
        }
        Ok(Self {
            gamma: gamma0,
            prev_clean_loss: None,
            alpha,
            iteration: 0,
        })
    }

    /// A state that never moves: gamma stays at `gamma` for every step.
    pub fn pinned(gamma: f64) -> Result<Self> {
        Self::new(gamma, 0.0)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn prev_clean_loss(&self) -> Option<f64> {
        self.prev_clean_loss
    }

    /// Advances the recurrence with the current clean-set loss.
    ///
    /// The first call only records the loss. Returns the updated gamma.
    pub fn gamma_step(&mut self, clean_loss_now: f64) -> Result<f64> {
        if !(clean_loss_now >= 0.0 && clean_loss_now.is_finite()) {
            return Err(Error::Validation(format!(
                "clean loss must be finite and >= 0, got {clean_loss_now}"
            )));
        }
        if let Some(prev) = self.prev_clean_loss {
            let ratio = clean_loss_now / prev.max(RATIO_DENOM_FLOOR);
            let factor = 1.0 - self.alpha * (-ratio).exp();
            self.gamma = (self.gamma * factor).clamp(0.0, 1.0);
        }
        self.prev_clean_loss = Some(clean_loss_now);
        self.iteration += 1;
        Ok(self.gamma)
    }
}
