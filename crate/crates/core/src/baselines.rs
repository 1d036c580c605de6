//! Reference objectives with the same per-position interface as the
//! adaptive target: label smoothing, focal loss and the confidence penalty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{entropy, Scalar};

/// Floor applied to `p_t` before taking its log in the focal loss.
pub const FOCAL_LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub ls_smoothing: f64,
    pub fl_gamma: f64,
    pub cp_weight: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            ls_smoothing: 0.1,
            fl_gamma: 2.0,
            cp_weight: 0.05,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ls_smoothing) {
            return Err(Error::config("baselines.ls_smoothing", "must lie in [0, 1)"));
        }
        if !(self.fl_gamma >= 0.0) {
            return Err(Error::config("baselines.fl_gamma", "must be non-negative"));
        }
        if !(self.cp_weight >= 0.0) {
            return Err(Error::config("baselines.cp_weight", "must be non-negative"));
        }
        Ok(())
    }
}

/// One-hot target mixed with a uniform distribution over the whole
/// vocabulary (target included).
pub fn ls_target<T: Scalar>(target: usize, vocab: usize, smoothing: T) -> Vec<T> {
    let share = smoothing / T::from_usize_lossy(vocab);
    let mut q = vec![share; vocab];
    q[target] = T::one() - smoothing + share;
    q
}

/// `-(1 - p_t)^gamma * ln(max(p_t, 1e-12))`.
pub fn focal_loss<T: Scalar>(p: &[T], target: usize, gamma: T) -> T {
    let pt = p[target];
    let lp = pt.max(T::from_f64_lossy(FOCAL_LOG_FLOOR)).ln();
    -(T::one() - pt).powf(gamma) * lp
}

/// `CE(p, target) - weight * H(p)`, entropy in nats.
pub fn confidence_penalty_loss<T: Scalar>(p: &[T], target: usize, weight: T) -> T {
    let ce = -p[target].ln();
    ce - weight * entropy(p)
}
