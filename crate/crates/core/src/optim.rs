//! SGD with momentum, weight decay, and a warmup/decay learning-rate
//! schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

/// Learning-rate schedule applied on top of the base rate.
///
/// `WarmupLinearDecay` ramps linearly from 0 to the base rate over the
/// warmup steps, then decays linearly back to 0 at `total_steps`.
/// `Constant` holds the base rate at every step; procedures that run at
/// a fixed small rate use it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    WarmupLinearDecay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdHyper {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub schedule: LrSchedule,
}

impl Default for SgdHyper {
    fn default() -> Self {
        SgdHyper {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            total_steps: 1500,
            warmup_fraction: 0.01,
            schedule: LrSchedule::WarmupLinearDecay,
        }
    }
}

impl SgdHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidConfig("total_steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidConfig(format!(
                "warmup_fraction must lie in [0,1), got {}",
                self.warmup_fraction
            )));
        }
        Ok(())
    }

    /// Number of warmup steps: the configured fraction of total steps,
    /// rounded, and at least 1 whenever the fraction is positive.
    pub fn warmup_steps(&self) -> usize {
        if self.warmup_fraction == 0.0 {
            0
        } else {
            ((self.warmup_fraction * self.total_steps as f64).round() as usize).max(1)
        }
    }
}

/// Optimizer state: per-parameter velocities plus the step counter.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub hyper: SgdHyper,
    pub step: usize,
    velocity: IndexMap<String, Tensor>,
}

impl OptimState {
    pub fn new(hyper: SgdHyper, params: &IndexMap<String, Tensor>) -> Result<Self> {
        hyper.validate()?;
        let velocity = params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
            .collect();
        Ok(OptimState { hyper, step: 0, velocity })
    }
}

/// Learning rate at the state's current step counter.
pub fn lr_at_step(state: &OptimState) -> f64 {
    let h = &state.hyper;
    match h.schedule {
        LrSchedule::Constant => h.learning_rate,
        LrSchedule::WarmupLinearDecay => {
            let k = state.step.min(h.total_steps) as f64;
            let total = h.total_steps as f64;
            let warmup = h.warmup_steps() as f64;
            if k <= warmup && warmup > 0.0 {
                h.learning_rate * k / warmup
            } else {
                h.learning_rate * (total - k) / (total - warmup)
            }
        }
    }
}

/// One optimizer step over all parameters:
/// g' = grad + weight_decay·param; v ← momentum·v + g';
/// param ← param − lr·v. Increments the step counter once.
pub fn sgd_update(
    params: &mut IndexMap<String, Tensor>,
    grads: &IndexMap<String, Tensor>,
    state: &mut OptimState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::KeyMismatch(format!(
            "params {} / grads {} / velocity {}",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    let lr = lr_at_step(state);
    let (momentum, wd) = (state.hyper.momentum, state.hyper.weight_decay);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).ok_or_else(|| Error::KeyMismatch(format!("no gradient for {name}")))?;
        let v = state
            .velocity
            .get_mut(name)
            .ok_or_else(|| Error::KeyMismatch(format!("no velocity for {name}")))?;
        if g.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?} for {name}", p.shape()),
                got: format!("grad {:?} / velocity {:?}", g.shape(), v.shape()),
            });
        }
        let (pd, gd, vd) = (p.data_mut(), g.data(), v.data_mut());
        for i in 0..pd.len() {
            let adjusted = gd[i] + wd * pd[i];
            vd[i] = momentum * vd[i] + adjusted;
            pd[i] -= lr * vd[i];
        }
        p.check_finite("sgd_update parameter")?;
    }
    state.step += 1;
    Ok(())
}
