//! AdamW with decoupled weight decay, and the warmup/decay schedule.

use super::TrainError;
use crate::encoder::Parameter;

/// Hyperparameters of the adaptive-moment update.
#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            base_lr: 1e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter moment buffers plus the shared step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &[&Parameter], config: AdamWConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            first_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One AdamW step at learning rate `lr`.
///
/// Decoupled weight decay shrinks each parameter by `lr * wd * p` before
/// the moment-scaled update is subtracted. A missing gradient is treated
/// as zero (the parameter was unused by this objective); a non-finite
/// gradient aborts with the parameter named.
pub fn optimizer_step(
    params: &mut [&mut Parameter],
    grads: &[Option<Vec<f64>>],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<(), TrainError> {
    assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
    assert_eq!(
        params.len(),
        state.first_moment.len(),
        "optimizer state built for a different parameter set"
    );
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            assert_eq!(g.len(), p.numel(), "gradient shape mismatch for {}", p.name);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    param: p.name.clone(),
                });
            }
        }
    }

    state.step += 1;
    let t = state.step;
    let c = state.config;
    let bias1 = 1.0 - c.beta1.powi(t as i32);
    let bias2 = 1.0 - c.beta2.powi(t as i32);

    for (i, param) in params.iter_mut().enumerate() {
        let zero;
        let g: &[f64] = match &grads[i] {
            Some(g) => g,
            None => {
                zero = vec![0.0; param.numel()];
                &zero
            }
        };
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (j, p) in param.data.iter_mut().enumerate() {
            *p -= lr * c.weight_decay * *p;
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            *p -= lr * m_hat / (v_hat.sqrt() + c.epsilon);
        }
    }
    Ok(())
}

/// Piecewise-linear learning rate: 0 up to `base_lr` over the first
/// `warmup_fraction` of steps, then straight back down to 0.
#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub base_lr: f64,
}

impl Schedule {
    pub fn new(total_steps: usize, base_lr: f64) -> Self {
        Schedule {
            total_steps,
            warmup_fraction: 0.06,
            base_lr,
        }
    }

    /// `ceil(warmup_fraction * total_steps)`, guarded so an exact rational
    /// multiple is not pushed over the next integer by float rounding.
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64 - 1e-9).ceil().max(0.0) as usize
    }
}

/// Learning rate at `step`, for `step` in `0..=total_steps`.
pub fn lr_at(step: usize, schedule: &Schedule) -> Result<f64, TrainError> {
    let total = schedule.total_steps;
    if step > total {
        return Err(TrainError::StepOutOfRange { step, total });
    }
    let warmup = schedule.warmup_steps();
    if step <= warmup {
        if warmup == 0 {
            return Ok(schedule.base_lr);
        }
        return Ok(schedule.base_lr * step as f64 / warmup as f64);
    }
    // warmup < step <= total, hence warmup < total
    Ok(schedule.base_lr * (total - step) as f64 / (total - warmup) as f64)
}
