//! Cosine annealing with warm restarts, with optional linear warmup.

use crate::train::TrainConfig;

/// `lr_min + (lr - lr_min) * (1 + cos(pi * t_cur / period)) / 2`
pub fn annealed_lr(lr: f64, lr_min: f64, t_cur: f64, period: f64) -> f64 {
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * t_cur / period).cos())
}

/// Learning rate at optimizer step `step` (0-based).
///
/// The first `warmup_steps` steps ramp linearly from `lr_min` towards `lr`;
/// afterwards the cosine restarts every `period` steps.
pub fn cosine_warm_restarts_lr(step: usize, cfg: &TrainConfig, steps_per_epoch: usize) -> f64 {
    let period = cfg.restart_period.unwrap_or(steps_per_epoch).max(1);
    if step < cfg.warmup_steps {
        let frac = (step + 1) as f64 / cfg.warmup_steps as f64;
        return cfg.lr_min + (cfg.lr - cfg.lr_min) * frac;
    }
    let t_cur = (step - cfg.warmup_steps) % period;
    annealed_lr(cfg.lr, cfg.lr_min, t_cur as f64, period as f64)
}
