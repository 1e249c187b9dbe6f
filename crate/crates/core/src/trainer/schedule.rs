//! Per-step hyperparameter schedules.

use super::TrainConfig;

/// Cosine interpolation from `start` at step 0 to `end` at `total`.
pub fn cosine_schedule(step: usize, total: usize, start: f64, end: f64) -> f64 {
    assert!(total > 0, "cosine schedule over zero steps");
    let t = step.min(total) as f64 / total as f64;
    let w = (1.0 + (std::f64::consts::PI * t).cos()) / 2.0;
    start * w + end * (1.0 - w)
}

/// Values of every scheduled quantity at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleState {
    pub lr: f64,
    pub wd: f64,
    pub tau_t: f64,
    pub ema_lambda: f64,
}

/// Schedules of one run of `total_steps` optimizer steps.
#[derive(Debug, Clone)]
pub struct Schedules {
    cfg: TrainConfig,
    total: usize,
}

fn horizon(fraction: f64, total: usize) -> usize {
    (fraction * total as f64).round() as usize
}

impl Schedules {
    pub fn new(cfg: &TrainConfig, total_steps: usize) -> Self {
        Self {
            cfg: cfg.clone(),
            total: total_steps.max(1),
        }
    }

    pub fn total_steps(&self) -> usize {
        self.total
    }

    pub fn warmup_steps(&self) -> usize {
        horizon(self.cfg.lr_warmup, self.total)
    }

    pub fn lr(&self, step: usize) -> f64 {
        lr_at(step, &self.cfg, self.total)
    }

    pub fn wd(&self, step: usize) -> f64 {
        cosine_schedule(step, self.total, self.cfg.wd_start, self.cfg.wd_end)
    }

    /// Linear warmup of the teacher temperature, then constant.
    pub fn tau_t(&self, step: usize) -> f64 {
        let warm = horizon(self.cfg.tau_t_warmup, self.total);
        if step >= warm {
            self.cfg.tau_t_end
        } else {
            let t = step as f64 / warm as f64;
            self.cfg.tau_t_start + (self.cfg.tau_t_end - self.cfg.tau_t_start) * t
        }
    }

    pub fn ema_lambda(&self, step: usize) -> f64 {
        cosine_schedule(step, self.total, self.cfg.ema_start, self.cfg.ema_end)
    }

    pub fn at(&self, step: usize) -> ScheduleState {
        ScheduleState {
            lr: self.lr(step),
            wd: self.wd(step),
            tau_t: self.tau_t(step),
            ema_lambda: self.ema_lambda(step),
        }
    }
}

/// Linear ramp from 0 to the base rate, then cosine down to `lr_end` at `total`.
pub fn lr_at(step: usize, cfg: &TrainConfig, total: usize) -> f64 {
    let base = cfg.base_lr();
    let warm = horizon(cfg.lr_warmup, total);
    if step < warm {
        base * step as f64 / warm as f64
    } else if total > warm {
        cosine_schedule(step - warm, total - warm, base, cfg.lr_end)
    } else {
        base
    }
}
