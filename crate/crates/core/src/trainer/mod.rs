//! Configuration, schedules, optimizer, checkpoints and the training loop.

mod config;
mod optim;
mod schedule;
mod train;

pub use config::{PhotoParams, TrainConfig};
pub use optim::{adamw_step, ema_update, AdamState, ADAM_EPS, BETA1, BETA2};
pub use schedule::{cosine_schedule, lr_at, ScheduleState, Schedules};
pub use train::{
    checkpoint_path, run, train, Checkpoint, Counters, EpochSummary, StepRecord, TrainReport, Trainer, CHECKPOINT_FILE,
    EPOCHS_FILE, METRICS_FILE, METRICS_HEADER,
};
