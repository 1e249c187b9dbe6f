//! Checkpoints and the student/teacher training loop.

use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use super::optim::{adamw_step, ema_update, AdamState};
use super::schedule::{ScheduleState, Schedules};
use super::TrainConfig;
use crate::augment::{make_batch_views, BatchViews, CropConfig};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::imagedata::{channel_stats, ChannelStats, Image, Rng};
use crate::losses::{batched_loss, pair_correspondences, PairCorrespondence};
use crate::model::{forward, patchify, update_center, Center, ModelConfig, ModelParams};
use crate::tensorfile::TensorFile;

pub const METRICS_HEADER: &str = "step,epoch,loss,lr,wd,tau_t,ema_lambda";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.manifest";

/// Full training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub center: Center,
    pub adam: AdamState,
    /// Optimizer steps taken.
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
    /// Steps per epoch of the run this state belongs to.
    pub steps_per_epoch: usize,
    pub stats: ChannelStats,
}

impl Checkpoint {
    /// Fresh state: the teacher starts as a copy of the student.
    pub fn init(config: &TrainConfig, train_size: usize, stats: ChannelStats) -> Result<Self> {
        config.validate()?;
        if train_size == 0 {
            return Err(Error::Config("empty training set".into()));
        }
        let mut rng = Rng::new(config.seed).derive(&["init".into()]);
        let student = ModelParams::init(config.model_config(), &mut rng)?;
        Ok(Self {
            config: config.clone(),
            teacher: student.clone(),
            adam: AdamState::zeros_like(&student.tensors),
            center: Center::zeros(config.out_dim),
            student,
            step: 0,
            epoch: 0,
            steps_per_epoch: train_size.div_ceil(config.batch_size),
            stats,
        })
    }

    pub fn save(&self, manifest: &Path) -> Result<()> {
        let mut f = TensorFile::new();
        f.push_meta("kind", "checkpoint")?;
        f.push_meta("step", self.step)?;
        f.push_meta("epoch", self.epoch)?;
        f.push_meta("steps_per_epoch", self.steps_per_epoch)?;
        f.push_meta("adam_t", self.adam.t)?;
        f.push_meta("config_hash", self.config.hash())?;
        for line in self.config.to_text().lines() {
            f.push_meta("config", line)?;
        }
        let layout = self.config.model_config().layout();
        for (prefix, params) in [("student", &self.student), ("teacher", &self.teacher)] {
            for (spec, t) in layout.iter().zip(&params.tensors) {
                f.push(&format!("{prefix}/{}", spec.name), t.clone())?;
            }
        }
        for (prefix, moments) in [("adam.m", &self.adam.m), ("adam.v", &self.adam.v)] {
            for (spec, t) in layout.iter().zip(moments) {
                f.push(&format!("{prefix}/{}", spec.name), t.clone())?;
            }
        }
        f.push("center", Tensor::new(&[self.center.c.len()], self.center.c.clone())?)?;
        let mut stats = self.stats.mean.to_vec();
        stats.extend_from_slice(&self.stats.std);
        f.push("input_stats", Tensor::new(&[2, 3], stats)?)?;
        f.write(manifest)
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        let f = TensorFile::read(manifest)?;
        let fmt_err = |reason: String| Error::Format {
            path: manifest.to_path_buf(),
            reason,
        };
        if f.meta("kind") != Some("checkpoint") {
            return Err(fmt_err("not a checkpoint".into()));
        }
        let text: String = f.meta_all("config").map(|l| format!("{l}\n")).collect();
        let config = TrainConfig::parse(&text)?;
        if f.meta("config_hash") != Some(config.hash().as_str()) {
            return Err(fmt_err("config hash mismatch".into()));
        }
        let num =
            |key: &str| -> Result<usize> { f.require_meta(key)?.parse().map_err(|_| fmt_err(format!("bad {key}"))) };
        let model = config.model_config();
        let layout = model.layout();
        let group = |prefix: &str| -> Result<Vec<Tensor>> {
            layout
                .iter()
                .map(|s| f.require(&format!("{prefix}/{}", s.name)).cloned())
                .collect()
        };
        let stats = f.require("input_stats")?.data().to_vec();
        if stats.len() != 6 {
            return Err(fmt_err("input_stats must hold 6 values".into()));
        }
        let center = f.require("center")?.data().to_vec();
        if center.len() != config.out_dim {
            return Err(fmt_err(format!(
                "center of {} for K = {}",
                center.len(),
                config.out_dim
            )));
        }
        Ok(Self {
            student: ModelParams::from_tensors(model, group("student")?)?,
            teacher: ModelParams::from_tensors(model, group("teacher")?)?,
            adam: AdamState {
                m: group("adam.m")?,
                v: group("adam.v")?,
                t: num("adam_t")? as u64,
            },
            center: Center { c: center },
            step: num("step")?,
            epoch: num("epoch")?,
            steps_per_epoch: num("steps_per_epoch")?,
            stats: ChannelStats {
                mean: [stats[0], stats[1], stats[2]],
                std: [stats[3], stats[4], stats[5]],
            },
            config,
        })
    }
}

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub schedule: ScheduleState,
    pub teacher_cls_entropy: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let s = &self.schedule;
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.epoch, self.loss, s.lr, s.wd, s.tau_t, s.ema_lambda
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Mean teacher CLS entropy over the epoch's steps.
    pub teacher_cls_entropy: f64,
    pub center_norm: f64,
}

/// Work counters accumulated over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub batches: usize,
    /// Crop-pair correspondences computed.
    pub correspondences: usize,
    /// Cross-entropy terms evaluated.
    pub ce_evaluations: usize,
    /// (teacher view, student view) pair terms per image in the last step.
    pub pair_terms: usize,
}

/// Drives training from a [`Checkpoint`].
#[derive(Debug, Clone)]
pub struct Trainer {
    pub state: Checkpoint,
    pub counters: Counters,
    schedules: Schedules,
    crop: CropConfig,
    model: ModelConfig,
    decay: Vec<bool>,
}

fn view_refs(views: &BatchViews, slots: std::ops::Range<usize>) -> Vec<&Image> {
    slots.flat_map(|k| views.views[k].iter()).collect()
}

impl Trainer {
    pub fn new(config: &TrainConfig, train: &[Image]) -> Result<Self> {
        let state = Checkpoint::init(config, train.len(), channel_stats(train))?;
        Ok(Self::resume(state))
    }

    pub fn resume(state: Checkpoint) -> Self {
        let cfg = &state.config;
        let decay = cfg
            .model_config()
            .layout()
            .iter()
            .map(|s| s.decay || cfg.decay_all)
            .collect();
        Self {
            schedules: Schedules::new(cfg, cfg.epochs * state.steps_per_epoch),
            crop: cfg.crop_config(),
            model: cfg.model_config(),
            decay,
            counters: Counters::default(),
            state,
        }
    }

    pub fn schedules(&self) -> &Schedules {
        &self.schedules
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.state.config.epochs
    }

    /// Batch stream of one epoch.
    pub fn batch_rng(&self, epoch: usize, batch: usize) -> Rng {
        Rng::new(self.state.config.seed).derive(&["batch".into(), epoch.into(), batch.into()])
    }

    /// Teacher logits `[2B, 1 + T, K]` of the global views, computed without a tape.
    fn teacher_logits(&self, globals: &[&Image]) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let params: Vec<Var> = self
            .state
            .teacher
            .tensors
            .iter()
            .map(|t| g.constant(t.clone()))
            .collect();
        let x = patchify(globals, self.model.patch, &self.state.stats)?;
        let x = g.constant(x);
        let out = forward(&mut g, &self.model, &params, x, true)?;
        Ok(g.value(out.logits.expect("head requested")).clone())
    }

    /// One optimizer step on `batch` with augmentation drawn from `batch_rng`.
    pub fn step(&mut self, batch: &[Image], batch_rng: &Rng) -> Result<StepRecord> {
        let step = self.state.step;
        let sched = self.schedules.at(step);
        let views = make_batch_views(batch, &self.crop, batch_rng)?;
        let pairs: Vec<PairCorrespondence> = pair_correspondences(&views.crops, self.model.patch)?;
        self.counters.correspondences += pairs.len();

        let b = batch.len();
        let n_views = self.crop.view_count();
        let globals = view_refs(&views, 0..CropConfig::GLOBAL_VIEWS);
        let t_logits = self.teacher_logits(&globals)?;

        let mut g = Graph::<f32>::new();
        let params: Vec<Var> = self.state.student.tensors.iter().map(|t| g.param(t.clone())).collect();
        let t_all = g.constant(t_logits.clone());
        let mut teacher_vars = Vec::with_capacity(CropConfig::GLOBAL_VIEWS);
        for i in 0..CropConfig::GLOBAL_VIEWS {
            teacher_vars.push(g.slice(t_all, 0, i * b, b)?);
        }

        let mut student_vars = Vec::with_capacity(n_views);
        let x = g.constant(patchify(&globals, self.model.patch, &self.state.stats)?);
        let s_globals = forward(&mut g, &self.model, &params, x, true)?
            .logits
            .expect("head requested");
        for i in 0..CropConfig::GLOBAL_VIEWS {
            student_vars.push(g.slice(s_globals, 0, i * b, b)?);
        }
        if self.crop.local_count > 0 {
            let locals = view_refs(&views, CropConfig::GLOBAL_VIEWS..n_views);
            let x = g.constant(patchify(&locals, self.model.patch, &self.state.stats)?);
            let s_locals = forward(&mut g, &self.model, &params, x, true)?
                .logits
                .expect("head requested");
            for j in 0..self.crop.local_count {
                student_vars.push(g.slice(s_locals, 0, j * b, b)?);
            }
        }

        let cfg = &self.state.config;
        let out = batched_loss(
            &mut g,
            cfg.loss,
            &teacher_vars,
            &self.state.center,
            sched.tau_t,
            &student_vars,
            cfg.tau_s,
            &pairs,
        )?;
        let loss = g.value(out.loss).item()?.into();
        if !f64::is_finite(loss) {
            return Err(Error::NonFinite {
                step,
                state: format!(
                    "epoch {} lr {} wd {} tau_t {} ema_lambda {} center_norm {} student_finite {}",
                    self.state.epoch,
                    sched.lr,
                    sched.wd,
                    sched.tau_t,
                    sched.ema_lambda,
                    self.state.center.norm(),
                    self.state.student.all_finite()
                ),
            });
        }
        g.backward(out.loss)?;
        let grads: Vec<Tensor> = params
            .iter()
            .zip(&self.state.student.tensors)
            .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        drop(g);

        adamw_step(
            &mut self.state.student.tensors,
            &grads,
            &mut self.state.adam,
            sched.lr,
            sched.wd,
            &self.decay,
        )?;
        ema_update(&mut self.state.teacher, &self.state.student, sched.ema_lambda)?;

        let k = cfg.out_dim;
        let tokens = t_logits.shape()[1];
        let mut cls = Vec::with_capacity(2 * b * k);
        for r in 0..2 * b {
            cls.extend_from_slice(&t_logits.data()[r * tokens * k..r * tokens * k + k]);
        }
        self.state.center = update_center(&Tensor::new(&[2 * b, k], cls)?, &self.state.center, cfg.center_momentum)?;

        self.counters.batches += 1;
        self.counters.ce_evaluations += out.ce_terms;
        self.counters.pair_terms = out.pair_terms;
        self.state.step += 1;
        Ok(StepRecord {
            step,
            epoch: self.state.epoch,
            loss,
            schedule: sched,
            teacher_cls_entropy: out.teacher_cls_entropy,
        })
    }

    /// Runs the next epoch, calling `on_step` after every step.
    pub fn run_epoch(
        &mut self,
        train: &[Image],
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<EpochSummary> {
        let epoch = self.state.epoch;
        let expected = train.len().div_ceil(self.state.config.batch_size);
        if expected != self.state.steps_per_epoch {
            return Err(Error::Config(format!(
                "{} training images give {expected} steps per epoch, state expects {}",
                train.len(),
                self.state.steps_per_epoch
            )));
        }
        let order = Rng::new(self.state.config.seed)
            .derive(&["epoch".into(), epoch.into()])
            .permutation(train.len());
        let (mut loss_sum, mut ent_sum, mut n) = (0.0, 0.0, 0usize);
        for (bi, idx) in order.chunks(self.state.config.batch_size).enumerate() {
            let batch: Vec<Image> = idx.iter().map(|&i| train[i].clone()).collect();
            let rec = self.step(&batch, &self.batch_rng(epoch, bi))?;
            loss_sum += rec.loss;
            ent_sum += rec.teacher_cls_entropy;
            n += 1;
            on_step(&rec)?;
        }
        self.state.epoch += 1;
        Ok(EpochSummary {
            epoch,
            mean_loss: loss_sum / n as f64,
            teacher_cls_entropy: ent_sum / n as f64,
            center_norm: self.state.center.norm(),
        })
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
    pub counters: Counters,
    pub checkpoint: Checkpoint,
}

fn open_log(path: &Path, header: &str, append: bool) -> Result<File> {
    let exists = append && path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if !exists {
        writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

/// Trains until the configured epoch count. With `out`, appends
/// [`METRICS_FILE`] and [`EPOCHS_FILE`] rows and rewrites [`CHECKPOINT_FILE`]
/// after every epoch.
pub fn run(mut trainer: Trainer, train: &[Image], out: Option<&Path>) -> Result<TrainReport> {
    let resumed = trainer.state.step > 0;
    let mut logs = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let m = dir.join(METRICS_FILE);
            let e = dir.join(EPOCHS_FILE);
            Some((
                open_log(&m, METRICS_HEADER, resumed)?,
                m,
                open_log(&e, "epoch,mean_loss,teacher_cls_entropy,center_norm", resumed)?,
                e,
            ))
        }
        None => None,
    };
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    while !trainer.is_finished() {
        let summary = trainer.run_epoch(train, |rec| {
            if let Some((f, path, _, _)) = logs.as_mut() {
                writeln!(f, "{}", rec.csv_row()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            steps.push(*rec);
            Ok(())
        })?;
        if let (Some((_, _, f, path)), Some(dir)) = (logs.as_mut(), out) {
            writeln!(
                f,
                "{},{},{},{}",
                summary.epoch, summary.mean_loss, summary.teacher_cls_entropy, summary.center_norm
            )
            .map_err(|e| Error::io(path.as_path(), e))?;
            trainer.state.save(&dir.join(CHECKPOINT_FILE))?;
        }
        epochs.push(summary);
    }
    Ok(TrainReport {
        steps,
        epochs,
        counters: trainer.counters,
        checkpoint: trainer.state,
    })
}

/// Trains a fresh model on `train`.
pub fn train(config: &TrainConfig, train: &[Image], out: Option<&Path>) -> Result<TrainReport> {
    run(Trainer::new(config, train)?, train, out)
}

/// Checkpoint path inside an output directory.
pub fn checkpoint_path(out: &Path) -> PathBuf {
    out.join(CHECKPOINT_FILE)
}
