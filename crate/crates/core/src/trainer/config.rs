//! Flat `key = value` training configuration.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::augment::{CropConfig, PhotoConfig, PhotoOp, PhotoStep, SpatialParams};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::model::ModelConfig;

/// Photometric operator parameters as they appear in the config file.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotoParams {
    pub enabled: bool,
    /// Brightness, contrast and saturation strengths.
    pub jitter: [f64; 3],
    pub jitter_prob: f64,
    pub solarize: f64,
    pub solarize_prob: f64,
    /// Sigma range in pixels.
    pub blur: [f64; 2],
    pub blur_prob: f64,
    pub noise: f64,
    pub noise_prob: f64,
}

impl Default for PhotoParams {
    fn default() -> Self {
        Self {
            enabled: true,
            jitter: [0.4, 0.4, 0.2],
            jitter_prob: 0.8,
            solarize: 0.5,
            solarize_prob: 0.2,
            blur: [0.1, 1.0],
            blur_prob: 0.5,
            noise: 0.05,
            noise_prob: 0.2,
        }
    }
}

impl PhotoParams {
    pub fn to_photo_config(&self) -> PhotoConfig {
        if !self.enabled {
            return PhotoConfig::none();
        }
        let [brightness, contrast, saturation] = self.jitter;
        PhotoConfig {
            steps: vec![
                PhotoStep {
                    op: PhotoOp::ColorJitter {
                        brightness,
                        contrast,
                        saturation,
                    },
                    prob: self.jitter_prob,
                },
                PhotoStep {
                    op: PhotoOp::Solarize {
                        threshold: self.solarize,
                    },
                    prob: self.solarize_prob,
                },
                PhotoStep {
                    op: PhotoOp::GaussianBlur {
                        sigma_min: self.blur[0],
                        sigma_max: self.blur[1],
                    },
                    prob: self.blur_prob,
                },
                PhotoStep {
                    op: PhotoOp::GaussianNoise { std: self.noise },
                    prob: self.noise_prob,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` means `5e-4 · batch_size / 256`.
    pub base_lr: Option<f64>,
    pub lr_end: f64,
    /// Linear warmup length as a fraction of the run.
    pub lr_warmup: f64,
    pub wd_start: f64,
    pub wd_end: f64,
    /// Also decay norms, biases, the CLS token and positions.
    pub decay_all: bool,
    pub tau_s: f64,
    pub tau_t_start: f64,
    pub tau_t_end: f64,
    /// Teacher temperature warmup as a fraction of the run.
    pub tau_t_warmup: f64,
    pub ema_start: f64,
    pub ema_end: f64,
    pub center_momentum: f64,
    pub loss: LossKind,
    pub global: SpatialParams,
    pub local: SpatialParams,
    pub local_count: usize,
    pub photo: PhotoParams,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub out_dim: usize,
    pub patch: usize,
    pub use_pos: bool,
    pub seed: u64,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let crop = CropConfig::default();
        let model = ModelConfig::default();
        Self {
            epochs: 20,
            batch_size: 32,
            base_lr: None,
            lr_end: 1e-6,
            lr_warmup: 10.0 / 200.0,
            wd_start: 0.04,
            wd_end: 0.4,
            decay_all: false,
            tau_s: 0.1,
            tau_t_start: 0.04,
            tau_t_end: 0.07,
            tau_t_warmup: 30.0 / 200.0,
            ema_start: 0.996,
            ema_end: 1.0,
            center_momentum: 0.0,
            loss: LossKind::Pwml,
            global: crop.global,
            local: crop.local,
            local_count: crop.local_count,
            photo: PhotoParams::default(),
            depth: model.depth,
            dim: model.dim,
            heads: model.heads,
            out_dim: model.out_dim,
            patch: model.patch,
            use_pos: model.use_pos,
            seed: 0,
            train_limit: None,
            test_limit: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_list<const N: usize>(key: &str, value: &str) -> Result<[f64; N]> {
    let inner = value.trim().trim_start_matches('[').trim_end_matches(']');
    let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(Error::Config(format!("{key} = {value:?}: expected {N} numbers")));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = parse_num(key, p)?;
    }
    Ok(out)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key} = {value:?}: expected true or false"))),
    }
}

fn parse_limit(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "all" {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn fmt_limit(v: Option<usize>) -> String {
    v.map_or_else(|| "all".to_string(), |n| n.to_string())
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        let mut lambda = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", n + 1)));
            }
            if key == "loss.lambda" {
                // May precede `loss`.
                lambda = Some(value.to_string());
            } else {
                cfg.set(key, value)?;
            }
        }
        if let Some(v) = lambda {
            cfg.set("loss.lambda", &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "lr" => {
                self.base_lr = if value == "auto" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "lr.end" => self.lr_end = parse_num(key, value)?,
            "lr.warmup" => self.lr_warmup = parse_num(key, value)?,
            "wd.start" => self.wd_start = parse_num(key, value)?,
            "wd.end" => self.wd_end = parse_num(key, value)?,
            "optim.decay_all" => self.decay_all = parse_bool(key, value)?,
            "tau_s" => self.tau_s = parse_num(key, value)?,
            "tau_t.start" => self.tau_t_start = parse_num(key, value)?,
            "tau_t.end" => self.tau_t_end = parse_num(key, value)?,
            "tau_t.warmup" => self.tau_t_warmup = parse_num(key, value)?,
            "ema.start" => self.ema_start = parse_num(key, value)?,
            "ema.end" => self.ema_end = parse_num(key, value)?,
            "center.momentum" => self.center_momentum = parse_num(key, value)?,
            "loss" => self.loss = value.parse()?,
            "loss.lambda" => match self.loss {
                LossKind::Pwll(_) => self.loss = LossKind::Pwll(parse_num(key, value)?),
                _ => return Err(Error::Config("loss.lambda applies only to loss = pwll".into())),
            },
            "global.scale" => [self.global.scale_min, self.global.scale_max] = parse_list(key, value)?,
            "global.size" => self.global.out_size = parse_num(key, value)?,
            "global.flip" => self.global.flip_prob = parse_num(key, value)?,
            "local.scale" => [self.local.scale_min, self.local.scale_max] = parse_list(key, value)?,
            "local.size" => self.local.out_size = parse_num(key, value)?,
            "local.flip" => self.local.flip_prob = parse_num(key, value)?,
            "local.count" => self.local_count = parse_num(key, value)?,
            "photo" => self.photo.enabled = parse_bool(key, value)?,
            "photo.jitter" => self.photo.jitter = parse_list(key, value)?,
            "photo.jitter.prob" => self.photo.jitter_prob = parse_num(key, value)?,
            "photo.solarize" => self.photo.solarize = parse_num(key, value)?,
            "photo.solarize.prob" => self.photo.solarize_prob = parse_num(key, value)?,
            "photo.blur" => self.photo.blur = parse_list(key, value)?,
            "photo.blur.prob" => self.photo.blur_prob = parse_num(key, value)?,
            "photo.noise" => self.photo.noise = parse_num(key, value)?,
            "photo.noise.prob" => self.photo.noise_prob = parse_num(key, value)?,
            "model.depth" => self.depth = parse_num(key, value)?,
            "model.dim" => self.dim = parse_num(key, value)?,
            "model.heads" => self.heads = parse_num(key, value)?,
            "model.out_dim" => self.out_dim = parse_num(key, value)?,
            "model.patch" => self.patch = parse_num(key, value)?,
            "model.pos" => self.use_pos = parse_bool(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "data.train_limit" => self.train_limit = parse_limit(key, value)?,
            "data.test_limit" => self.test_limit = parse_limit(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` gives back the same config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let lambda = match self.loss {
            LossKind::Pwll(l) => Some(l),
            _ => None,
        };
        let lines: Vec<(&str, String)> = vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.base_lr.map_or_else(|| "auto".into(), |v| v.to_string())),
            ("lr.end", self.lr_end.to_string()),
            ("lr.warmup", self.lr_warmup.to_string()),
            ("wd.start", self.wd_start.to_string()),
            ("wd.end", self.wd_end.to_string()),
            ("optim.decay_all", self.decay_all.to_string()),
            ("tau_s", self.tau_s.to_string()),
            ("tau_t.start", self.tau_t_start.to_string()),
            ("tau_t.end", self.tau_t_end.to_string()),
            ("tau_t.warmup", self.tau_t_warmup.to_string()),
            ("ema.start", self.ema_start.to_string()),
            ("ema.end", self.ema_end.to_string()),
            ("center.momentum", self.center_momentum.to_string()),
            ("loss", self.loss.name().to_string()),
            (
                "global.scale",
                fmt_list(&[self.global.scale_min, self.global.scale_max]),
            ),
            ("global.size", self.global.out_size.to_string()),
            ("global.flip", self.global.flip_prob.to_string()),
            ("local.scale", fmt_list(&[self.local.scale_min, self.local.scale_max])),
            ("local.size", self.local.out_size.to_string()),
            ("local.flip", self.local.flip_prob.to_string()),
            ("local.count", self.local_count.to_string()),
            ("photo", self.photo.enabled.to_string()),
            ("photo.jitter", fmt_list(&self.photo.jitter)),
            ("photo.jitter.prob", self.photo.jitter_prob.to_string()),
            ("photo.solarize", self.photo.solarize.to_string()),
            ("photo.solarize.prob", self.photo.solarize_prob.to_string()),
            ("photo.blur", fmt_list(&self.photo.blur)),
            ("photo.blur.prob", self.photo.blur_prob.to_string()),
            ("photo.noise", self.photo.noise.to_string()),
            ("photo.noise.prob", self.photo.noise_prob.to_string()),
            ("model.depth", self.depth.to_string()),
            ("model.dim", self.dim.to_string()),
            ("model.heads", self.heads.to_string()),
            ("model.out_dim", self.out_dim.to_string()),
            ("model.patch", self.patch.to_string()),
            ("model.pos", self.use_pos.to_string()),
            ("seed", self.seed.to_string()),
            ("data.train_limit", fmt_limit(self.train_limit)),
            ("data.test_limit", fmt_limit(self.test_limit)),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
            if k == "loss" {
                if let Some(l) = lambda {
                    let _ = writeln!(s, "loss.lambda = {l}");
                }
            }
        }
        s
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr.unwrap_or(5e-4 * self.batch_size as f64 / 256.0)
    }

    pub fn crop_config(&self) -> CropConfig {
        CropConfig {
            global: self.global,
            local: self.local,
            local_count: self.local_count,
            patch_size: self.patch,
            photo: self.photo.to_photo_config(),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            depth: self.depth,
            dim: self.dim,
            heads: self.heads,
            out_dim: self.out_dim,
            patch: self.patch,
            global_size: self.global.out_size,
            use_pos: self.use_pos,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.base_lr.is_some_and(|v| v.is_nan() || v < 0.0) || self.lr_end.is_nan() || self.lr_end < 0.0 {
            return bad("learning rates must be nonnegative".into());
        }
        for (name, v) in [("lr.warmup", self.lr_warmup), ("tau_t.warmup", self.tau_t_warmup)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} is not a fraction of the run"));
            }
        }
        if !(self.wd_start >= 0.0 && self.wd_end >= 0.0) {
            return bad("weight decay must be nonnegative".into());
        }
        if !(self.tau_s > 0.0 && self.tau_t_start > 0.0 && self.tau_t_start <= self.tau_t_end) {
            return bad(format!(
                "temperatures need tau_s > 0 and 0 < tau_t.start <= tau_t.end, got {} {} {}",
                self.tau_s, self.tau_t_start, self.tau_t_end
            ));
        }
        for (name, v) in [
            ("ema.start", self.ema_start),
            ("ema.end", self.ema_end),
            ("center.momentum", self.center_momentum),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.local.out_size > self.global.out_size {
            return bad("local.size exceeds global.size".into());
        }
        self.loss.validate()?;
        self.crop_config().validate()?;
        for step in &self.photo.to_photo_config().steps {
            step.op.validate()?;
            if !(0.0..=1.0).contains(&step.prob) {
                return bad(format!("photometric probability {} outside [0, 1]", step.prob));
            }
        }
        self.model_config().validate()
    }
}
