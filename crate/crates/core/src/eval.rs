//! Frozen-feature evaluation: feature extraction, KNN and linear probes,
//! and feature export.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::apply_crop;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{CropRecord, Rect};
use crate::imagedata::{ChannelStats, Image, LabeledDataset, Rng};
use crate::model::{forward, patchify, ModelParams};
use crate::tensorfile::TensorFile;
use crate::trainer::Checkpoint;

/// `N x dim` features with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub data: Vec<f32>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl FeatureSet {
    pub fn new(dim: usize, data: Vec<f32>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if data.len() != dim * labels.len() {
            return Err(Error::shape(
                "FeatureSet::new",
                format!("{} values for {} rows of {dim}", data.len(), labels.len()),
            ));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Domain(format!("label {l} outside [0, {class_count})")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite feature".into()));
        }
        Ok(Self {
            dim,
            data,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Every value multiplied by `s`.
    pub fn scaled(&self, s: f32) -> Self {
        Self {
            data: self.data.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }
}

/// Which network and layer features are read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureSource {
    /// Teacher CLS embedding before the projection head.
    #[default]
    TeacherBackbone,
    StudentBackbone,
    /// Teacher CLS logits after the projection head.
    TeacherHead,
    StudentHead,
}

impl FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" | "teacher.backbone" => Ok(Self::TeacherBackbone),
            "student" | "student.backbone" => Ok(Self::StudentBackbone),
            "teacher.head" => Ok(Self::TeacherHead),
            "student.head" => Ok(Self::StudentHead),
            _ => Err(Error::Config(format!("unknown feature source {s:?}"))),
        }
    }
}

/// Largest centered square of `img`, resized to `size`.
pub fn center_resize(img: &Image, size: usize) -> Result<Image> {
    let (h, w) = (img.height(), img.width());
    if h == size && w == size {
        return Ok(img.clone());
    }
    let side = h.min(w);
    let (x0, y0) = ((w - side) / 2, (h - side) / 2);
    let crop = CropRecord::new(Rect::new(x0, y0, x0 + side, y0 + side), size, false)?;
    apply_crop(img, &crop)
}

const EXTRACT_CHUNK: usize = 64;

/// CLS features of `images` from `params`: the final-norm embedding, or the
/// head logits when `head` is set.
pub fn extract_cls(
    params: &ModelParams,
    stats: &ChannelStats,
    images: &[Image],
    head: bool,
) -> Result<(usize, Vec<f32>)> {
    let cfg = params.config;
    let dim = if head { cfg.out_dim } else { cfg.dim };
    let mut out = Vec::with_capacity(images.len() * dim);
    for chunk in images.chunks(EXTRACT_CHUNK) {
        let views: Vec<Image> = chunk
            .iter()
            .map(|img| center_resize(img, cfg.global_size))
            .collect::<Result<_>>()?;
        let refs: Vec<&Image> = views.iter().collect();
        let mut g = Graph::<f32>::new();
        let vars: Vec<Var> = params.tensors.iter().map(|t| g.constant(t.clone())).collect();
        let x = g.constant(patchify(&refs, cfg.patch, stats)?);
        let enc = forward(&mut g, &cfg, &vars, x, head)?;
        let v = g.value(if head {
            enc.logits.expect("head requested")
        } else {
            enc.backbone
        });
        let tokens = v.shape()[1];
        for b in 0..chunk.len() {
            out.extend_from_slice(&v.data()[b * tokens * dim..b * tokens * dim + dim]);
        }
    }
    Ok((dim, out))
}

/// Deterministic features of every image of `dataset`.
pub fn extract_features(ckpt: &Checkpoint, dataset: &LabeledDataset, source: FeatureSource) -> Result<FeatureSet> {
    let (params, head) = match source {
        FeatureSource::TeacherBackbone => (&ckpt.teacher, false),
        FeatureSource::StudentBackbone => (&ckpt.student, false),
        FeatureSource::TeacherHead => (&ckpt.teacher, true),
        FeatureSource::StudentHead => (&ckpt.student, true),
    };
    let (dim, data) = extract_cls(params, &ckpt.stats, &dataset.images, head)?;
    FeatureSet::new(dim, data, dataset.labels.clone(), dataset.class_count)
}

fn unit_rows(fs: &FeatureSet) -> Vec<f64> {
    let mut out = Vec::with_capacity(fs.data.len());
    for i in 0..fs.len() {
        let row = fs.row(i);
        let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        out.extend(row.iter().map(|&v| v as f64 * inv));
    }
    out
}

fn check_pair(train: &FeatureSet, test: &FeatureSet) -> Result<()> {
    if train.dim != test.dim {
        return Err(Error::shape(
            "eval",
            format!("train dim {} vs test dim {}", train.dim, test.dim),
        ));
    }
    Ok(())
}

/// Labels predicted by a cosine-similarity `k`-nearest-neighbour vote.
/// Ties in the vote go to the larger summed similarity, then the smaller label.
pub fn knn_predict(train: &FeatureSet, test: &FeatureSet, k: usize) -> Result<Vec<usize>> {
    check_pair(train, test)?;
    if k == 0 || k > train.len() {
        return Err(Error::Config(format!("k = {k} with {} training samples", train.len())));
    }
    let classes = train.class_count.max(test.class_count);
    let a = unit_rows(train);
    let b = unit_rows(test);
    let d = train.dim;
    let mut sims: Vec<(f64, usize)> = Vec::with_capacity(train.len());
    let mut out = Vec::with_capacity(test.len());
    for q in b.chunks(d.max(1)).take(test.len()) {
        sims.clear();
        for (i, r) in a.chunks(d.max(1)).take(train.len()).enumerate() {
            sims.push((q.iter().zip(r).map(|(x, y)| x * y).sum(), i));
        }
        // Descending similarity, then ascending index: a total order.
        sims.select_nth_unstable_by(k - 1, |x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        let mut votes = vec![(0usize, 0f64); classes];
        for &(s, i) in &sims[..k] {
            let v = &mut votes[train.labels[i]];
            v.0 += 1;
            v.1 += s;
        }
        let best = (0..classes)
            .max_by(|&x, &y| {
                votes[x]
                    .0
                    .cmp(&votes[y].0)
                    .then(votes[x].1.total_cmp(&votes[y].1))
                    .then(y.cmp(&x))
            })
            .expect("at least one class");
        out.push(best);
    }
    Ok(out)
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Fraction of `test` classified correctly by [`knn_predict`].
pub fn knn_classify(train: &FeatureSet, test: &FeatureSet, k: usize) -> Result<f64> {
    Ok(accuracy(&knn_predict(train, test, k)?, &test.labels))
}

/// Classifier trained on frozen features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Hidden widths; empty means one linear layer.
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.1,
            batch_size: 256,
            momentum: 0.9,
            hidden: Vec::new(),
            seed: 0,
        }
    }
}

/// Per-dimension standardization fitted on the training features.
fn standardizer(train: &FeatureSet) -> (Vec<f32>, Vec<f32>) {
    let d = train.dim;
    let n = train.len().max(1) as f64;
    let mut mean = vec![0f64; d];
    let mut sq = vec![0f64; d];
    for i in 0..train.len() {
        for (j, &v) in train.row(i).iter().enumerate() {
            mean[j] += v as f64;
            sq[j] += (v as f64) * (v as f64);
        }
    }
    let mu: Vec<f32> = mean.iter().map(|m| (m / n) as f32).collect();
    let inv: Vec<f32> = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| {
            let var = (s / n - (m / n) * (m / n)).max(0.0);
            if var > 1e-12 {
                (1.0 / var.sqrt()) as f32
            } else {
                1.0
            }
        })
        .collect();
    (mu, inv)
}

fn standardized(fs: &FeatureSet, idx: &[usize], mu: &[f32], inv: &[f32]) -> Tensor {
    let d = fs.dim;
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend(fs.row(i).iter().zip(mu).zip(inv).map(|((v, m), s)| (v - m) * s));
    }
    Tensor::new(&[idx.len(), d], data).expect("sized above")
}

fn mlp(g: &mut Graph<f32>, params: &[Var], x: Var) -> Result<Var> {
    let mut h = x;
    let layers = params.len() / 2;
    for l in 0..layers {
        h = g.linear(h, params[2 * l], params[2 * l + 1])?;
        if l + 1 < layers {
            h = g.gelu(h);
        }
    }
    Ok(h)
}

/// Trains a softmax classifier on standardized `train` features with SGD and
/// momentum, and returns its accuracy on `test`.
pub fn linear_probe(train: &FeatureSet, test: &FeatureSet, cfg: &ProbeConfig) -> Result<f64> {
    check_pair(train, test)?;
    let classes = train.class_count.max(test.class_count);
    if cfg.batch_size == 0 || classes == 0 {
        return Err(Error::Config("probe needs a batch size and classes".into()));
    }
    let (mu, inv) = standardizer(train);
    let mut rng = Rng::new(cfg.seed).derive(&["probe".into()]);
    let mut widths = vec![train.dim];
    widths.extend(&cfg.hidden);
    widths.push(classes);
    let mut params: Vec<Tensor> = Vec::new();
    for w in widths.windows(2) {
        params.push(Tensor::randn(
            &[w[0], w[1]],
            (1.0 / w[0].max(1) as f64).sqrt(),
            &mut rng,
        ));
        params.push(Tensor::zeros(&[w[1]]));
    }
    let mut velocity: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    for epoch in 0..cfg.epochs {
        let order = rng.derive(&["epoch".into(), epoch.into()]).permutation(train.len());
        for idx in order.chunks(cfg.batch_size) {
            let mut g = Graph::<f32>::new();
            let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
            let x = g.constant(standardized(train, idx, &mu, &inv));
            let logits = mlp(&mut g, &vars, x)?;
            let logp = g.log_softmax(logits);
            let mut onehot = vec![0f32; idx.len() * classes];
            for (r, &i) in idx.iter().enumerate() {
                onehot[r * classes + train.labels[i]] = 1.0;
            }
            let y = g.constant(Tensor::new(&[idx.len(), classes], onehot)?);
            let picked = g.mul(logp, y)?;
            let total = g.sum_all(picked);
            let loss = g.scale(total, -1.0 / idx.len() as f64);
            g.backward(loss)?;
            for ((p, v), &var) in params.iter_mut().zip(&mut velocity).zip(&vars) {
                let grad = g.grad(var).expect("parameter on the loss path");
                for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                    *vv = (cfg.momentum as f32) * *vv + gv;
                    *pv -= (cfg.lr as f32) * *vv;
                }
            }
        }
    }
    if test.is_empty() {
        return Ok(0.0);
    }
    let all: Vec<usize> = (0..test.len()).collect();
    let mut g = Graph::<f32>::new();
    let vars: Vec<Var> = params.into_iter().map(|p| g.constant(p)).collect();
    let x = g.constant(standardized(test, &all, &mu, &inv));
    let logits = mlp(&mut g, &vars, x)?;
    let pred: Vec<usize> = g
        .value(logits)
        .data()
        .chunks(classes)
        .map(|row| {
            (0..classes)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .expect("at least one class")
        })
        .collect();
    Ok(accuracy(&pred, &test.labels))
}

/// Labels CSV written next to an exported feature manifest.
pub fn labels_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("labels.csv")
}

/// Writes `fs` as a tensor manifest plus blob, and a labels CSV.
pub fn export_features(fs: &FeatureSet, manifest: &Path) -> Result<()> {
    let mut f = TensorFile::new();
    f.push_meta("kind", "features")?;
    f.push_meta("class_count", fs.class_count)?;
    f.push("features", Tensor::new(&[fs.len(), fs.dim], fs.data.clone())?)?;
    f.write(manifest)?;
    let mut csv = String::from("index,label\n");
    for (i, l) in fs.labels.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    let path = labels_path(manifest);
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))
}

pub fn import_features(manifest: &Path) -> Result<FeatureSet> {
    let f = TensorFile::read(manifest)?;
    let fmt_err = |reason: String| Error::Format {
        path: manifest.to_path_buf(),
        reason,
    };
    if f.meta("kind") != Some("features") {
        return Err(fmt_err("not a feature file".into()));
    }
    let class_count: usize = f
        .require_meta("class_count")?
        .parse()
        .map_err(|_| fmt_err("bad class_count".into()))?;
    let t = f.require("features")?;
    if t.shape().len() != 2 {
        return Err(fmt_err(format!("features of shape {:?}", t.shape())));
    }
    let path = labels_path(manifest);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut labels = Vec::new();
    for (n, line) in text.lines().skip(1).enumerate() {
        let label = line
            .split_once(',')
            .filter(|(i, _)| i.parse() == Ok(n))
            .and_then(|(_, l)| l.parse().ok())
            .ok_or_else(|| Error::Format {
                path: path.clone(),
                reason: format!("bad row {line:?}"),
            })?;
        labels.push(label);
    }
    FeatureSet::new(t.shape()[1], t.data().to_vec(), labels, class_count)
}
