//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use pwself::autodiff::{grad_check, Graph, Tensor, Var};
use pwself::geometry::{CropRecord, Rect};
use pwself::imagedata::{synthetic_dataset, write_cifar10, Rng};
use pwself::losses::{LossKind, PairCorrespondence};
use pwself::model::Center;
use pwself::Result;

/// Brute-force token correspondence. Every patch of each crop is mapped back to
/// original-image coordinates (scaled by the view size so all arithmetic stays in
/// integers) and kept when it overlaps the crop intersection by more than half
/// its width and height. Kept rows and columns are ordered by original-image
/// position, the larger side is subsampled at `floor(i (n - 1) / (m - 1))`
/// (middle for `m = 1`), and matched rows and columns are paired in order.
pub fn oracle_match(a: &CropRecord, b: &CropRecord, pa: usize, pb: usize) -> Vec<(usize, usize)> {
    let ix0 = a.x_min.max(b.x_min);
    let iy0 = a.y_min.max(b.y_min);
    let ix1 = a.x_max.min(b.x_max);
    let iy1 = a.y_max.min(b.y_max);
    let mut out = vec![(0, 0)];
    if ix0 >= ix1 || iy0 >= iy1 {
        return out;
    }
    // (grid index, original-order key) of kept rows and columns
    type Kept = Vec<(usize, i64)>;
    let kept = |c: &CropRecord, p: usize| -> (Kept, Kept, usize) {
        let n = c.out_size / p;
        let s = c.out_size as i64;
        let (w, h) = ((c.x_max - c.x_min) as i64, (c.y_max - c.y_min) as i64);
        let mut cols = Vec::new();
        let mut rows = Vec::new();
        for r in 0..n {
            for col in 0..n {
                // view column `col` shows original columns mirrored when flipped
                let vc = if c.flipped { n - 1 - col } else { col } as i64;
                let x0 = c.x_min as i64 * s + vc * p as i64 * w;
                let x1 = x0 + p as i64 * w;
                let y0 = c.y_min as i64 * s + r as i64 * p as i64 * h;
                let y1 = y0 + p as i64 * h;
                let ox = (x1.min(ix1 as i64 * s) - x0.max(ix0 as i64 * s)).max(0);
                let oy = (y1.min(iy1 as i64 * s) - y0.max(iy0 as i64 * s)).max(0);
                if 2 * ox > p as i64 * w && 2 * oy > p as i64 * h {
                    if !cols.iter().any(|&(j, _)| j == col) {
                        cols.push((col, x0));
                    }
                    if !rows.iter().any(|&(i, _)| i == r) {
                        rows.push((r, y0));
                    }
                }
            }
        }
        cols.sort_by_key(|&(_, k)| k);
        rows.sort_by_key(|&(_, k)| k);
        (rows, cols, n)
    };
    let (ra, ca, na) = kept(a, pa);
    let (rb, cb, nb) = kept(b, pb);
    if ra.is_empty() || rb.is_empty() || ca.is_empty() || cb.is_empty() {
        return out;
    }
    let pick = |x: &[(usize, i64)], y: &[(usize, i64)]| -> Vec<(usize, usize)> {
        let (big_is_x, big, small) = if x.len() >= y.len() {
            (true, x, y)
        } else {
            (false, y, x)
        };
        let (n, m) = (big.len(), small.len());
        (0..m)
            .map(|i| {
                let k = if m == 1 { (n - 1) / 2 } else { i * (n - 1) / (m - 1) };
                if big_is_x {
                    (big[k].0, small[i].0)
                } else {
                    (small[i].0, big[k].0)
                }
            })
            .collect()
    };
    for &(r_a, r_b) in &pick(&ra, &rb) {
        for &(c_a, c_b) in &pick(&ca, &cb) {
            out.push((r_a * na + c_a + 1, r_b * nb + c_b + 1));
        }
    }
    out
}

/// A random crop of an `h x w` image viewed at `out` pixels.
pub fn random_crop(rng: &mut Rng, h: usize, w: usize, out: usize) -> CropRecord {
    let x0 = rng.below(w);
    let y0 = rng.below(h);
    let x1 = x0 + 1 + rng.below(w - x0);
    let y1 = y0 + 1 + rng.below(h - y0);
    CropRecord::new(Rect::new(x0, y0, x1, y1), out, rng.bernoulli(0.5)).unwrap()
}

pub fn flipped(c: &CropRecord) -> CropRecord {
    CropRecord::new(c.rect(), c.out_size, !c.flipped).unwrap()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Row `t` of image `b` in a `[B, tokens, K]` tensor.
fn row(t: &Tensor<f64>, b: usize, tok: usize) -> &[f64] {
    let (n, k) = (t.shape()[1], t.shape()[2]);
    &t.data()[(b * n + tok) * k..(b * n + tok + 1) * k]
}

/// Per-image, per-pair, per-token loop over raw logits.
pub fn naive_loss(
    kind: LossKind,
    teacher: &[Tensor<f64>],
    student: &[Tensor<f64>],
    pairs: &[PairCorrespondence],
    center: &Center,
    tau_t: f64,
    tau_s: f64,
) -> f64 {
    let batch = student[0].shape()[0];
    let mut total = 0.0;
    for b in 0..batch {
        for pc in pairs {
            let ce = |p: usize| -> f64 {
                let (ta, sb) = pc.corr.pairs()[p];
                let t: Vec<f64> = row(&teacher[pc.teacher], b, ta)
                    .iter()
                    .zip(&center.c)
                    .map(|(l, c)| (l - *c as f64) / tau_t)
                    .collect();
                let s: Vec<f64> = row(&student[pc.student], b, sb).iter().map(|l| l / tau_s).collect();
                let (pt, ps) = (softmax(&t), softmax(&s));
                -pt.iter().zip(&ps).map(|(a, q)| a * q.ln()).sum::<f64>()
            };
            let mp = pc.corr.mp();
            total += match kind {
                LossKind::Dino => ce(0),
                LossKind::Pwml => (0..mp).map(ce).sum::<f64>() / mp as f64,
                LossKind::Pwsl => (0..mp).map(ce).sum::<f64>(),
                LossKind::Pwll(l) => {
                    let patch = if mp > 1 {
                        (1..mp).map(ce).sum::<f64>() / (mp - 1) as f64
                    } else {
                        0.0
                    };
                    l * ce(0) + (1.0 - l) * patch
                }
            };
        }
    }
    total / (batch * pairs.len()) as f64
}

pub const ALL_KINDS: [LossKind; 4] = [LossKind::Dino, LossKind::Pwml, LossKind::Pwsl, LossKind::Pwll(0.3)];

/// Writes `data_batch_1.bin` and `test_batch.bin` of synthetic 32x32 images.
pub fn write_cifar_fixture(dir: &Path, n_train: usize, n_test: usize, seed: u64) {
    let train = synthetic_dataset(n_train, 10, 32, seed).unwrap();
    let test = synthetic_dataset(n_test, 10, 32, seed + 1).unwrap();
    write_cifar10(&dir.join("data_batch_1.bin"), &train).unwrap();
    write_cifar10(&dir.join("test_batch.bin"), &test).unwrap();
}

/// Small and fast training configuration text.
pub const TINY_CONFIG: &str = "\
epochs = 2
batch_size = 8
lr = 0.001
global.size = 16
local.size = 8
local.count = 2
model.depth = 1
model.dim = 16
model.heads = 2
model.out_dim = 32
model.patch = 4
loss = pwml
data.train_limit = 32
data.test_limit = 20
";

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Name, scalar-valued function of the parameters, and parameter values for
/// every differentiable graph operation.
pub fn op_suite(rng: &mut Rng) -> Vec<(&'static str, OpFn, Vec<Tensor<f64>>)> {
    let mut r = |shape: &[usize]| Tensor::<f64>::randn(shape, 1.0, rng);
    // Weighting by a fixed random tensor keeps sums from cancelling gradients.
    fn weighted(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
        let w = Tensor::<f64>::randn(g.shape(x), 1.0, &mut Rng::new(seed));
        let w = g.constant(w);
        let y = g.mul(x, w)?;
        Ok(g.sum_all(y))
    }
    let positive = Tensor::<f64>::randn(&[3, 4], 1.0, &mut Rng::new(99)).map(|v| v.abs() + 0.5);
    vec![
        (
            "matmul",
            Box::new(|g: &mut Graph<f64>, p: &[Var]| {
                let y = g.matmul(p[0], p[1])?;
                weighted(g, y, 1)
            }) as OpFn,
            vec![r(&[2, 3, 4]), r(&[2, 4, 5])],
        ),
        (
            "matmul_shared",
            Box::new(|g: &mut Graph<f64>, p: &[Var]| {
                let y = g.matmul(p[0], p[1])?;
                weighted(g, y, 2)
            }),
            vec![r(&[2, 3, 4]), r(&[4, 5])],
        ),
        (
            "add_broadcast",
            Box::new(|g: &mut Graph<f64>, p: &[Var]| {
                let y = g.add(p[0], p[1])?;
                weighted(g, y, 3)
            }),
            vec![r(&[2, 3, 4]), r(&[4])],
        ),
        (
            "mul_broadcast",
            Box::new(|g: &mut Graph<f64>, p: &[Var]| {
                let y = g.mul(p[0], p[1])?;
                weighted(g, y, 4)
            }),
            vec![r(&[2, 3, 4]), r(&[3, 4])],
        ),
        (
            "sub",
            Box::new(|g: &mut Graph<f64>, p: &[Var]| {
                let y = g.sub(p[0], p[1])?;
                weighted(g, y, 5)
            }),
            vec![r(&[3, 4]), r(&[3, 4])],
        ),
        (
            "scale",
            Box::new(|g: &mut Graph<f64>, p: &[Var]| {
                let y = g.scale(p[0], -2.5);
                weighted(g, y, 6)
            }),
            vec![r(&[3, 4])],
        ),
        (
            "transpose",
            Box::new(|g: &mut Graph<f64>, p: &[Var]| {
                let y = g.transpose(p[0])?;
                weighted(g, y, 7)
            }),
            vec![r(&[2, 3, 4])],
        ),
        (
            "reshape",
            Box::new(|g: &mut Graph<f64>, p: &[Var]| {
                let y = g.reshape(p[0], &[6, 4])?;
                weighted(g, y, 8)
            }),
            vec![r(&[2, 3, 4])],
        ),
        (
            "concat",
            Box::new(|g: &mut Graph<f64>, p: &[Var]| {
                let y = g.concat(&[p[0], p[1]], 1)?;
                weighted(g, y, 9)
            }),
            vec![r(&[2, 3, 4]), r(&[2, 2, 4])],
        ),
        (
            "slice",
            Box::new(|g: &mut Graph<f64>, p: &[Var]| {
                let y = g.slice(p[0], 2, 1, 2)?;
                weighted(g, y, 10)
            }),
            vec![r(&[2, 3, 4])],
        ),
        (
            "gather",
            Box::new(|g: &mut Graph<f64>, p: &[Var]| {
                let y = g.gather(p[0], 1, &[2, 0, 2, 1])?;
                weighted(g, y, 11)
            }),
            vec![r(&[2, 3, 4])],
        ),
        (
            "sum",
            Box::new(|g: &mut Graph<f64>, p: &[Var]| {
                let y = g.sum(p[0], 1)?;
                weighted(g, y, 12)
            }),
            vec![r(&[2, 3, 4])],
        ),
        (
            "mean",
            Box::new(|g: &mut Graph<f64>, p: &[Var]| {
                let y = g.mean(p[0], 2)?;
                weighted(g, y, 13)
            }),
            vec![r(&[2, 3, 4])],
        ),
        (
            "exp",
            Box::new(|g: &mut Graph<f64>, p: &[Var]| {
                let y = g.exp(p[0]);
                weighted(g, y, 14)
            }),
            vec![r(&[3, 4])],
        ),
        (
            "log",
            Box::new(|g: &mut Graph<f64>, p: &[Var]| {
                let y = g.log(p[0])?;
                weighted(g, y, 15)
            }),
            vec![positive],
        ),
        (
            "softmax",
            Box::new(|g: &mut Graph<f64>, p: &[Var]| {
                let y = g.softmax(p[0]);
                weighted(g, y, 16)
            }),
            vec![r(&[2, 3, 5])],
        ),
        (
            "log_softmax",
            Box::new(|g: &mut Graph<f64>, p: &[Var]| {
                let y = g.log_softmax(p[0]);
                weighted(g, y, 17)
            }),
            vec![r(&[2, 3, 5])],
        ),
        (
            "layer_norm",
            Box::new(|g: &mut Graph<f64>, p: &[Var]| {
                let y = g.layer_norm(p[0], p[1], p[2], 1e-6)?;
                weighted(g, y, 18)
            }),
            vec![r(&[2, 3, 6]), r(&[6]), r(&[6])],
        ),
        (
            "gelu",
            Box::new(|g: &mut Graph<f64>, p: &[Var]| {
                let y = g.gelu(p[0]);
                weighted(g, y, 19)
            }),
            vec![r(&[3, 4])],
        ),
        (
            "linear",
            Box::new(|g: &mut Graph<f64>, p: &[Var]| {
                let y = g.linear(p[0], p[1], p[2])?;
                weighted(g, y, 20)
            }),
            vec![r(&[2, 3, 4]), r(&[4, 5]), r(&[5])],
        ),
    ]
}

/// Worst relative error of every operation in [`op_suite`].
pub fn op_grad_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = Rng::new(seed);
    op_suite(&mut rng)
        .into_iter()
        .map(|(name, f, params)| {
            let err = grad_check(f, &params, 1e-6, 500, &mut Rng::new(seed + 1)).unwrap();
            (name, err)
        })
        .collect()
}

/// Random logits over realistic crops of a 32x32 image.
pub struct LossCase {
    pub teacher: Vec<Tensor<f64>>,
    pub student: Vec<Tensor<f64>>,
    pub pairs: Vec<PairCorrespondence>,
    pub center: Center,
    pub tau_t: f64,
    pub tau_s: f64,
}

pub fn random_loss_case(rng: &mut Rng, batch: usize, locals: usize, k: usize) -> LossCase {
    use pwself::augment::{sample_crop, CropConfig};
    use pwself::losses::pair_correspondences;
    let cfg = CropConfig {
        local_count: locals,
        ..CropConfig::default()
    };
    let crops: Vec<CropRecord> = (0..cfg.view_count())
        .map(|v| sample_crop(32, 32, cfg.slot(v), rng))
        .collect();
    let pairs = pair_correspondences(&crops, cfg.patch_size).unwrap();
    let tokens = |c: &CropRecord| 1 + (c.out_size / cfg.patch_size).pow(2);
    let scale = rng.uniform_in(0.1, 3.0);
    let teacher = crops[..2]
        .iter()
        .map(|c| Tensor::randn(&[batch, tokens(c), k], scale, rng))
        .collect();
    let student = crops
        .iter()
        .map(|c| Tensor::randn(&[batch, tokens(c), k], scale, rng))
        .collect();
    let center = Center {
        c: (0..k).map(|_| (0.1 * rng.normal()) as f32).collect(),
    };
    LossCase {
        teacher,
        student,
        pairs,
        center,
        tau_t: rng.uniform_in(0.04, 0.07),
        tau_s: 0.1,
    }
}

/// The vectorized graph loss on `case`, in f64.
pub fn graph_loss(kind: LossKind, case: &LossCase) -> f64 {
    graph_loss_with_pairs(kind, case, &case.pairs)
}

pub fn graph_loss_with_pairs(kind: LossKind, case: &LossCase, pairs: &[PairCorrespondence]) -> f64 {
    let mut g = Graph::<f64>::new();
    let t: Vec<Var> = case.teacher.iter().map(|x| g.constant(x.clone())).collect();
    let s: Vec<Var> = case.student.iter().map(|x| g.param(x.clone())).collect();
    let out = pwself::losses::batched_loss(&mut g, kind, &t, &case.center, case.tau_t, &s, case.tau_s, pairs).unwrap();
    g.value(out.loss).item().unwrap()
}

/// Correspondences cut down to the CLS pair.
pub fn cls_only(pairs: &[PairCorrespondence]) -> Vec<PairCorrespondence> {
    pairs
        .iter()
        .map(|p| PairCorrespondence {
            corr: p.corr.truncated(1),
            ..p.clone()
        })
        .collect()
}

fn tiny_model(global_size: usize) -> pwself::model::ModelConfig {
    pwself::model::ModelConfig {
        depth: 1,
        dim: 8,
        heads: 2,
        out_dim: 6,
        patch: 4,
        global_size,
        use_pos: true,
    }
}

/// Finite-difference error of the PWML loss through a whole student forward
/// pass (two globals, two locals, float64).
pub fn end_to_end_pwml_error(seed: u64) -> f64 {
    use pwself::augment::{make_batch_views, CropConfig, PhotoConfig, SpatialParams};
    use pwself::losses::{batched_loss, pair_correspondences};
    use pwself::model::{forward, patchify, ModelParams};
    let cfg = tiny_model(16);
    let defaults = CropConfig::default();
    let crop = CropConfig {
        global: SpatialParams {
            out_size: 16,
            ..defaults.global
        },
        local: SpatialParams {
            out_size: 8,
            ..defaults.local
        },
        local_count: 2,
        patch_size: 4,
        photo: PhotoConfig::none(),
    };
    let imgs = synthetic_dataset(2, 2, 32, seed).unwrap().images;
    let views = make_batch_views(&imgs, &crop, &Rng::new(seed + 1)).unwrap();
    let pairs = pair_correspondences(&views.crops, 4).unwrap();
    let stats = Default::default();
    let patches: Vec<Tensor<f64>> = views
        .views
        .iter()
        .map(|v| patchify(&v.iter().collect::<Vec<_>>(), 4, &stats).unwrap())
        .collect();
    let mut rng = Rng::new(seed + 2);
    let student = ModelParams::<f64>::init(cfg, &mut rng).unwrap();
    let teacher_logits: Vec<Tensor<f64>> = patches[..2]
        .iter()
        .map(|p| Tensor::randn(&[2, p.shape()[1] + 1, cfg.out_dim], 1.0, &mut rng))
        .collect();
    let center = Center::zeros(cfg.out_dim);
    let f = |g: &mut Graph<f64>, p: &[Var]| {
        let t: Vec<Var> = teacher_logits.iter().map(|x| g.constant(x.clone())).collect();
        let mut s = Vec::new();
        for x in &patches {
            let x = g.constant(x.clone());
            s.push(forward(g, &cfg, p, x, true)?.logits.expect("head"));
        }
        Ok(batched_loss(g, LossKind::Pwml, &t, &center, 0.5, &s, 0.5, &pairs)?.loss)
    };
    grad_check(f, &student.tensors, 1e-5, 300, &mut Rng::new(seed + 3)).unwrap()
}

/// Teacher and student in one tape, both as parameters. Returns for each loss
/// whether every teacher gradient is exactly zero and whether the student got
/// a nonzero gradient.
pub fn stop_gradient_probe(seed: u64) -> Vec<(LossKind, bool, bool)> {
    use pwself::geometry::Correspondence;
    use pwself::losses::batched_loss;
    use pwself::model::{forward, ModelParams};
    let cfg = tiny_model(8);
    let mut rng = Rng::new(seed);
    let student = ModelParams::<f64>::init(cfg, &mut rng).unwrap();
    let teacher = ModelParams::<f64>::init(cfg, &mut rng).unwrap();
    let x_global = Tensor::<f64>::randn(&[2, 4, 48], 1.0, &mut rng);
    let pairs = vec![
        PairCorrespondence {
            teacher: 0,
            student: 1,
            corr: Correspondence::from_pairs(vec![(0, 0), (1, 2), (4, 3)]).unwrap(),
        },
        PairCorrespondence {
            teacher: 1,
            student: 0,
            corr: Correspondence::from_pairs(vec![(0, 0), (2, 1)]).unwrap(),
        },
    ];
    ALL_KINDS
        .iter()
        .map(|&kind| {
            let mut g = Graph::<f64>::new();
            let tv: Vec<Var> = teacher.tensors.iter().map(|t| g.param(t.clone())).collect();
            let sv: Vec<Var> = student.tensors.iter().map(|t| g.param(t.clone())).collect();
            let x = g.constant(x_global.clone());
            let t_out = forward(&mut g, &cfg, &tv, x, true).unwrap().logits.unwrap();
            let s_out = forward(&mut g, &cfg, &sv, x, true).unwrap().logits.unwrap();
            let t_views: Vec<Var> = (0..2).map(|i| g.slice(t_out, 0, i, 1).unwrap()).collect();
            let s_views: Vec<Var> = (0..2).map(|i| g.slice(s_out, 0, i, 1).unwrap()).collect();
            let center = Center::zeros(cfg.out_dim);
            let out = batched_loss(&mut g, kind, &t_views, &center, 0.05, &s_views, 0.1, &pairs).unwrap();
            g.backward(out.loss).unwrap();
            let teacher_zero = tv
                .iter()
                .all(|&v| g.grad(v).is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));
            let student_moves = sv
                .iter()
                .any(|&v| g.grad(v).is_some_and(|t| t.data().iter().any(|&x| x != 0.0)));
            (kind, teacher_zero, student_moves)
        })
        .collect()
}
