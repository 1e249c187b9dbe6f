//! Acceptance suite. Runs every criterion and prints one line per criterion:
//! `criterion N: PASS|FAIL|NOT RUN <detail>`. Exits nonzero if any criterion fails.
//!
//! The desk-scale learning run needs the CIFAR-10 binary files; point
//! `PWSELF_CIFAR10_DIR` at the directory holding `data_batch_*.bin` and
//! `test_batch.bin` to enable it.

mod common;

use std::hint::black_box;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use common::{
    cls_only, end_to_end_pwml_error, flipped, graph_loss, graph_loss_with_pairs, naive_loss, op_grad_errors,
    oracle_match, random_crop, random_loss_case, stop_gradient_probe, write_cifar_fixture, ALL_KINDS, TINY_CONFIG,
};
use pwself::autodiff::{Graph, Tensor, Var};
use pwself::eval::{extract_features, knn_classify, FeatureSource};
use pwself::geometry::{match_patches, plan_match, select_indices, CropRecord, MatchPlan, Rect};
use pwself::imagedata::{load_cifar10_dir, synthetic_dataset, Rng};
use pwself::losses::{batched_loss, enumerate_pairs, pair_correspondences, LossKind};
use pwself::model::{student_dist, teacher_dist, teacher_probs, Center};
use pwself::trainer::{train, TrainConfig, Trainer, METRICS_FILE};

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn crop(x0: usize, y0: usize, x1: usize, y1: usize, s: usize, flip: bool) -> CropRecord {
    CropRecord::new(Rect::new(x0, y0, x1, y1), s, flip).unwrap()
}

fn criterion_1() -> Check {
    let global = crop(100, 100, 380, 380, 224, false);
    let local = crop(40, 20, 220, 180, 96, false);
    let corr = match_patches(&global, &local, 16, 16).map_err(|e| e.to_string())?;
    let patches = &corr.pairs()[1..];
    let mut rows: Vec<usize> = patches.iter().map(|&(a, _)| (a - 1) / 14).collect();
    let mut cols: Vec<usize> = patches.iter().map(|&(a, _)| (a - 1) % 14).collect();
    rows.dedup();
    cols.sort_unstable();
    cols.dedup();
    ensure(corr.mp() == 13, || format!("MP = {}", corr.mp()))?;
    ensure(rows == [0, 1, 3] && cols == [0, 1, 3, 5], || {
        format!("rows {rows:?} cols {cols:?}")
    })?;
    ensure(corr.pairs().to_vec() == oracle_match(&global, &local, 16, 16), || {
        "oracle disagrees".into()
    })?;
    Ok("MP=13, global rows {0,1,3}, columns {0,1,3,5}".into())
}

fn mirror(tok: usize, n: usize) -> usize {
    if tok == 0 {
        0
    } else {
        let (r, c) = ((tok - 1) / n, (tok - 1) % n);
        r * n + (n - 1 - c) + 1
    }
}

/// Both ends of the larger side are used whenever two or more lines are matched.
fn endpoints_hold(plan: &MatchPlan) -> bool {
    let axis = |m: &pwself::geometry::AxisMatch, a_start: usize, a_count: usize, b_start: usize, b_count: usize| {
        let k = m.len();
        k < 2 || (m.pair(0) == (a_start, b_start) && m.pair(k - 1) == (a_start + a_count - 1, b_start + b_count - 1))
    };
    let (a, b) = (&plan.slice_a, &plan.slice_b);
    axis(&plan.rows, a.row_start, a.row_count, b.row_start, b.row_count)
        && axis(&plan.cols, a.col_start, a.col_count, b.col_start, b.col_count)
}

fn criterion_2() -> Check {
    let mut rng = Rng::new(2024);
    let mut overlapping = 0;
    for i in 0..10_000 {
        let (pa, pb) = [(4, 4), (4, 2), (8, 4)][i % 3];
        let a = random_crop(&mut rng, 64, 48, 8 * pa);
        let b = random_crop(&mut rng, 64, 48, 4 * pb);
        let ab = match_patches(&a, &b, pa, pb).map_err(|e| e.to_string())?;
        let ctx = || format!("case {i}: {a} / {b}");
        ensure(ab.pairs().to_vec() == oracle_match(&a, &b, pa, pb), || {
            format!("{} oracle", ctx())
        })?;
        ensure(match_patches(&b, &a, pb, pa).unwrap() == ab.swapped(), || {
            format!("{} symmetry", ctx())
        })?;
        let twice = match_patches(&flipped(&flipped(&a)), &b, pa, pb).unwrap();
        ensure(twice == ab, || format!("{} flip involution", ctx()))?;
        let both = match_patches(&flipped(&a), &flipped(&b), pa, pb).unwrap();
        let mirrored: Vec<(usize, usize)> = ab
            .pairs()
            .iter()
            .map(|&(x, y)| (mirror(x, a.out_size / pa), mirror(y, b.out_size / pb)))
            .collect();
        ensure(both.pairs().to_vec() == mirrored, || {
            format!("{} flip equivariance", ctx())
        })?;
        ensure(endpoints_hold(&plan_match(&a, &b, pa, pb).unwrap()), || {
            format!("{} endpoints", ctx())
        })?;
        overlapping += usize::from(ab.mp() > 1);
    }
    for n in 2..200 {
        for m in 2..=n.min(50) {
            let s = select_indices(n, m);
            ensure(s[0] == 0 && s[m - 1] == n - 1, || {
                format!("select_indices({n}, {m}) = {s:?}")
            })?;
        }
    }
    Ok(format!("10000 crop pairs ({overlapping} overlapping) exact"))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Mean time of one `plan_match` call on `grid x grid` token grids.
fn time_plan(grid: usize) -> f64 {
    let p = 16;
    let a = crop(100, 120, 1700, 1650, grid * p, false);
    let b = crop(300, 200, 1900, 1800, grid * p, true);
    let reps = 20_000;
    let t = Instant::now();
    for _ in 0..reps {
        black_box(plan_match(black_box(&a), black_box(&b), p, p).unwrap());
    }
    t.elapsed().as_secs_f64() / reps as f64
}

/// Correspondences plus loss forward and backward with `side x side` global
/// grids. Returns one closure per grid so the two sizes can be timed interleaved.
fn loss_workload(side: usize) -> impl Fn() -> f64 {
    let p = 4;
    let k = 256;
    let batch = 8;
    let crops = [
        crop(0, 0, 200, 200, side * p, false),
        crop(40, 40, 256, 256, side * p, true),
        crop(20, 30, 120, 130, side * p / 2, false),
        crop(100, 90, 220, 200, side * p / 2, true),
        crop(60, 10, 160, 110, side * p / 2, false),
        crop(5, 140, 105, 240, side * p / 2, false),
    ];
    let mut rng = Rng::new(3);
    let logits: Vec<Tensor> = crops
        .iter()
        .map(|c| Tensor::randn(&[batch, 1 + (c.out_size / p).pow(2), k], 1.0, &mut rng))
        .collect();
    let center = Center::zeros(k);
    move || {
        let t = Instant::now();
        let pairs = pair_correspondences(&crops, p).unwrap();
        let mut g = Graph::<f32>::new();
        let tv: Vec<Var> = logits[..2].iter().map(|x| g.constant(x.clone())).collect();
        let sv: Vec<Var> = logits.iter().map(|x| g.param(x.clone())).collect();
        let out = batched_loss(&mut g, LossKind::Pwml, &tv, &center, 0.04, &sv, 0.1, &pairs).unwrap();
        g.backward(out.loss).unwrap();
        black_box(g.grad(sv[0]));
        t.elapsed().as_secs_f64()
    }
}

/// Median of time(T) / time(T / 4), with the two sizes measured alternately.
fn loss_ratio(side: usize) -> f64 {
    let (large, small) = (loss_workload(side), loss_workload(side / 2));
    large();
    small();
    median((0..31).map(|_| large() / small()).collect())
}

fn criterion_3() -> Check {
    let plan_ratio = median((0..31).map(|_| time_plan(96) / time_plan(6)).collect());
    let r64 = loss_ratio(8);
    let r256 = loss_ratio(16);
    let detail = format!("plan 96x96/6x6 = {plan_ratio:.2}, loss T=64 ratio {r64:.2}, T=256 ratio {r256:.2}");
    ensure(plan_ratio < 1.5 && r64 < 6.0 && r256 < 6.0, || detail.clone())?;
    Ok(detail)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1.0)
}

fn criterion_4() -> Check {
    let mut rng = Rng::new(4);
    for i in 0..100 {
        let case = random_loss_case(&mut rng, 1 + i % 4, i % 5, 4 + i % 13);
        let ctx = |what: &str| format!("batch {i}: {what}");
        for kind in ALL_KINDS {
            let fast = graph_loss(kind, &case);
            let slow = naive_loss(
                kind,
                &case.teacher,
                &case.student,
                &case.pairs,
                &case.center,
                case.tau_t,
                case.tau_s,
            );
            ensure(close(fast, slow), || ctx(&format!("{kind} {fast} vs naive {slow}")))?;
        }
        let dino = graph_loss(LossKind::Dino, &case);
        let cls = cls_only(&case.pairs);
        ensure(close(graph_loss_with_pairs(LossKind::Pwml, &case, &cls), dino), || {
            ctx("PWML at MP=1")
        })?;
        ensure(close(graph_loss(LossKind::Pwll(1.0), &case), dino), || ctx("PWLL(1)"))?;
        for p in &case.pairs {
            let one = std::slice::from_ref(p);
            let mean = graph_loss_with_pairs(LossKind::Pwml, &case, one);
            let sum = graph_loss_with_pairs(LossKind::Pwsl, &case, one);
            ensure(close(sum, p.corr.mp() as f64 * mean), || ctx("PWSL = MP * PWML"))?;
        }
    }
    Ok("100 random batches within 1e-5".into())
}

fn criterion_5() -> Check {
    let errs = op_grad_errors(5);
    let (worst_op, worst) = errs
        .iter()
        .copied()
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let e2e = end_to_end_pwml_error(5);
    let detail = format!(
        "{} ops, worst {worst_op} {worst:.2e}; end-to-end PWML {e2e:.2e}",
        errs.len()
    );
    ensure(worst < 1e-3 && e2e < 1e-3, || detail.clone())?;
    Ok(detail)
}

fn criterion_6() -> Check {
    for (kind, teacher_zero, student_moves) in stop_gradient_probe(6) {
        ensure(teacher_zero, || format!("{kind}: teacher gradient nonzero"))?;
        ensure(student_moves, || format!("{kind}: student gradient is zero"))?;
    }
    Ok("teacher gradients exactly zero for dino, pwml, pwsl, pwll".into())
}

fn criterion_7() -> Check {
    let mut rng = Rng::new(7);
    let mut worst_sum = 0f64;
    let mut worst_shift32 = 0f64;
    for i in 0..200 {
        let k = 2 + i % 60;
        let spread = [0.1, 1.0, 10.0, 40.0][i % 4];
        let logits: Vec<f64> = (0..k).map(|_| spread * rng.normal()).collect();
        let center = Center {
            c: (0..k).map(|_| rng.normal() as f32).collect(),
        };
        for row in [student_dist(&logits, 0.1), teacher_dist(&logits, 0.04, &center)] {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        // float32 rows as used in training
        let rows = 8;
        let batch: Vec<f64> = (0..rows * k).map(|_| spread * rng.normal()).collect();
        let t32 = Tensor::<f32>::from_f64(&[rows, k], &batch).unwrap();
        let p = teacher_probs(&t32, 0.04, &center).unwrap();
        let mut g = Graph::<f32>::new();
        let x = g.constant(t32.clone());
        let x = g.scale(x, 10.0);
        let s = g.softmax(x);
        for r in p.data().chunks(k).chain(g.value(s).data().chunks(k)) {
            worst_sum = worst_sum.max((r.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
        }
        // shift invariance: exact arithmetic, then float32 on exactly representable inputs
        let shift = (rng.normal() * 20.0).round();
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        let (a, b) = (
            teacher_dist(&logits, 0.04, &center),
            teacher_dist(&shifted, 0.04, &center),
        );
        let d64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        ensure(d64 < 1e-12, || format!("float64 shift changed distribution by {d64:e}"))?;
        let exact: Vec<f64> = logits
            .iter()
            .map(|l| (l.clamp(-60.0, 60.0) * 256.0).round() / 256.0)
            .collect();
        let exact_shifted: Vec<f64> = exact.iter().map(|l| l + shift).collect();
        let p = teacher_probs(&Tensor::<f32>::from_f64(&[1, k], &exact).unwrap(), 0.04, &center).unwrap();
        let q = teacher_probs(
            &Tensor::<f32>::from_f64(&[1, k], &exact_shifted).unwrap(),
            0.04,
            &center,
        )
        .unwrap();
        for (x, y) in p.data().iter().zip(q.data()) {
            worst_shift32 = worst_shift32.max((x - y).abs() as f64);
        }
    }
    let detail = format!("worst row-sum error {worst_sum:.1e}, worst float32 shift error {worst_shift32:.1e}");
    ensure(worst_sum <= 1e-5 && worst_shift32 <= 1e-5, || detail.clone())?;
    Ok(detail)
}

fn run_train(dir: &Path, out: &str) -> Result<Vec<u8>, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_pwself"))
        .arg("train")
        .arg("--config")
        .arg(dir.join("tiny.cfg"))
        .arg("--data")
        .arg(dir.join("data"))
        .arg("--out")
        .arg(dir.join(out))
        .args(["--seed", "17"])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), || {
        String::from_utf8_lossy(&status.stderr).into_owned()
    })?;
    std::fs::read(dir.join(out).join(METRICS_FILE)).map_err(|e| e.to_string())
}

fn criterion_8() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    std::fs::create_dir(dir.path().join("data")).map_err(|e| e.to_string())?;
    write_cifar_fixture(&dir.path().join("data"), 32, 20, 8);
    std::fs::write(dir.path().join("tiny.cfg"), TINY_CONFIG).map_err(|e| e.to_string())?;
    let first = run_train(dir.path(), "run1")?;
    let second = run_train(dir.path(), "run2")?;
    let lines = first.iter().filter(|&&c| c == b'\n').count();
    ensure(lines > 1, || "metrics.csv has no rows".into())?;
    ensure(first == second, || "metrics.csv differs between runs".into())?;
    Ok(format!("two train runs, {} metric rows, bit-identical", lines - 1))
}

/// Mean KNN@10 and the lowest teacher CLS entropy seen during training.
fn desk_run(dir: &Path, loss: LossKind, seed: u64) -> Result<(f64, f64), String> {
    let splits = load_cifar10_dir(dir, Some(5000), Some(1000)).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        loss,
        seed,
        ..TrainConfig::default()
    };
    let report = train(&cfg, &splits.train.images, None).map_err(|e| e.to_string())?;
    let min_entropy = report
        .steps
        .iter()
        .map(|s| s.teacher_cls_entropy)
        .fold(f64::INFINITY, f64::min);
    let source = FeatureSource::TeacherBackbone;
    let train_fs = extract_features(&report.checkpoint, &splits.train, source).map_err(|e| e.to_string())?;
    let test_fs = extract_features(&report.checkpoint, &splits.test, source).map_err(|e| e.to_string())?;
    Ok((
        knn_classify(&train_fs, &test_fs, 10).map_err(|e| e.to_string())?,
        min_entropy,
    ))
}

fn criterion_9() -> Outcome {
    let Some(dir) = std::env::var_os("PWSELF_CIFAR10_DIR") else {
        return Outcome::NotRun("set PWSELF_CIFAR10_DIR to the CIFAR-10 binary directory".into());
    };
    let dir = Path::new(&dir);
    let floor = 0.1 * (TrainConfig::default().out_dim as f64).ln();
    let mut pwml = Vec::new();
    let mut dino = Vec::new();
    let mut min_entropy = f64::INFINITY;
    for seed in 0..3 {
        for (kind, acc) in [(LossKind::Pwml, &mut pwml), (LossKind::Dino, &mut dino)] {
            match desk_run(dir, kind, seed) {
                Ok((knn, entropy)) => {
                    acc.push(knn);
                    if kind == LossKind::Pwml {
                        min_entropy = min_entropy.min(entropy);
                    }
                }
                Err(e) => return Outcome::Fail(format!("{kind} seed {seed}: {e}")),
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (p, d) = (mean(&pwml), mean(&dino));
    let detail = format!(
        "PWML knn@10 {pwml:.4?} (mean {p:.4}), DINO {dino:.4?} (mean {d:.4}), min teacher entropy {min_entropy:.3} vs floor {floor:.3}"
    );
    if p >= 0.30 && min_entropy >= floor && p >= d - 0.01 {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn criterion_10() -> Check {
    let terms = enumerate_pairs(2, 10).len();
    ensure(terms == 18, || format!("{terms} pair terms"))?;
    let mut cfg = TrainConfig::parse(TINY_CONFIG).map_err(|e| e.to_string())?;
    cfg.local_count = 8;
    cfg.loss = LossKind::Dino;
    let batch = 4;
    let images = synthetic_dataset(batch, 4, 32, 10).unwrap().images;
    let mut trainer = Trainer::new(&cfg, &images).map_err(|e| e.to_string())?;
    let rng = trainer.batch_rng(0, 0);
    trainer.step(&images, &rng).map_err(|e| e.to_string())?;
    let c = trainer.counters;
    ensure(c.pair_terms == 18, || {
        format!("trainer counted {} pair terms", c.pair_terms)
    })?;
    ensure(c.ce_evaluations == batch * 18, || {
        format!("{} CE evaluations", c.ce_evaluations)
    })?;
    Ok(format!(
        "L=8: 18 pair terms per image, {} DINO CE terms for B={batch}",
        c.ce_evaluations
    ))
}

fn main() -> ExitCode {
    let checks: Vec<(usize, Box<dyn Fn() -> Outcome>)> = vec![
        (1, Box::new(|| criterion_1().into_outcome())),
        (2, Box::new(|| criterion_2().into_outcome())),
        (3, Box::new(|| criterion_3().into_outcome())),
        (4, Box::new(|| criterion_4().into_outcome())),
        (5, Box::new(|| criterion_5().into_outcome())),
        (6, Box::new(|| criterion_6().into_outcome())),
        (7, Box::new(|| criterion_7().into_outcome())),
        (8, Box::new(|| criterion_8().into_outcome())),
        (9, Box::new(criterion_9)),
        (10, Box::new(|| criterion_10().into_outcome())),
    ];
    let mut failed = 0;
    for (n, check) in checks {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::Fail(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Outcome::Pass(d) => println!("criterion {n}: PASS {d} ({secs:.1}s)"),
            Outcome::Fail(d) => {
                failed += 1;
                println!("criterion {n}: FAIL {d} ({secs:.1}s)");
            }
            Outcome::NotRun(d) => println!("criterion {n}: NOT RUN {d}"),
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

trait IntoOutcome {
    fn into_outcome(self) -> Outcome;
}

impl IntoOutcome for Check {
    fn into_outcome(self) -> Outcome {
        match self {
            Ok(d) => Outcome::Pass(d),
            Err(d) => Outcome::Fail(d),
        }
    }
}
