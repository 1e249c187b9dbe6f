//! Timing of the matching plan against grid size, of the loss against token
//! count, and of one training step at the default configuration.
//!
//! ```text
//! cargo run --release --example complexity
//! ```

use std::hint::black_box;
use std::time::Instant;

use pwself::autodiff::{Graph, Tensor, Var};
use pwself::geometry::{plan_match, CropRecord, Rect};
use pwself::imagedata::{synthetic_dataset, Rng};
use pwself::losses::{batched_loss, pair_correspondences, LossKind};
use pwself::model::Center;
use pwself::trainer::{TrainConfig, Trainer};

fn crop(x0: usize, y0: usize, x1: usize, y1: usize, s: usize, flip: bool) -> CropRecord {
    CropRecord::new(Rect::new(x0, y0, x1, y1), s, flip).expect("valid crop")
}

fn plan_ns(grid: usize) -> f64 {
    let a = crop(100, 120, 1700, 1650, grid * 16, false);
    let b = crop(300, 200, 1900, 1800, grid * 16, true);
    let reps = 100_000;
    let t = Instant::now();
    for _ in 0..reps {
        black_box(plan_match(black_box(&a), black_box(&b), 16, 16).expect("plan"));
    }
    t.elapsed().as_nanos() as f64 / reps as f64
}

fn loss_ms(side: usize) -> f64 {
    let p = 4;
    let crops = [
        crop(0, 0, 200, 200, side * p, false),
        crop(40, 40, 256, 256, side * p, true),
        crop(20, 30, 120, 130, side * p / 2, false),
        crop(100, 90, 220, 200, side * p / 2, true),
    ];
    let mut rng = Rng::new(0);
    let logits: Vec<Tensor> = crops
        .iter()
        .map(|c| Tensor::randn(&[8, 1 + (c.out_size / p).pow(2), 256], 1.0, &mut rng))
        .collect();
    let center = Center::zeros(256);
    let t = Instant::now();
    for _ in 0..5 {
        let pairs = pair_correspondences(&crops, p).expect("pairs");
        let mut g = Graph::<f32>::new();
        let tv: Vec<Var> = logits[..2].iter().map(|x| g.constant(x.clone())).collect();
        let sv: Vec<Var> = logits.iter().map(|x| g.param(x.clone())).collect();
        let out = batched_loss(&mut g, LossKind::Pwml, &tv, &center, 0.04, &sv, 0.1, &pairs).expect("loss");
        g.backward(out.loss).expect("backward");
    }
    t.elapsed().as_secs_f64() * 1e3 / 5.0
}

fn main() -> pwself::Result<()> {
    println!("plan_match per call:");
    for grid in [6, 12, 24, 48, 96] {
        println!("  {grid:>3}x{grid:<3} grid: {:.0} ns", plan_ns(grid));
    }
    println!("PWML loss forward and backward, batch 8, K 256:");
    for side in [4, 8, 16, 32] {
        println!(
            "  T = {:>4} tokens per global view: {:.2} ms",
            side * side,
            loss_ms(side)
        );
    }

    let cfg = TrainConfig::default();
    let images = synthetic_dataset(cfg.batch_size, 10, 32, 0)?.images;
    let mut trainer = Trainer::new(&cfg, &images)?;
    let rng = trainer.batch_rng(0, 0);
    trainer.step(&images, &rng)?;
    let t = Instant::now();
    let steps = 3;
    for b in 0..steps {
        let rng = trainer.batch_rng(0, b + 1);
        trainer.step(&images, &rng)?;
    }
    let per_step = t.elapsed().as_secs_f64() / steps as f64;
    let steps_5k = 5000usize.div_ceil(cfg.batch_size) * cfg.epochs;
    println!(
        "default config: {per_step:.2} s per step of {} images; {steps_5k} steps for 5000 images x {} epochs is about {:.0} min per run",
        cfg.batch_size,
        cfg.epochs,
        per_step * steps_5k as f64 / 60.0
    );
    Ok(())
}
