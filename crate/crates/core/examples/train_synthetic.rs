//! Trains a micro vision transformer on noisy synthetic stripe images and
//! reports KNN and linear-probe accuracy of the teacher before and after.
//!
//! ```text
//! cargo run --release --example train_synthetic -- [epochs] [loss] [lr]
//! ```

use pwself::eval::{extract_features, knn_classify, linear_probe, FeatureSource, ProbeConfig};
use pwself::imagedata::{synthetic_dataset, Image, LabeledDataset, Rng};
use pwself::losses::LossKind;
use pwself::trainer::{Checkpoint, TrainConfig, Trainer};

fn probe(ckpt: &Checkpoint, train: &LabeledDataset, test: &LabeledDataset) -> pwself::Result<(f64, f64)> {
    let src = FeatureSource::TeacherBackbone;
    let (a, b) = (extract_features(ckpt, train, src)?, extract_features(ckpt, test, src)?);
    let probe = ProbeConfig {
        epochs: 30,
        ..ProbeConfig::default()
    };
    Ok((knn_classify(&a, &b, 10)?, linear_probe(&a, &b, &probe)?))
}

fn noisy(mut d: LabeledDataset, rng: &mut Rng) -> LabeledDataset {
    for im in &mut d.images {
        *im = Image::from_fn(im.height(), im.width(), |c, y, x| im.get(c, y, x) + rng.normal() as f32);
    }
    d
}

fn main() -> pwself::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(5, |s| s.parse().expect("epochs"));
    let loss: LossKind = args.next().map_or(Ok(LossKind::Pwml), |s| s.parse())?;

    let lr: f64 = args.next().map_or(2e-3, |s| s.parse().expect("lr"));

    let mut rng = Rng::new(9);
    let train = noisy(synthetic_dataset(512, 4, 32, 0)?, &mut rng);
    let test = noisy(synthetic_dataset(256, 4, 32, 1)?, &mut rng);
    let mut cfg = TrainConfig::parse(
        "batch_size = 32\nmodel.depth = 2\nmodel.dim = 32\nmodel.heads = 2\nmodel.out_dim = 256\nlocal.count = 4\n",
    )?;
    cfg.epochs = epochs;
    cfg.loss = loss;
    cfg.base_lr = Some(lr);

    let mut trainer = Trainer::new(&cfg, &train.images)?;
    let (knn, lin) = probe(&trainer.state, &train, &test)?;
    println!("before: knn@10 {knn:.3}, linear {lin:.3}");
    while !trainer.is_finished() {
        let summary = trainer.run_epoch(&train.images, |_| Ok(()))?;
        println!(
            "epoch {}: loss {:.4}, teacher CLS entropy {:.3}",
            summary.epoch, summary.mean_loss, summary.teacher_cls_entropy
        );
    }
    let (knn, lin) = probe(&trainer.state, &train, &test)?;
    println!("after {epochs} epochs of {loss}: knn@10 {knn:.3}, linear {lin:.3}");
    Ok(())
}
