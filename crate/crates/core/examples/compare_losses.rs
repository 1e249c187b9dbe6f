//! Evaluates the four losses on the same random logits and crops, with the
//! per-pair weights each one uses.
//!
//! ```text
//! cargo run --example compare_losses
//! ```

use pwself::augment::{sample_crop, CropConfig};
use pwself::autodiff::{Graph, Tensor, Var};
use pwself::geometry::CropRecord;
use pwself::imagedata::Rng;
use pwself::losses::{batched_loss, pair_correspondences, LossKind};
use pwself::model::Center;

fn main() -> pwself::Result<()> {
    let cfg = CropConfig::default();
    let mut rng = Rng::new(7);
    let crops: Vec<CropRecord> = (0..cfg.view_count())
        .map(|v| sample_crop(32, 32, cfg.slot(v), &mut rng))
        .collect();
    let pairs = pair_correspondences(&crops, cfg.patch_size)?;
    let k = 64;
    let batch = 4;
    let logits: Vec<Tensor> = crops
        .iter()
        .map(|c| Tensor::randn(&[batch, 1 + (c.out_size / cfg.patch_size).pow(2), k], 1.0, &mut rng))
        .collect();
    let center = Center::zeros(k);

    let mps: Vec<usize> = pairs.iter().map(|p| p.corr.mp()).collect();
    println!("{} pair terms per image, MP per pair {mps:?}\n", pairs.len());
    for kind in [LossKind::Dino, LossKind::Pwml, LossKind::Pwsl, LossKind::Pwll(0.2)] {
        let mut g = Graph::<f32>::new();
        let t: Vec<Var> = logits[..2].iter().map(|x| g.constant(x.clone())).collect();
        let s: Vec<Var> = logits.iter().map(|x| g.param(x.clone())).collect();
        let out = batched_loss(&mut g, kind, &t, &center, 0.04, &s, 0.1, &pairs)?;
        let w = kind.weights(mps[0]);
        println!(
            "{:>5}: loss {:.4}, {} CE terms, weights for the first pair: CLS {:.3}, patch {:.3}",
            kind.to_string(),
            g.value(out.loss).item()?,
            out.ce_terms,
            w[0],
            w.get(1).copied().unwrap_or(0.0)
        );
    }
    Ok(())
}
