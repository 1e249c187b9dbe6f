//! Finite-difference check of the reverse-mode gradients of a small vision
//! transformer trained with each loss, in float64.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use pwself::autodiff::{grad_check, Graph, Tensor, Var};
use pwself::geometry::{CropRecord, Rect};
use pwself::imagedata::Rng;
use pwself::losses::{batched_loss, pair_correspondences, LossKind};
use pwself::model::{forward, Center, ModelConfig, ModelParams};

fn main() -> pwself::Result<()> {
    let cfg = ModelConfig {
        depth: 2,
        dim: 8,
        heads: 2,
        out_dim: 10,
        patch: 4,
        global_size: 16,
        use_pos: true,
    };
    let crops = [
        CropRecord::new(Rect::new(0, 0, 24, 24), 16, false)?,
        CropRecord::new(Rect::new(6, 4, 32, 30), 16, true)?,
        CropRecord::new(Rect::new(8, 8, 20, 20), 8, false)?,
    ];
    let pairs = pair_correspondences(&crops, cfg.patch)?;
    let mut rng = Rng::new(1);
    let batch = 2;
    // patch vectors of each view: [B, tokens, 3 * patch^2]
    let inputs: Vec<Tensor<f64>> = crops
        .iter()
        .map(|c| Tensor::randn(&[batch, (c.out_size / cfg.patch).pow(2), 48], 1.0, &mut rng))
        .collect();
    let teacher: Vec<Tensor<f64>> = inputs[..2]
        .iter()
        .map(|x| Tensor::randn(&[batch, x.shape()[1] + 1, cfg.out_dim], 2.0, &mut rng))
        .collect();
    let params = ModelParams::<f64>::init(cfg, &mut rng)?;
    let center = Center::zeros(cfg.out_dim);

    for kind in [LossKind::Dino, LossKind::Pwml, LossKind::Pwsl, LossKind::Pwll(0.2)] {
        let f = |g: &mut Graph<f64>, p: &[Var]| {
            let t: Vec<Var> = teacher.iter().map(|x| g.constant(x.clone())).collect();
            let mut s = Vec::new();
            for x in &inputs {
                let x = g.constant(x.clone());
                s.push(forward(g, &cfg, p, x, true)?.logits.expect("head"));
            }
            Ok(batched_loss(g, kind, &t, &center, 0.3, &s, 0.5, &pairs)?.loss)
        };
        let err = grad_check(f, &params.tensors, 1e-5, 400, &mut Rng::new(2))?;
        println!("{:>5}: max relative error {err:.2e}", kind.to_string());
    }
    Ok(())
}
