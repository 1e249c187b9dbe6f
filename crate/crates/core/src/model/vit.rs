use super::params::{ModelConfig, ModelParams};
use crate::autodiff::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::imagedata::{ChannelStats, Image};

const LN_EPS: f64 = 1e-6;

/// Cuts same-sized images into normalized patch vectors: `[B, T, 3 * p * p]`,
/// patches row-major, each vector channel-major then row-major within the patch.
pub fn patchify<T: Scalar>(images: &[&Image], patch: usize, stats: &ChannelStats) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Config("patchify needs at least one image".into()))?;
    let (h, w) = (first.height(), first.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!("patch {patch} does not divide {h}x{w}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(Error::shape("patchify", "images of different sizes"));
        }
        for py in 0..gh {
            for px in 0..gw {
                for c in 0..3 {
                    let (m, s) = (stats.mean[c], stats.std[c]);
                    for y in 0..patch {
                        for x in 0..patch {
                            let v = (img.get(c, py * patch + y, px * patch + x) - m) / s;
                            data.push(T::from_f64(v as f64));
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[images.len(), gh * gw, 3 * patch * patch], data)
}

/// Bilinear resampling of a `from x from` grid to `to x to`: `[to^2, from^2]`.
pub fn pos_interp_matrix<T: Scalar>(from: usize, to: usize) -> Tensor<T> {
    let taps = |i: usize| {
        let s = ((i as f64 + 0.5) * from as f64 / to as f64 - 0.5).clamp(0.0, (from - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(from - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut m = vec![0.0f64; to * to * from * from];
    for y in 0..to {
        let (y0, y1, fy) = taps(y);
        for x in 0..to {
            let (x0, x1, fx) = taps(x);
            let row = &mut m[(y * to + x) * from * from..(y * to + x + 1) * from * from];
            row[y0 * from + x0] += (1.0 - fy) * (1.0 - fx);
            row[y0 * from + x1] += (1.0 - fy) * fx;
            row[y1 * from + x0] += fy * (1.0 - fx);
            row[y1 * from + x1] += fy * fx;
        }
    }
    Tensor::from_f64(&[to * to, from * from], &m).expect("sized above")
}

/// Encoder outputs for a batch of same-sized views.
#[derive(Debug, Clone, Copy)]
pub struct EncodeOutput {
    /// Final-norm token embeddings `[B, 1 + T, dim]`; row 0 is CLS.
    pub backbone: Var,
    /// Head logits `[B, 1 + T, K]`, absent when the head was skipped.
    pub logits: Option<Var>,
}

fn attention<T: Scalar>(g: &mut Graph<T>, cfg: &ModelConfig, p: &[Var], base: usize, x: Var) -> Result<Var> {
    let d = cfg.dim;
    let dh = d / cfg.heads;
    let qkv = g.linear(x, p[base + 2], p[base + 3])?;
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let q = g.slice(qkv, 2, h * dh, dh)?;
        let k = g.slice(qkv, 2, d + h * dh, dh)?;
        let v = g.slice(qkv, 2, 2 * d + h * dh, dh)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = g.softmax(scores);
        heads.push(g.matmul(weights, v)?);
    }
    let merged = g.concat(&heads, 2)?;
    g.linear(merged, p[base + 4], p[base + 5])
}

fn block<T: Scalar>(g: &mut Graph<T>, cfg: &ModelConfig, p: &[Var], b: usize, x: Var) -> Result<Var> {
    let base = cfg.block_base(b);
    let h = g.layer_norm(x, p[base], p[base + 1], LN_EPS)?;
    let a = attention(g, cfg, p, base, h)?;
    let x = g.add(x, a)?;
    let h = g.layer_norm(x, p[base + 6], p[base + 7], LN_EPS)?;
    let h = g.linear(h, p[base + 8], p[base + 9])?;
    let h = g.gelu(h);
    let h = g.linear(h, p[base + 10], p[base + 11])?;
    g.add(x, h)
}

/// Runs the encoder (and optionally the head) on patch vectors `[B, T, 3p^2]`
/// from a square grid. `params` are handles in layout order.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    params: &[Var],
    patches: Var,
    with_head: bool,
) -> Result<EncodeOutput> {
    let shape = g.shape(patches).to_vec();
    if shape.len() != 3 || shape[2] != cfg.patch_features() {
        return Err(Error::shape(
            "forward",
            format!("patches {shape:?}, expected [B, T, {}]", cfg.patch_features()),
        ));
    }
    let (batch, tokens) = (shape[0], shape[1]);
    let grid = (tokens as f64).sqrt().round() as usize;
    if grid * grid != tokens {
        return Err(Error::shape(
            "forward",
            format!("{tokens} patches is not a square grid"),
        ));
    }
    if params.len() != cfg.layout().len() {
        return Err(Error::shape(
            "forward",
            format!("{} parameter handles for {} arrays", params.len(), cfg.layout().len()),
        ));
    }
    let x = g.linear(patches, params[0], params[1])?;
    let ones = g.constant(Tensor::ones(&[batch, 1, 1]));
    let cls = g.matmul(ones, params[2])?;
    let mut x = g.concat(&[cls, x], 1)?;
    if cfg.use_pos {
        let global = cfg.global_grid();
        let pos = if grid == global {
            params[3]
        } else {
            let m = g.constant(pos_interp_matrix(global, grid));
            g.matmul(m, params[3])?
        };
        // CLS takes no positional term
        let zero = g.constant(Tensor::zeros(&[1, cfg.dim]));
        let pos = g.concat(&[zero, pos], 0)?;
        x = g.add(x, pos)?;
    }
    for b in 0..cfg.depth {
        x = block(g, cfg, params, b, x)?;
    }
    let n = cfg.final_norm();
    let backbone = g.layer_norm(x, params[n], params[n + 1], LN_EPS)?;
    let logits = if with_head {
        let h = cfg.head_base();
        let y = g.linear(backbone, params[h], params[h + 1])?;
        let y = g.gelu(y);
        let y = g.linear(y, params[h + 2], params[h + 3])?;
        let y = g.gelu(y);
        Some(g.linear(y, params[h + 4], params[h + 5])?)
    } else {
        None
    };
    Ok(EncodeOutput { backbone, logits })
}

/// Token logits `[1 + T, K]` of one view; row 0 is the CLS token.
pub fn encode<T: Scalar>(params: &ModelParams<T>, view: &Image, stats: &ChannelStats) -> Result<Tensor<T>> {
    let cfg = &params.config;
    let patches = patchify::<T>(&[view], cfg.patch, stats)?;
    let mut g = Graph::new();
    let handles: Vec<Var> = params.tensors.iter().map(|t| g.constant(t.clone())).collect();
    let input = g.constant(patches);
    let out = forward(&mut g, cfg, &handles, input, true)?;
    let logits = g.value(out.logits.expect("head requested")).clone();
    let rows = logits.shape()[1];
    logits.reshaped(&[rows, cfg.out_dim])
}
