//! Per-patch photometric augmentation. Each patch draws its own operators and
//! parameters from a patch-specific stream and never reads pixels outside itself.

use crate::error::{Error, Result};
use crate::imagedata::{Image, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhotoOp {
    /// Strengths `s` give factors uniform in `[max(0, 1 - s), 1 + s]`.
    ColorJitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
    },
    /// `v >= threshold` becomes `1 - v`.
    Solarize {
        threshold: f64,
    },
    /// Sigma uniform in `[sigma_min, sigma_max]`, in pixels.
    GaussianBlur {
        sigma_min: f64,
        sigma_max: f64,
    },
    GaussianNoise {
        std: f64,
    },
}

impl PhotoOp {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            PhotoOp::ColorJitter {
                brightness,
                contrast,
                saturation,
            } => brightness >= 0.0 && contrast >= 0.0 && saturation >= 0.0,
            PhotoOp::Solarize { threshold } => (0.0..=1.0).contains(&threshold),
            PhotoOp::GaussianBlur { sigma_min, sigma_max } => sigma_min >= 0.0 && sigma_max >= sigma_min,
            PhotoOp::GaussianNoise { std } => std >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid photometric operator {self:?}")))
        }
    }
}

/// An operator and the probability it is applied to a given patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotoStep {
    pub op: PhotoOp,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhotoConfig {
    pub steps: Vec<PhotoStep>,
}

impl PhotoConfig {
    pub fn none() -> Self {
        Self { steps: Vec::new() }
    }
}

impl Default for PhotoConfig {
    fn default() -> Self {
        Self {
            steps: vec![
                PhotoStep {
                    op: PhotoOp::ColorJitter {
                        brightness: 0.4,
                        contrast: 0.4,
                        saturation: 0.2,
                    },
                    prob: 0.8,
                },
                PhotoStep {
                    op: PhotoOp::Solarize { threshold: 0.5 },
                    prob: 0.2,
                },
                PhotoStep {
                    op: PhotoOp::GaussianBlur {
                        sigma_min: 0.1,
                        sigma_max: 1.0,
                    },
                    prob: 0.5,
                },
                PhotoStep {
                    op: PhotoOp::GaussianNoise { std: 0.05 },
                    prob: 0.2,
                },
            ],
        }
    }
}

/// A patch copied out of an image: `pix[c][y * size + x]`.
struct Patch {
    size: usize,
    pix: [Vec<f32>; 3],
}

impl Patch {
    fn read(img: &Image, y0: usize, x0: usize, size: usize) -> Self {
        let plane = |c| {
            let mut v = Vec::with_capacity(size * size);
            for y in 0..size {
                for x in 0..size {
                    v.push(img.get(c, y0 + y, x0 + x));
                }
            }
            v
        };
        Self {
            size,
            pix: [plane(0), plane(1), plane(2)],
        }
    }

    fn write(&self, img: &mut Image, y0: usize, x0: usize) {
        for c in 0..3 {
            for y in 0..self.size {
                for x in 0..self.size {
                    img.set(c, y0 + y, x0 + x, self.pix[c][y * self.size + x]);
                }
            }
        }
    }

    fn map(&mut self, mut f: impl FnMut(f32) -> f32) {
        for plane in &mut self.pix {
            for v in plane.iter_mut() {
                *v = f(*v).clamp(0.0, 1.0);
            }
        }
    }

    fn gray(&self, i: usize) -> f32 {
        0.299 * self.pix[0][i] + 0.587 * self.pix[1][i] + 0.114 * self.pix[2][i]
    }

    fn jitter(&mut self, rng: &mut Rng, brightness: f64, contrast: f64, saturation: f64) {
        let factor = |rng: &mut Rng, s: f64| rng.uniform_in((1.0 - s).max(0.0), 1.0 + s) as f32;
        if brightness > 0.0 {
            let b = factor(rng, brightness);
            self.map(|v| v * b);
        }
        if contrast > 0.0 {
            let c = factor(rng, contrast);
            let n = self.size * self.size;
            let mean = (0..n).map(|i| self.gray(i)).sum::<f32>() / n as f32;
            self.map(|v| mean + c * (v - mean));
        }
        if saturation > 0.0 {
            let s = factor(rng, saturation);
            let gray: Vec<f32> = (0..self.size * self.size).map(|i| self.gray(i)).collect();
            for plane in &mut self.pix {
                for (v, g) in plane.iter_mut().zip(&gray) {
                    *v = (g + s * (*v - g)).clamp(0.0, 1.0);
                }
            }
        }
    }

    /// Separable blur; reads beyond the patch edge are clamped to the edge.
    fn blur(&mut self, sigma: f64) {
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel: Vec<f32> = (-radius..=radius)
            .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp() as f32)
            .collect();
        let total: f32 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= total);
        let n = self.size as isize;
        let clamp = |i: isize| i.clamp(0, n - 1) as usize;
        for plane in &mut self.pix {
            let src = plane.clone();
            for y in 0..n {
                for x in 0..n {
                    let mut acc = 0.0;
                    for (k, d) in kernel.iter().zip(-radius..=radius) {
                        acc += k * src[(y * n) as usize + clamp(x + d)];
                    }
                    plane[(y * n + x) as usize] = acc;
                }
            }
            let src = plane.clone();
            for y in 0..n {
                for x in 0..n {
                    let mut acc = 0.0;
                    for (k, d) in kernel.iter().zip(-radius..=radius) {
                        acc += k * src[clamp(y + d) * self.size + x as usize];
                    }
                    plane[(y * n + x) as usize] = acc.clamp(0.0, 1.0);
                }
            }
        }
    }

    fn apply(&mut self, op: &PhotoOp, rng: &mut Rng) {
        match *op {
            PhotoOp::ColorJitter {
                brightness,
                contrast,
                saturation,
            } => self.jitter(rng, brightness, contrast, saturation),
            PhotoOp::Solarize { threshold } => {
                let t = threshold as f32;
                self.map(|v| if v >= t { 1.0 - v } else { v });
            }
            PhotoOp::GaussianBlur { sigma_min, sigma_max } => {
                let sigma = rng.uniform_in(sigma_min, sigma_max);
                if sigma > 0.0 {
                    self.blur(sigma);
                }
            }
            PhotoOp::GaussianNoise { std } => {
                if std > 0.0 {
                    for plane in &mut self.pix {
                        for v in plane.iter_mut() {
                            *v = (*v + (std * rng.normal()) as f32).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
    }
}

/// Applies each step to each patch independently with the step's probability.
/// Patch `t` (row-major) uses the stream `rng.derive(("patch", t))`.
pub fn photometric_patch_augment(img: &Image, patch_size: usize, steps: &[PhotoStep], rng: &Rng) -> Result<Image> {
    if patch_size == 0 || !img.height().is_multiple_of(patch_size) || !img.width().is_multiple_of(patch_size) {
        return Err(Error::Config(format!(
            "patch size {patch_size} does not divide {}x{}",
            img.height(),
            img.width()
        )));
    }
    for step in steps {
        step.op.validate()?;
    }
    let mut out = img.clone();
    if steps.iter().all(|s| s.prob <= 0.0) {
        return Ok(out);
    }
    let cols = img.width() / patch_size;
    for py in 0..img.height() / patch_size {
        for px in 0..cols {
            let mut patch_rng = rng.derive(&["patch".into(), (py * cols + px).into()]);
            let mut patch = Patch::read(img, py * patch_size, px * patch_size, patch_size);
            let mut touched = false;
            for step in steps {
                if patch_rng.bernoulli(step.prob) {
                    patch.apply(&step.op, &mut patch_rng);
                    touched = true;
                }
            }
            if touched {
                patch.write(&mut out, py * patch_size, px * patch_size);
            }
        }
    }
    Ok(out)
}
