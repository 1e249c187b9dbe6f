//! Seeded labelled images for smoke tests and examples when CIFAR-10 is absent.

use super::{Image, LabeledDataset, Rng};
use crate::error::{Error, Result};

/// `n` images of `size x size`: class `c` is a stripe pattern with a
/// class-specific orientation, frequency and color, drawn with a random phase,
/// contrast and pixel noise.
pub fn synthetic_dataset(n: usize, class_count: usize, size: usize, seed: u64) -> Result<LabeledDataset> {
    if class_count == 0 || size == 0 {
        return Err(Error::Config("synthetic dataset needs classes and a size".into()));
    }
    let root = Rng::new(seed).derive(&["synthetic".into()]);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % class_count;
        let mut rng = root.derive(&["image".into(), i.into()]);
        let angle = std::f64::consts::PI * class as f64 / class_count as f64;
        let freq = 2.0 + (class % 3) as f64;
        let hue = class as f64 / class_count as f64;
        let color = [
            0.5 + 0.4 * (2.0 * std::f64::consts::PI * hue).cos(),
            0.5 + 0.4 * (2.0 * std::f64::consts::PI * (hue + 1.0 / 3.0)).cos(),
            0.5 + 0.4 * (2.0 * std::f64::consts::PI * (hue + 2.0 / 3.0)).cos(),
        ];
        let phase = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
        let contrast = rng.uniform_in(0.6, 1.0);
        let noise: Vec<f64> = (0..3 * size * size).map(|_| 0.05 * rng.normal()).collect();
        let (ca, sa) = (angle.cos(), angle.sin());
        let img = Image::from_fn(size, size, |c, y, x| {
            let u = (x as f64 * ca + y as f64 * sa) / size as f64;
            let wave = 0.5 + 0.5 * contrast * (2.0 * std::f64::consts::PI * freq * u + phase).sin();
            (color[c] * wave + noise[(c * size + y) * size + x]) as f32
        });
        images.push(img);
        labels.push(class);
    }
    LabeledDataset::new(images, labels, class_count)
}
