use crate::error::{Error, Result};
use crate::geometry::{CropRecord, Rect};
use crate::imagedata::{Image, Rng};

const ATTEMPTS: usize = 10;
const RATIO_MIN: f64 = 3.0 / 4.0;
const RATIO_MAX: f64 = 4.0 / 3.0;

/// Random-resized-crop parameters for one kind of view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialParams {
    /// Crop area as a fraction of the original image area.
    pub scale_min: f64,
    pub scale_max: f64,
    pub out_size: usize,
    pub flip_prob: f64,
}

impl SpatialParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            return Err(Error::Config(format!(
                "crop scale range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.scale_min, self.scale_max
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip probability {}", self.flip_prob)));
        }
        if self.out_size == 0 {
            return Err(Error::Config("output size must be positive".into()));
        }
        Ok(())
    }
}

/// Draws a crop rectangle and flip flag for a `height x width` image.
///
/// Area fraction is uniform in the scale range and the aspect ratio is
/// log-uniform in `[3/4, 4/3]`. After ten rejected draws the largest centered
/// square is used.
pub fn sample_crop(height: usize, width: usize, p: &SpatialParams, rng: &mut Rng) -> CropRecord {
    let area = (height * width) as f64;
    let mut rect = None;
    for _ in 0..ATTEMPTS {
        let target = area * rng.uniform_in(p.scale_min, p.scale_max);
        let ratio = rng.uniform_in(RATIO_MIN.ln(), RATIO_MAX.ln()).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let x = rng.below(width - w + 1);
            let y = rng.below(height - h + 1);
            rect = Some(Rect::new(x, y, x + w, y + h));
            break;
        }
    }
    let rect = rect.unwrap_or_else(|| {
        let s = height.min(width);
        let (x, y) = ((width - s) / 2, (height - s) / 2);
        Rect::new(x, y, x + s, y + s)
    });
    let flipped = rng.bernoulli(p.flip_prob);
    CropRecord::new(rect, p.out_size, flipped).expect("sampled rectangle is non-empty")
}

/// Source index pairs and blend weights for resampling `[start, end)` to `out` pixels.
fn resample_axis(start: usize, end: usize, out: usize) -> Vec<(usize, usize, f32)> {
    let len = (end - start) as f64;
    let last = (end - 1) as f64;
    (0..out)
        .map(|i| {
            let s = (start as f64 + (i as f64 + 0.5) * len / out as f64 - 0.5).clamp(start as f64, last);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(end - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Cuts the recorded rectangle from `img`, resizes it bilinearly (edge-clamped
/// inside the rectangle) and mirrors it when the record says so.
pub fn apply_crop(img: &Image, crop: &CropRecord) -> Result<Image> {
    if !crop.fits(img.height(), img.width()) {
        return Err(Error::shape(
            "apply_crop",
            format!("crop {crop} outside {}x{} image", img.height(), img.width()),
        ));
    }
    let out = crop.out_size;
    let ys = resample_axis(crop.y_min, crop.y_max, out);
    let mut xs = resample_axis(crop.x_min, crop.x_max, out);
    if crop.flipped {
        xs.reverse();
    }
    let mut data = Vec::with_capacity(3 * out * out);
    for c in 0..3 {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = if fx == 0.0 {
                    img.get(c, y0, x0)
                } else {
                    img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx
                };
                let v = if fy == 0.0 {
                    top
                } else {
                    let bottom = if fx == 0.0 {
                        img.get(c, y1, x0)
                    } else {
                        img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx
                    };
                    top * (1.0 - fy) + bottom * fy
                };
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Image::new(out, out, data)
}

pub fn spatial_augment(img: &Image, p: &SpatialParams, rng: &mut Rng) -> Result<(Image, CropRecord)> {
    let crop = sample_crop(img.height(), img.width(), p, rng);
    Ok((apply_crop(img, &crop)?, crop))
}
