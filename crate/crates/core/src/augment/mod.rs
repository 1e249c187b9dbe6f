//! Spatial augmentation that records where each crop came from, and
//! photometric augmentation applied independently to every patch.

mod photometric;
mod spatial;

pub use photometric::{photometric_patch_augment, PhotoConfig, PhotoOp, PhotoStep};
pub use spatial::{apply_crop, sample_crop, spatial_augment, SpatialParams};

use crate::error::{Error, Result};
use crate::geometry::CropRecord;
use crate::imagedata::{Image, Rng};

/// Crop slots for one training step: two global crops followed by `local_count` local crops.
#[derive(Debug, Clone, PartialEq)]
pub struct CropConfig {
    pub global: SpatialParams,
    pub local: SpatialParams,
    pub local_count: usize,
    pub patch_size: usize,
    pub photo: PhotoConfig,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            global: SpatialParams {
                scale_min: 0.4,
                scale_max: 1.0,
                out_size: 32,
                flip_prob: 0.5,
            },
            local: SpatialParams {
                scale_min: 0.05,
                scale_max: 0.4,
                out_size: 16,
                flip_prob: 0.5,
            },
            local_count: 8,
            patch_size: 4,
            photo: PhotoConfig::default(),
        }
    }
}

impl CropConfig {
    pub const GLOBAL_VIEWS: usize = 2;

    pub fn view_count(&self) -> usize {
        Self::GLOBAL_VIEWS + self.local_count
    }

    /// Spatial parameters of slot `k` (globals first).
    pub fn slot(&self, k: usize) -> &SpatialParams {
        if k < Self::GLOBAL_VIEWS {
            &self.global
        } else {
            &self.local
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.global.validate()?;
        self.local.validate()?;
        for (name, size) in [("global", self.global.out_size), ("local", self.local.out_size)] {
            if self.patch_size == 0 || size % self.patch_size != 0 {
                return Err(Error::Config(format!(
                    "patch size {} does not divide {name} size {size}",
                    self.patch_size
                )));
            }
        }
        Ok(())
    }
}

/// Augmented views of one batch. Spatial parameters are shared across the batch.
#[derive(Debug, Clone)]
pub struct BatchViews {
    /// One record per slot, shared by every image of the batch.
    pub crops: Vec<CropRecord>,
    /// `views[slot][image]`.
    pub views: Vec<Vec<Image>>,
}

/// Draws one spatial crop per slot from `batch_rng` and applies it to every
/// image; photometric augmentation is drawn per image and per patch.
pub fn make_batch_views(batch: &[Image], cfg: &CropConfig, batch_rng: &Rng) -> Result<BatchViews> {
    let first = batch.first().ok_or_else(|| Error::Config("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    if let Some(img) = batch.iter().find(|i| i.height() != h || i.width() != w) {
        return Err(Error::shape(
            "make_batch_views",
            format!("mixed image sizes {h}x{w} and {}x{}", img.height(), img.width()),
        ));
    }
    let mut crops = Vec::with_capacity(cfg.view_count());
    let mut views = Vec::with_capacity(cfg.view_count());
    for k in 0..cfg.view_count() {
        let mut spatial_rng = batch_rng.derive(&["spatial".into(), k.into()]);
        let crop = sample_crop(h, w, cfg.slot(k), &mut spatial_rng);
        let mut slot_views = Vec::with_capacity(batch.len());
        for (i, img) in batch.iter().enumerate() {
            let view = apply_crop(img, &crop)?;
            let photo_rng = batch_rng.derive(&["photo".into(), i.into(), k.into()]);
            slot_views.push(photometric_patch_augment(
                &view,
                cfg.patch_size,
                &cfg.photo.steps,
                &photo_rng,
            )?);
        }
        crops.push(crop);
        views.push(slot_views);
    }
    Ok(BatchViews { crops, views })
}
