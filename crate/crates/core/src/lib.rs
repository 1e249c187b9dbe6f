//! Patch-wise self-supervised representation learning at desk scale.
//!
//! Two crops of each image are matched patch by patch in constant time from
//! their crop coordinates, a micro vision transformer is trained by
//! student/teacher self-distillation on both the CLS token and the matched patch
//! tokens, and the learned features are evaluated with KNN and linear probes.
//!
//! Module map:
//! - [`imagedata`]: images, the CIFAR-10 loader, splittable random streams
//! - [`geometry`]: crop intersection and patch matching
//! - [`augment`]: coordinate-tracked crops and per-patch photometric jitter
//! - [`autodiff`]: dense tensors with a reverse-mode tape
//! - [`model`]: the encoder, projection head and output distributions
//! - [`losses`]: DINO / PWML / PWSL / PWLL
//! - [`tensorfile`]: manifest plus little-endian blob storage
//! - [`trainer`]: configuration, schedules, AdamW, EMA, checkpoints, the loop
//! - [`eval`]: frozen-feature KNN and linear probes

pub mod augment;
pub mod autodiff;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod imagedata;
pub mod losses;
pub mod model;
pub mod tensorfile;
pub mod trainer;

pub use error::{Error, Result};
