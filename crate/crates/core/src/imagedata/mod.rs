//! Images, the CIFAR-10 binary loader, a synthetic stand-in dataset and the splittable random streams
//! shared by every other module.

mod cifar;
mod image;
mod rng;
mod synthetic;

pub use cifar::{load_cifar10, load_cifar10_dir, write_cifar10, CifarSplits, CIFAR_RECORD_BYTES};
pub use image::{channel_stats, ChannelStats, Image, LabeledDataset};
pub use rng::{LabelPart, Rng};
pub use synthetic::synthetic_dataset;
