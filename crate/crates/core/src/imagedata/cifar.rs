//! CIFAR-10 binary format: each record is one label byte followed by
//! 3072 pixel bytes (1024 R, then 1024 G, then 1024 B, each row-major 32x32).

use std::fs;
use std::path::Path;

use super::image::{Image, LabeledDataset};
use crate::error::{Error, Result};

const SIDE: usize = 32;
const CLASSES: usize = 10;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * SIDE * SIDE;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

pub fn load_cifar10(path: &Path, limit: Option<usize>) -> Result<LabeledDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_records(path, &bytes, limit)
}

fn parse_records(path: &Path, bytes: &[u8], limit: Option<usize>) -> Result<LabeledDataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(Error::Format {
            path: path.to_owned(),
            reason: format!("length {} is not a multiple of {CIFAR_RECORD_BYTES}", bytes.len()),
        });
    }
    let records = bytes.len() / CIFAR_RECORD_BYTES;
    let n = limit.map_or(records, |l| l.min(records));
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).take(n).enumerate() {
        let label = rec[0] as usize;
        if label >= CLASSES {
            return Err(Error::Format {
                path: path.to_owned(),
                reason: format!("record {i} has label {label}"),
            });
        }
        labels.push(label);
        images.push(Image::from_bytes(SIDE, SIDE, &rec[1..])?);
    }
    LabeledDataset::new(images, labels, CLASSES)
}

/// Writes `dataset` in the CIFAR-10 binary layout. Images must be 32x32.
pub fn write_cifar10(path: &Path, dataset: &LabeledDataset) -> Result<()> {
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD_BYTES);
    for (img, &label) in dataset.images.iter().zip(&dataset.labels) {
        if img.height() != SIDE || img.width() != SIDE || label >= CLASSES {
            return Err(Error::Format {
                path: path.to_owned(),
                reason: format!(
                    "cannot encode {}x{} image with label {label}",
                    img.height(),
                    img.width()
                ),
            });
        }
        out.push(label as u8);
        out.extend(img.to_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct CifarSplits {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Loads `data_batch_1..5.bin` and `test_batch.bin` from `dir`.
///
/// Training batches that do not exist are skipped, so a directory holding only
/// `data_batch_1.bin` works for small runs; at least one must be present.
pub fn load_cifar10_dir(dir: &Path, train_limit: Option<usize>, test_limit: Option<usize>) -> Result<CifarSplits> {
    let mut train = LabeledDataset {
        class_count: CLASSES,
        ..Default::default()
    };
    let mut found = false;
    for name in TRAIN_FILES {
        let remaining = train_limit.map(|l| l.saturating_sub(train.len()));
        if remaining == Some(0) {
            break;
        }
        let path = dir.join(name);
        if !path.exists() {
            continue;
        }
        found = true;
        let part = load_cifar10(&path, remaining)?;
        train.images.extend(part.images);
        train.labels.extend(part.labels);
    }
    if !found && train_limit != Some(0) {
        return Err(Error::Config(format!("no data_batch_*.bin files in {}", dir.display())));
    }
    let test_path = dir.join(TEST_FILE);
    let test = if test_path.exists() {
        load_cifar10(&test_path, test_limit)?
    } else {
        LabeledDataset {
            class_count: CLASSES,
            ..Default::default()
        }
    };
    Ok(CifarSplits { train, test })
}
