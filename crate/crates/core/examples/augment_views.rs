//! Draws the crops for one batch, prints the shared crop records and the number
//! of matched tokens for every (teacher, student) pair, and optionally writes
//! every view of the first image as a PPM file.
//!
//! ```text
//! cargo run --example augment_views -- [out_dir]
//! ```

use std::io::Write;
use std::path::Path;

use pwself::augment::{make_batch_views, CropConfig};
use pwself::imagedata::{synthetic_dataset, Image, Rng};
use pwself::losses::pair_correspondences;

fn write_ppm(path: &Path, img: &Image) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", img.width(), img.height())?;
    let mut px = Vec::with_capacity(img.height() * img.width() * 3);
    for y in 0..img.height() {
        for x in 0..img.width() {
            for c in 0..3 {
                px.push((img.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    f.write_all(&px)
}

fn main() -> pwself::Result<()> {
    let data = synthetic_dataset(4, 4, 32, 3)?;
    let cfg = CropConfig::default();
    let views = make_batch_views(&data.images, &cfg, &Rng::new(42))?;

    for (slot, crop) in views.crops.iter().enumerate() {
        let kind = if slot < CropConfig::GLOBAL_VIEWS {
            "global"
        } else {
            "local"
        };
        println!("view {slot} ({kind}): {crop}");
    }
    println!();
    for pc in pair_correspondences(&views.crops, cfg.patch_size)? {
        println!("teacher {} -> student {}: MP={}", pc.teacher, pc.student, pc.corr.mp());
    }

    if let Some(dir) = std::env::args().nth(1) {
        let dir = Path::new(&dir);
        std::fs::create_dir_all(dir).expect("create output directory");
        write_ppm(&dir.join("original.ppm"), &data.images[0]).expect("write ppm");
        for (slot, v) in views.views.iter().enumerate() {
            write_ppm(&dir.join(format!("view{slot}.ppm")), &v[0]).expect("write ppm");
        }
        println!("\nwrote {} views to {}", views.views.len(), dir.display());
    }
    Ok(())
}
