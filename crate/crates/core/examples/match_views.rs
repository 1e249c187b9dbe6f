//! Token correspondence for a 224px global crop and a 96px local crop of the
//! same image, drawn as two grids. Matched patches are labelled with their pair
//! index; `.` marks an unmatched patch.
//!
//! ```text
//! cargo run --example match_views
//! ```

use pwself::geometry::{match_patches, CropRecord, Rect};

fn draw(side: usize, tokens: impl Iterator<Item = (usize, usize)>) {
    let mut grid = vec![String::from("  ."); side * side];
    for (k, tok) in tokens {
        grid[tok - 1] = format!("{k:>3}");
    }
    for row in grid.chunks(side) {
        println!("{}", row.concat());
    }
}

fn main() -> pwself::Result<()> {
    let global = CropRecord::new(Rect::new(100, 100, 380, 380), 224, false)?;
    let local = CropRecord::new(Rect::new(40, 20, 220, 180), 96, false)?;
    let corr = match_patches(&global, &local, 16, 16)?;

    println!("global {global}\nlocal  {local}\n");
    println!("{corr}\n");
    println!("global view (14x14 patches):");
    draw(14, corr.pairs().iter().enumerate().skip(1).map(|(k, &(a, _))| (k, a)));
    println!("\nlocal view (6x6 patches):");
    draw(6, corr.pairs().iter().enumerate().skip(1).map(|(k, &(_, b))| (k, b)));

    // Flipping the local view mirrors its columns but keeps the same regions paired.
    let flipped = CropRecord::new(local.rect(), local.out_size, true)?;
    let corr_flipped = match_patches(&global, &flipped, 16, 16)?;
    println!("\nlocal view flipped:");
    draw(
        6,
        corr_flipped
            .pairs()
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, &(_, b))| (k, b)),
    );
    Ok(())
}
