//! Crop-coordinate algebra and patch matching between two crops of one image.
//!
//! A crop is described by the rectangle it took from the original image, the
//! square size it was resized to, and whether it was mirrored. Two crops of the
//! same image are matched by intersecting their rectangles, finding which patches
//! of each crop cover more than half of the intersection in both directions,
//! and pairing rows and columns at a fixed interval so the first and last
//! rows/columns of the two slices always line up.
//!
//! Token indices: 0 is the CLS token, grid cell `(r, c)` of a crop with `nc`
//! columns is token `r * nc + c + 1`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Axis-aligned rectangle in original-image pixels, half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl Rect {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> usize {
        self.x_max.saturating_sub(self.x_min)
    }

    pub fn height(&self) -> usize {
        self.y_max.saturating_sub(self.y_min)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }
}

/// Overlap of two rectangles; `None` when they share no area.
pub fn intersect(a: &Rect, b: &Rect) -> Option<Rect> {
    let r = Rect {
        x_min: a.x_min.max(b.x_min),
        y_min: a.y_min.max(b.y_min),
        x_max: a.x_max.min(b.x_max),
        y_max: a.y_max.min(b.y_max),
    };
    (r.x_min < r.x_max && r.y_min < r.y_max).then_some(r)
}

/// Where a crop came from in the original image and how it was presented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CropRecord {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
    /// Side length of the square the crop was resized to.
    pub out_size: usize,
    pub flipped: bool,
}

impl CropRecord {
    pub fn new(rect: Rect, out_size: usize, flipped: bool) -> Result<Self> {
        if rect.x_min >= rect.x_max || rect.y_min >= rect.y_max {
            return Err(Error::Config(format!("empty crop rectangle {rect:?}")));
        }
        if out_size == 0 {
            return Err(Error::Config("crop output size must be positive".into()));
        }
        Ok(Self {
            x_min: rect.x_min,
            y_min: rect.y_min,
            x_max: rect.x_max,
            y_max: rect.y_max,
            out_size,
            flipped,
        })
    }

    pub fn rect(&self) -> Rect {
        Rect::new(self.x_min, self.y_min, self.x_max, self.y_max)
    }

    /// Checks the rectangle lies inside a `height x width` image.
    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.x_max <= width && self.y_max <= height
    }

    /// Patch grid side for `patch_size`, or a configuration error if it does not divide.
    pub fn grid_side(&self, patch_size: usize) -> Result<usize> {
        if patch_size == 0 || !self.out_size.is_multiple_of(patch_size) {
            return Err(Error::Config(format!(
                "patch size {patch_size} does not divide crop size {}",
                self.out_size
            )));
        }
        Ok(self.out_size / patch_size)
    }
}

/// `x0,y0,x1,y1,size,flip` with `flip` one of `0`, `1`, `true`, `false`.
impl FromStr for CropRecord {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 6 {
            return Err(Error::Config(format!("expected x0,y0,x1,y1,size,flip but got {s:?}")));
        }
        let num = |i: usize| {
            parts[i]
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("field {i} of {s:?}: {e}")))
        };
        let flipped = match parts[5] {
            "0" | "false" => false,
            "1" | "true" => true,
            other => return Err(Error::Config(format!("bad flip flag {other:?}"))),
        };
        CropRecord::new(Rect::new(num(0)?, num(1)?, num(2)?, num(3)?), num(4)?, flipped)
    }
}

impl fmt::Display for CropRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{}",
            self.x_min, self.y_min, self.x_max, self.y_max, self.out_size, self.flipped as u8
        )
    }
}

/// A contiguous rectangle of patches inside one crop's token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSlice {
    pub row_start: usize,
    pub row_count: usize,
    pub col_start: usize,
    pub col_count: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl GridSlice {
    pub fn is_empty(&self) -> bool {
        self.row_count == 0 || self.col_count == 0
    }

    pub fn len(&self) -> usize {
        self.row_count * self.col_count
    }
}

/// Range of patches along one axis whose overlap with `[r0, r1)` is more than
/// half a patch. All comparisons are done in integers scaled by `out`.
fn axis_range(c0: usize, c1: usize, out: usize, patch: usize, r0: usize, r1: usize) -> (usize, usize) {
    let n = (out / patch) as i64;
    let (c0, c1, out, patch) = (c0 as i64, c1 as i64, out as i64, patch as i64);
    let (r0, r1) = (r0.max(c0 as usize) as i64, r1.min(c1 as usize) as i64);
    // a patch spans `len` in original pixels times `out`
    let len = patch * (c1 - c0);
    if 2 * (r1 - r0) * out <= len {
        return (0, 0);
    }
    let first = (2 * (r0 - c0) * out - len).div_euclid(2 * len) + 1;
    let last = -(-(2 * (r1 - c0) * out - len)).div_euclid(2 * len) - 1;
    let (first, last) = (first.max(0), last.min(n - 1));
    if last < first {
        (0, 0)
    } else {
        (first as usize, (last - first + 1) as usize)
    }
}

/// Patches of `crop` covering more than half of `region` in width and height.
///
/// Patch boundaries are mapped back to the original image by linear scaling,
/// `x = x_min + (x_resized / out_size) * (x_max - x_min)`. Inclusion is decided per
/// axis, so the result is always one rectangle of patches. Flips are ignored
/// here: indices refer to the unmirrored crop.
pub fn patches_in_region(crop: &CropRecord, region: &Rect, patch_size: usize) -> Result<GridSlice> {
    let side = crop.grid_side(patch_size)?;
    let (col_start, col_count) = axis_range(
        crop.x_min,
        crop.x_max,
        crop.out_size,
        patch_size,
        region.x_min,
        region.x_max,
    );
    let (row_start, row_count) = axis_range(
        crop.y_min,
        crop.y_max,
        crop.out_size,
        patch_size,
        region.y_min,
        region.y_max,
    );
    Ok(GridSlice {
        row_start,
        row_count,
        col_start,
        col_count,
        grid_rows: side,
        grid_cols: side,
    })
}

/// The `i`-th of `n_small` indices spread over `0..n_large`.
#[inline]
fn spread_index(i: usize, n_large: usize, n_small: usize) -> usize {
    if n_small == 1 {
        (n_large - 1) / 2
    } else {
        // floor(i * (n_large - 1) / (n_small - 1)), exact in integers
        i * (n_large - 1) / (n_small - 1)
    }
}

/// Indices into the larger side that pair with each of the `n_small` entries
/// of the smaller side. First maps to first and last to last; a single entry
/// maps to the middle.
///
/// # Panics
/// If `n_small > n_large`; callers order the arguments.
pub fn select_indices(n_large: usize, n_small: usize) -> Vec<usize> {
    assert!(
        n_small <= n_large,
        "select_indices: n_small {n_small} > n_large {n_large}"
    );
    (0..n_small).map(|i| spread_index(i, n_large, n_small)).collect()
}

/// Column index after a horizontal mirror of a grid with `nc` columns.
#[inline]
pub fn flip_column(j: usize, nc: usize) -> usize {
    nc - 1 - j
}

/// Row or column pairing between two slices, evaluated lazily.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisMatch {
    a_start: usize,
    a_count: usize,
    b_start: usize,
    b_count: usize,
}

impl AxisMatch {
    fn new(a_start: usize, a_count: usize, b_start: usize, b_count: usize) -> Self {
        Self {
            a_start,
            a_count,
            b_start,
            b_count,
        }
    }

    pub fn len(&self) -> usize {
        self.a_count.min(self.b_count)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid indices `(a, b)` of the `k`-th matched row/column.
    #[inline]
    pub fn pair(&self, k: usize) -> (usize, usize) {
        if self.a_count >= self.b_count {
            (
                self.a_start + spread_index(k, self.a_count, self.b_count),
                self.b_start + k,
            )
        } else {
            (
                self.a_start + k,
                self.b_start + spread_index(k, self.b_count, self.a_count),
            )
        }
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.len()).map(move |k| self.pair(k))
    }
}

/// Everything needed to enumerate a correspondence, computed in constant time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchPlan {
    pub a: CropRecord,
    pub b: CropRecord,
    pub slice_a: GridSlice,
    pub slice_b: GridSlice,
    pub rows: AxisMatch,
    pub cols: AxisMatch,
}

impl MatchPlan {
    /// Number of matched tokens including the CLS pair.
    pub fn mp(&self) -> usize {
        1 + self.rows.len() * self.cols.len()
    }

    fn token(row: usize, col: usize, slice: &GridSlice, flipped: bool) -> usize {
        let col = if flipped {
            flip_column(col, slice.grid_cols)
        } else {
            col
        };
        row * slice.grid_cols + col + 1
    }

    pub fn correspondence(&self) -> Correspondence {
        let mut pairs = Vec::with_capacity(self.mp());
        pairs.push((0, 0));
        for (ra, rb) in self.rows.pairs() {
            for (ca, cb) in self.cols.pairs() {
                pairs.push((
                    Self::token(ra, ca, &self.slice_a, self.a.flipped),
                    Self::token(rb, cb, &self.slice_b, self.b.flipped),
                ));
            }
        }
        Correspondence { pairs }
    }
}

/// Intersects the two crops and sets up the row/column pairing. Cost does not
/// depend on the grid sizes.
pub fn plan_match(a: &CropRecord, b: &CropRecord, patch_a: usize, patch_b: usize) -> Result<MatchPlan> {
    let side_a = a.grid_side(patch_a)?;
    let side_b = b.grid_side(patch_b)?;
    let empty = |side| GridSlice {
        row_start: 0,
        row_count: 0,
        col_start: 0,
        col_count: 0,
        grid_rows: side,
        grid_cols: side,
    };
    let (slice_a, slice_b) = match intersect(&a.rect(), &b.rect()) {
        Some(region) => (
            patches_in_region(a, &region, patch_a)?,
            patches_in_region(b, &region, patch_b)?,
        ),
        None => (empty(side_a), empty(side_b)),
    };
    let (slice_a, slice_b) = if slice_a.is_empty() || slice_b.is_empty() {
        (empty(side_a), empty(side_b))
    } else {
        (slice_a, slice_b)
    };
    Ok(MatchPlan {
        a: *a,
        b: *b,
        slice_a,
        slice_b,
        rows: AxisMatch::new(
            slice_a.row_start,
            slice_a.row_count,
            slice_b.row_start,
            slice_b.row_count,
        ),
        cols: AxisMatch::new(
            slice_a.col_start,
            slice_a.col_count,
            slice_b.col_start,
            slice_b.col_count,
        ),
    })
}

/// Token correspondence between two crops of the same image.
pub fn match_patches(a: &CropRecord, b: &CropRecord, patch_a: usize, patch_b: usize) -> Result<Correspondence> {
    Ok(plan_match(a, b, patch_a, patch_b)?.correspondence())
}

/// Ordered `(token in view A, token in view B)` pairs; the first is always `(0, 0)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Correspondence {
    pairs: Vec<(usize, usize)>,
}

impl Correspondence {
    pub fn cls_only() -> Self {
        Self { pairs: vec![(0, 0)] }
    }

    /// Validates the CLS-first and distinct-indices invariants.
    pub fn from_pairs(pairs: Vec<(usize, usize)>) -> Result<Self> {
        if pairs.first() != Some(&(0, 0)) {
            return Err(Error::Domain("correspondence must start with (0, 0)".into()));
        }
        let mut a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let mut b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        a.sort_unstable();
        b.sort_unstable();
        if a.windows(2).any(|w| w[0] == w[1]) || b.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Domain("correspondence repeats a token".into()));
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Matched token count, CLS included.
    pub fn mp(&self) -> usize {
        self.pairs.len()
    }

    pub fn side_a(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn side_b(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }

    pub fn swapped(&self) -> Self {
        Self {
            pairs: self.pairs.iter().map(|&(a, b)| (b, a)).collect(),
        }
    }

    /// Keeps the first `n` pairs (at least the CLS pair).
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            pairs: self.pairs[..n.clamp(1, self.pairs.len())].to_vec(),
        }
    }
}

impl fmt::Display for Correspondence {
    /// One `tokA tokB` line per pair followed by `MP=<n>`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (a, b) in &self.pairs {
            writeln!(f, "{a} {b}")?;
        }
        write!(f, "MP={}", self.mp())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn crop(x0: usize, y0: usize, x1: usize, y1: usize, s: usize, flip: bool) -> CropRecord {
        CropRecord::new(Rect::new(x0, y0, x1, y1), s, flip).unwrap()
    }

    #[test]
    fn intersect_cases() {
        let a = Rect::new(0, 0, 10, 10);
        assert_eq!(intersect(&a, &Rect::new(5, 5, 15, 15)), Some(Rect::new(5, 5, 10, 10)));
        assert_eq!(intersect(&Rect::new(0, 0, 4, 4), &Rect::new(6, 6, 9, 9)), None);
        let nested = Rect::new(2, 3, 7, 8);
        assert_eq!(intersect(&a, &nested), Some(nested));
        // touching edges share no area
        assert_eq!(intersect(&a, &Rect::new(10, 0, 12, 10)), None);
    }

    #[test]
    fn select_indices_examples() {
        assert_eq!(select_indices(4, 3), vec![0, 1, 3]);
        assert_eq!(select_indices(6, 4), vec![0, 1, 3, 5]);
        assert_eq!(select_indices(5, 5), vec![0, 1, 2, 3, 4]);
        assert_eq!(select_indices(7, 1), vec![3]);
        assert_eq!(select_indices(6, 1), vec![2]);
        assert!(select_indices(3, 0).is_empty());
    }

    #[test]
    #[should_panic]
    fn select_indices_requires_order() {
        select_indices(2, 3);
    }

    #[test]
    fn flip_column_examples() {
        assert_eq!(flip_column(0, 6), 5);
        assert_eq!(flip_column(2, 5), 2);
        for j in 0..9 {
            assert_eq!(flip_column(flip_column(j, 9), 9), j);
        }
    }

    #[test]
    fn whole_crop_region_is_full_grid() {
        let c = crop(3, 5, 35, 29, 16, false);
        let s = patches_in_region(&c, &c.rect(), 4).unwrap();
        assert_eq!((s.row_start, s.row_count, s.col_start, s.col_count), (0, 4, 0, 4));
    }

    #[test]
    fn exactly_half_covered_patch_is_excluded() {
        // crop 0..8 resized to 8, patch 4: patches [0,4) and [4,8)
        let c = crop(0, 0, 8, 8, 8, false);
        let half = patches_in_region(&c, &Rect::new(2, 0, 8, 8), 4).unwrap();
        assert_eq!((half.col_start, half.col_count), (1, 1));
        let more = patches_in_region(&c, &Rect::new(1, 0, 8, 8), 4).unwrap();
        assert_eq!((more.col_start, more.col_count), (0, 2));
    }

    #[test]
    fn indivisible_patch_is_config_error() {
        let c = crop(0, 0, 10, 10, 10, false);
        assert!(matches!(patches_in_region(&c, &c.rect(), 3), Err(Error::Config(_))));
    }

    #[test]
    fn disjoint_crops_match_cls_only() {
        let a = crop(0, 0, 10, 10, 8, false);
        let b = crop(20, 20, 30, 30, 8, true);
        assert_eq!(match_patches(&a, &b, 4, 4).unwrap(), Correspondence::cls_only());
    }

    #[test]
    fn self_match_is_identity() {
        let a = crop(1, 2, 25, 26, 12, false);
        let c = match_patches(&a, &a, 4, 4).unwrap();
        assert_eq!(c.mp(), 10);
        assert!(c.pairs().iter().all(|(x, y)| x == y));
    }

    #[test]
    fn flipped_self_match_mirrors_columns() {
        let a = crop(0, 0, 12, 12, 12, false);
        let b = crop(0, 0, 12, 12, 12, true);
        let c = match_patches(&a, &b, 4, 4).unwrap();
        // token 1 = (0,0) pairs with (0,2) = token 3
        assert_eq!(c.pairs()[1], (1, 3));
        assert_eq!(c.pairs()[3], (3, 1));
    }

    #[test]
    fn parse_and_print_crop() {
        let c: CropRecord = "4,5,20,30,16,1".parse().unwrap();
        assert_eq!(c, crop(4, 5, 20, 30, 16, true));
        assert_eq!(c.to_string(), "4,5,20,30,16,1");
        assert!("4,5,20,30,16".parse::<CropRecord>().is_err());
        assert!("4,5,4,30,16,0".parse::<CropRecord>().is_err());
    }

    #[test]
    fn correspondence_validation() {
        assert!(Correspondence::from_pairs(vec![(1, 1)]).is_err());
        assert!(Correspondence::from_pairs(vec![(0, 0), (1, 2), (1, 3)]).is_err());
        let c = Correspondence::from_pairs(vec![(0, 0), (4, 2)]).unwrap();
        assert_eq!(c.to_string(), "0 0\n4 2\nMP=2");
    }
}
