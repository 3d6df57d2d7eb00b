//! Coordinate normalization, patch-grid arithmetic and the word to patch
//! incidence map.
//!
//! Layout coordinates live on an integer `[0, 1000]` scale. A patch cell
//! `(r, c)` of a `rows x cols` grid covers the half-open normalized rectangle
//! `[c*1000/cols, (c+1)*1000/cols) x [r*1000/rows, (r+1)*1000/rows)`; all
//! comparisons against cell edges are done with integer cross-multiplication
//! so no rounding enters the incidence map.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper end of the normalized layout scale.
pub const LAYOUT_SCALE: u32 = 1000;

/// A box in source-image pixels, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self> {
        if x0 > x1 || y0 > y1 {
            return Err(Error::InvalidBox {
                x0: x0.into(),
                y0: y0.into(),
                x1: x1.into(),
                y1: y1.into(),
                width: -1,
                height: -1,
            });
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// Smallest box containing both.
    pub fn union(&self, other: &PixelBox) -> PixelBox {
        PixelBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }

    pub fn contains_point(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// A box on the normalized `[0, 1000]` layout scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct NormBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl NormBox {
    /// The all-zero box used by special and padding tokens.
    pub const ZERO: NormBox = NormBox { x0: 0, y0: 0, x1: 0, y1: 0 };

    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self> {
        if x0 > x1 || y0 > y1 || x1 > LAYOUT_SCALE || y1 > LAYOUT_SCALE {
            return Err(Error::InvalidBox {
                x0: x0.into(),
                y0: y0.into(),
                x1: x1.into(),
                y1: y1.into(),
                width: LAYOUT_SCALE.into(),
                height: LAYOUT_SCALE.into(),
            });
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn is_degenerate(&self) -> bool {
        self.x0 == self.x1 || self.y0 == self.y1
    }

    /// Integer center, rounded down.
    pub fn center(&self) -> (i32, i32) {
        (((self.x0 + self.x1) / 2) as i32, ((self.y0 + self.y1) / 2) as i32)
    }

    pub fn union(&self, other: &NormBox) -> NormBox {
        NormBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }
}

fn scale_half_up(v: u32, dim: u32) -> u32 {
    // round(v * 1000 / dim) with ties going up, in exact integer arithmetic
    let num = 2 * u64::from(v) * u64::from(LAYOUT_SCALE) + u64::from(dim);
    let q = num / (2 * u64::from(dim));
    q.min(u64::from(LAYOUT_SCALE)) as u32
}

/// Maps a pixel box on a `page_w x page_h` page onto the `[0, 1000]` scale.
pub fn normalize_box(b: &PixelBox, page_w: i64, page_h: i64) -> Result<NormBox> {
    if page_w <= 0 || page_h <= 0 || page_w > i64::from(u32::MAX) || page_h > i64::from(u32::MAX) {
        return Err(Error::InvalidPage { width: page_w, height: page_h });
    }
    let (w, h) = (page_w as u32, page_h as u32);
    if b.x0 > b.x1 || b.y0 > b.y1 || b.x1 > w || b.y1 > h {
        return Err(Error::InvalidBox {
            x0: b.x0.into(),
            y0: b.y0.into(),
            x1: b.x1.into(),
            y1: b.y1.into(),
            width: page_w,
            height: page_h,
        });
    }
    Ok(NormBox {
        x0: scale_half_up(b.x0, w),
        y0: scale_half_up(b.y0, h),
        x1: scale_half_up(b.x1, w),
        y1: scale_half_up(b.y1, h),
    })
}

/// Uniform `patch x patch` tiling of an `image_height x image_width` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl PatchGrid {
    /// Number of patches `M`.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major patch index of cell `(row, col)`.
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn cell(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }

    /// Integer extent of a cell on the layout scale, rounded inwards so the
    /// box never has positive-area overlap with a neighbouring cell.
    pub fn cell_box(&self, index: usize) -> NormBox {
        let (r, c) = self.cell(index);
        let scale = LAYOUT_SCALE as usize;
        let lo = |k: usize, n: usize| (k * scale).div_ceil(n) as u32;
        let hi = |k: usize, n: usize| ((k + 1) * scale / n) as u32;
        NormBox { x0: lo(c, self.cols), y0: lo(r, self.rows), x1: hi(c, self.cols), y1: hi(r, self.rows) }
    }

    pub fn cell_boxes(&self) -> Vec<NormBox> {
        (0..self.len()).map(|k| self.cell_box(k)).collect()
    }
}

/// Builds the patch grid for an `h x w` image cut into `p x p` patches.
pub fn make_patch_grid(h: usize, w: usize, p: usize) -> Result<PatchGrid> {
    if p == 0 || h == 0 || w == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::Grid { height: h, width: w, patch: p });
    }
    Ok(PatchGrid { rows: h / p, cols: w / p, patch_size: p, image_height: h, image_width: w })
}

/// Cells along one axis whose half-open span `[k*1000/n, (k+1)*1000/n)`
/// overlaps `[lo, hi]` with positive length.
fn overlapping_cells(lo: u32, hi: u32, n: usize) -> std::ops::Range<usize> {
    let scale = u64::from(LAYOUT_SCALE);
    let (lo, hi, n64) = (u64::from(lo), u64::from(hi), n as u64);
    // first k with (k+1)*scale > lo*n, last k with k*scale < hi*n
    let first = (lo * n64 / scale) as usize;
    let last_excl = (hi * n64).div_ceil(scale) as usize;
    first.min(n)..last_excl.min(n)
}

fn containing_cell(v: u32, n: usize) -> usize {
    ((u64::from(v) * n as u64 / u64::from(LAYOUT_SCALE)) as usize).min(n - 1)
}

/// Patch indices whose cells have positive-area overlap with `b`. A
/// zero-area box maps to the single cell holding its top-left corner.
pub fn word_patches(b: &NormBox, g: &PatchGrid) -> BTreeSet<usize> {
    if b.is_degenerate() {
        let r = containing_cell(b.y0, g.rows);
        let c = containing_cell(b.x0, g.cols);
        return BTreeSet::from([g.index(r, c)]);
    }
    let rows = overlapping_cells(b.y0, b.y1, g.rows);
    let cols = overlapping_cells(b.x0, b.x1, g.cols);
    rows.flat_map(|r| cols.clone().map(move |c| g.index(r, c))).collect()
}
