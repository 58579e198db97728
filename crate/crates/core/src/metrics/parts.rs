//! Corresponding object parts of a prototype on one image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax_slice, Tensor};
use crate::synthdata::PartAnnotation;

/// Box side as a fraction of the image side.
pub const DEFAULT_BOX_RATIO: f64 = 0.321;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxSize {
    pub height: usize,
    pub width: usize,
}

impl BoxSize {
    /// `round(ratio · side)` for both dims, at least one pixel.
    pub fn from_ratio(image_size: usize, ratio: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!("box ratio {ratio} outside (0, 1]")));
        }
        let side = ((ratio * image_size as f64).round() as usize).clamp(1, image_size);
        Ok(Self { height: side, width: side })
    }
}

/// Box centred on a pixel and clipped to the image: rows `[top, bottom)`,
/// columns `[left, right)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub center_row: usize,
    pub center_col: usize,
    pub size: BoxSize,
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl BoundingBox {
    pub fn centered(row: usize, col: usize, size: BoxSize, image_h: usize, image_w: usize) -> Self {
        let top = row as isize - (size.height / 2) as isize;
        let left = col as isize - (size.width / 2) as isize;
        let clip = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
        Self {
            center_row: row,
            center_col: col,
            size,
            top: clip(top, image_h),
            bottom: clip(top + size.height as isize, image_h),
            left: clip(left, image_w),
            right: clip(left + size.width as isize, image_w),
        }
    }

    /// Point membership in the half-open pixel extent.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.top as f64 <= y && y < self.bottom as f64 && self.left as f64 <= x && x < self.right as f64
    }
}

/// Binary vector `o`: entry `i` is set iff part `i` is visible and inside the box.
pub type PartVector = Vec<bool>;

pub fn part_vector(bbox: &BoundingBox, parts: &[PartAnnotation], num_parts: usize) -> PartVector {
    let mut o = vec![false; num_parts];
    for p in parts {
        if let Some(loc) = p.location {
            if p.id < num_parts && bbox.contains(loc.x, loc.y) {
                o[p.id] = true;
            }
        }
    }
    o
}

/// Box around the argmax of `map[h, w]` bilinearly resized to the image.
pub fn locate(map: &[f64], h: usize, w: usize, image_h: usize, image_w: usize, size: BoxSize) -> Result<BoundingBox> {
    let t = Tensor::new(&[h, w], map.to_vec())?;
    let up = t.bilinear_resize(image_h, image_w)?;
    let at = argmax_slice(up.data()).ok_or_else(|| Error::shape("empty activation map"))?;
    Ok(BoundingBox::centered(at / image_w, at % image_w, size, image_h, image_w))
}
