//! Half-overlapping patch grid over slide coordinate space.
//!
//! `overlap_fraction` is linear per axis: with 0.5 each patch shares half its
//! width with the horizontal neighbour and half its height with the vertical
//! one. The last patch along an axis is clamped flush to the slide edge
//! instead of being padded past it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Circle;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideGeometry {
    pub slide_id: String,
    pub width: u64,
    pub height: u64,
}

impl SlideGeometry {
    pub fn new(slide_id: impl Into<String>, width: u64, height: u64) -> Result<Self> {
        let s = Self {
            slide_id: slide_id.into(),
            width,
            height,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!(
                "slide dimensions must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TilingConfig {
    pub patch_size: u64,
    pub overlap_fraction: f64,
}

impl Default for TilingConfig {
    fn default() -> Self {
        Self {
            patch_size: 512,
            overlap_fraction: 0.5,
        }
    }
}

impl TilingConfig {
    pub fn stride(&self) -> Result<u64> {
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be at least 1".into()));
        }
        if !(self.overlap_fraction > 0.0 && self.overlap_fraction < 1.0) {
            return Err(Error::Config(format!(
                "overlap_fraction must lie in (0, 1), got {}",
                self.overlap_fraction
            )));
        }
        let stride = (self.patch_size as f64 * (1.0 - self.overlap_fraction)).round() as u64;
        if stride == 0 {
            return Err(Error::Config(format!(
                "patch_size {} with overlap {} yields a zero stride",
                self.patch_size, self.overlap_fraction
            )));
        }
        Ok(stride)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub patch_id: String,
    pub x: u64,
    pub y: u64,
    pub w: u64,
    pub h: u64,
}

impl Patch {
    pub fn new(col: usize, row: usize, x: u64, y: u64, w: u64, h: u64) -> Self {
        Self {
            patch_id: format!("{col}_{row}_{x}_{y}"),
            x,
            y,
            w,
            h,
        }
    }

    /// A single patch spanning the whole slide.
    pub fn whole_slide(slide: &SlideGeometry) -> Self {
        Self::new(0, 0, 0, 0, slide.width, slide.height)
    }

    pub fn contains_pixel(&self, px: u64, py: u64) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x as f64
            && x < (self.x + self.w) as f64
            && y >= self.y as f64
            && y < (self.y + self.h) as f64
    }
}

/// Start offsets along one axis of length `dim`.
fn axis_starts(dim: u64, patch: u64, stride: u64) -> Vec<(u64, u64)> {
    if dim <= patch {
        return vec![(0, dim)];
    }
    let mut starts = Vec::new();
    let mut s = 0;
    loop {
        starts.push((s, patch));
        if s + patch >= dim {
            break;
        }
        s += stride;
        if s + patch > dim {
            starts.push((dim - patch, patch));
            break;
        }
    }
    starts
}

/// Row-major patch grid covering every pixel of the slide.
pub fn generate_patches(slide: &SlideGeometry, cfg: &TilingConfig) -> Result<Vec<Patch>> {
    slide.validate()?;
    let stride = cfg.stride()?;
    let xs = axis_starts(slide.width, cfg.patch_size, stride);
    let ys = axis_starts(slide.height, cfg.patch_size, stride);
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for (row, &(y, h)) in ys.iter().enumerate() {
        for (col, &(x, w)) in xs.iter().enumerate() {
            out.push(Patch::new(col, row, x, y, w, h));
        }
    }
    Ok(out)
}

/// Maps a patch-local circle into slide coordinates. Centers may fall outside
/// the patch.
pub fn to_slide_coords(patch: &Patch, local: &Circle) -> Circle {
    local.translated(patch.x as f64, patch.y as f64)
}

pub(crate) fn from_slide_coords(patch: &Patch, slide: &Circle) -> Circle {
    slide.translated(-(patch.x as f64), -(patch.y as f64))
}
