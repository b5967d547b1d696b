//! Ground-truth encoding: Gaussian center heatmaps plus size and offset
//! targets at the floored center cell.

use crate::correlation::keyword_enum;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fmt;
use std::str::FromStr;

/// Target box in input-image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl GroundTruthBox {
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        GroundTruthBox {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }
}

/// Units of the regressed width and height.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeUnits {
    /// Output-map cells (`w / d`).
    Map,
    /// Input-image pixels.
    Pixel,
}
keyword_enum!(SizeUnits { Map => "map", Pixel => "pixel" });

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetOptions {
    pub min_overlap: f64,
    pub sigma_min: f64,
    pub size_units: SizeUnits,
}

impl Default for TargetOptions {
    fn default() -> Self {
        TargetOptions {
            min_overlap: 0.7,
            sigma_min: 0.5,
            size_units: SizeUnits::Map,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetBundle {
    /// `H/d x W/d` Gaussian heatmap, exactly 1 at the center cell.
    pub heatmap: Tensor,
    /// `(x, y)` = floor of the center divided by the stride.
    pub center_cell: (usize, usize),
    pub size_target: (f64, f64),
    /// Sub-cell remainder of the center, in `[0, 1)`.
    pub offset_target: (f64, f64),
    pub sigma: f64,
}

impl TargetBundle {
    pub fn map_width(&self) -> usize {
        self.heatmap.shape()[1]
    }

    /// Flat row-major index of the center cell.
    pub fn center_index(&self) -> usize {
        self.center_cell.1 * self.map_width() + self.center_cell.0
    }
}

fn smaller_root(a: f64, b: f64, c: f64) -> f64 {
    let disc = (b * b - 4.0 * a * c).max(0.0);
    (-b - disc.sqrt()) / (2.0 * a)
}

fn larger_root(a: f64, b: f64, c: f64) -> f64 {
    let disc = (b * b - 4.0 * a * c).max(0.0);
    (-b + disc.sqrt()) / (2.0 * a)
}

/// Largest displacement `r` that keeps IoU with the true box at or above
/// `min_overlap`, minimized over three cases: both corners shifted by `r`
/// (translation), both moved inward by `r`, both moved outward by `r`.
pub fn gaussian_radius(w: f64, h: f64, min_overlap: f64) -> Result<f64> {
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::Invalid(format!("box size {w}x{h} must be positive")));
    }
    if !(min_overlap > 0.0 && min_overlap < 1.0) {
        return Err(Error::Invalid(format!(
            "min_overlap {min_overlap} must lie in (0, 1)"
        )));
    }
    let mo = min_overlap;
    let s = w + h;
    let area = w * h;
    // (w-r)(h-r) / (2wh - (w-r)(h-r)) = mo
    let translate = smaller_root(1.0, -s, area * (1.0 - mo) / (1.0 + mo));
    // (w-2r)(h-2r) / wh = mo
    let shrink = smaller_root(4.0, -2.0 * s, area * (1.0 - mo));
    // wh / ((w+2r)(h+2r)) = mo
    let grow = larger_root(4.0 * mo, 2.0 * mo * s, (mo - 1.0) * area);
    Ok(translate.min(shrink).min(grow))
}

/// `max(radius / 3, sigma_min)` for a box given in output-map units.
pub fn gaussian_sigma(w: f64, h: f64, min_overlap: f64, sigma_min: f64) -> Result<f64> {
    Ok((gaussian_radius(w, h, min_overlap)? / 3.0).max(sigma_min))
}

/// Encodes `gt` for a heatmap of `map_h x map_w` cells at output stride
/// `stride`.
pub fn make_targets(
    gt: &GroundTruthBox,
    stride: usize,
    map_h: usize,
    map_w: usize,
    opts: &TargetOptions,
) -> Result<TargetBundle> {
    let d = stride as f64;
    let (fx, fy) = (gt.cx / d, gt.cy / d);
    if !(fx >= 0.0 && fy >= 0.0 && fx < map_w as f64 && fy < map_h as f64) {
        return Err(Error::Invalid(format!(
            "center ({}, {}) outside a {map_w}x{map_h} map at stride {stride}",
            gt.cx, gt.cy
        )));
    }
    let (xg, yg) = (fx.floor() as usize, fy.floor() as usize);
    assert!(xg < map_w && yg < map_h);
    let (wm, hm) = (gt.w / d, gt.h / d);
    let sigma = gaussian_sigma(wm, hm, opts.min_overlap, opts.sigma_min)?;
    let denom = 2.0 * sigma * sigma;
    let mut values = Vec::with_capacity(map_h * map_w);
    for y in 0..map_h {
        for x in 0..map_w {
            let dx = x as f64 - xg as f64;
            let dy = y as f64 - yg as f64;
            values.push((-(dx * dx + dy * dy) / denom).exp());
        }
    }
    let size_target = match opts.size_units {
        SizeUnits::Map => (wm, hm),
        SizeUnits::Pixel => (gt.w, gt.h),
    };
    Ok(TargetBundle {
        heatmap: Tensor::new(&[map_h, map_w], values)?,
        center_cell: (xg, yg),
        size_target,
        offset_target: (fx - xg as f64, fy - yg as f64),
        sigma,
    })
}
