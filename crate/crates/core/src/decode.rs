//! Box decoding from predicted maps, IoU and precision at an IoU threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::targets::{GroundTruthBox, SizeUnits};
use crate::tensor::Tensor;

/// Axis-aligned box in input-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn clamp_to(&self, width: f64, height: f64) -> Self {
        let cx = |v: f64| v.clamp(0.0, width);
        let cy = |v: f64| v.clamp(0.0, height);
        BBox {
            x1: cx(self.x1),
            y1: cy(self.y1),
            x2: cx(self.x2).max(cx(self.x1)),
            y2: cy(self.y2).max(cy(self.y1)),
        }
    }
}

impl From<GroundTruthBox> for BBox {
    fn from(g: GroundTruthBox) -> Self {
        let [x1, y1, x2, y2] = g.corners();
        BBox { x1, y1, x2, y2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub bbox: BBox,
    pub score: f64,
    /// `(x, y)` heatmap cell of the peak.
    pub peak: (usize, usize),
}

/// Network outputs for one image: heatmap `H x W` (or `1 x H x W`), and the
/// four regression maps of the same spatial size.
#[derive(Debug, Clone)]
pub struct PredictionMaps {
    pub heatmap: Tensor,
    pub width: Tensor,
    pub height: Tensor,
    pub offset_x: Tensor,
    pub offset_y: Tensor,
}

impl PredictionMaps {
    fn spatial(&self) -> Result<(usize, usize)> {
        let hw = |t: &Tensor| -> Option<(usize, usize)> {
            let s = t.shape();
            match s.len() {
                2 => Some((s[0], s[1])),
                3 if s[0] == 1 => Some((s[1], s[2])),
                _ => None,
            }
        };
        let base = hw(&self.heatmap)
            .ok_or_else(|| Error::shape("decode_box", format!("heatmap {:?}", self.heatmap.shape())))?;
        for t in [&self.width, &self.height, &self.offset_x, &self.offset_y] {
            if hw(t) != Some(base) {
                return Err(Error::shape(
                    "decode_box",
                    format!("map {:?} vs heatmap {:?}", t.shape(), self.heatmap.shape()),
                ));
            }
        }
        Ok(base)
    }
}

/// Index of the largest value; the first one in row-major order on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Picks the heatmap peak, gathers size and offset there, assembles the
/// corners in map units and scales them by the stride into image pixels,
/// clamped to the `image_w x image_h` frame.
pub fn decode_box(
    maps: &PredictionMaps,
    stride: usize,
    image_w: usize,
    image_h: usize,
    units: SizeUnits,
) -> Result<Prediction> {
    let (_, mw) = maps.spatial()?;
    let i = argmax(maps.heatmap.values());
    let (px, py) = (i % mw, i / mw);
    let d = stride as f64;
    let (mut w, mut h) = (maps.width.values()[i], maps.height.values()[i]);
    if units == SizeUnits::Pixel {
        w /= d;
        h /= d;
    }
    let cx = px as f64 + maps.offset_x.values()[i];
    let cy = py as f64 + maps.offset_y.values()[i];
    let raw = BBox {
        x1: (cx - w / 2.0) * d,
        y1: (cy - h / 2.0) * d,
        x2: (cx + w / 2.0) * d,
        y2: (cy + h / 2.0) * d,
    };
    Ok(Prediction {
        bbox: raw.clamp_to(image_w as f64, image_h as f64),
        score: maps.heatmap.values()[i],
        peak: (px, py),
    })
}

/// Intersection over union; 0 for disjoint boxes or an empty union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Fraction of pairs whose IoU is strictly greater than `threshold`.
pub fn precision_at_iou(pairs: &[(BBox, BBox)], threshold: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Invalid("precision over an empty prediction list".into()));
    }
    let hits = pairs.iter().filter(|(p, g)| iou(p, g) > threshold).count();
    Ok(hits as f64 / pairs.len() as f64)
}
