use std::fmt;

use crate::correlation::keyword_enum;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}
keyword_enum!(ShapeKind { Circle => "circle", Square => "square", Triangle => "triangle" });

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Cyan,
}
keyword_enum!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Purple => "purple",
    Cyan => "cyan",
});

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Cyan,
    ];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 170, 60],
            Color::Blue => [40, 80, 220],
            Color::Yellow => [230, 210, 40],
            Color::Purple => [150, 60, 190],
            Color::Cyan => [40, 200, 210],
        }
    }
}

pub const BACKGROUND_RGB: [u8; 3] = [100, 100, 100];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SizeClass {
    Small,
    Large,
}
keyword_enum!(SizeClass { Small => "small", Large => "large" });

/// A filled shape inside a square `extent x extent` cell whose top-left
/// pixel is `(x0, y0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneObject {
    pub kind: ShapeKind,
    pub color: Color,
    pub size: SizeClass,
    pub x0: usize,
    pub y0: usize,
    pub extent: usize,
}

impl SceneObject {
    pub fn center(&self) -> (f64, f64) {
        let h = self.extent as f64 / 2.0;
        (self.x0 as f64 + h, self.y0 as f64 + h)
    }

    /// Whether pixel `(px, py)` (sampled at its center) is covered.
    pub fn covers(&self, px: usize, py: usize) -> bool {
        let s = self.extent as f64;
        let (cx, cy) = self.center();
        let (u, v) = (px as f64 + 0.5, py as f64 + 0.5);
        if u < self.x0 as f64 || v < self.y0 as f64 || u > self.x0 as f64 + s || v > self.y0 as f64 + s {
            return false;
        }
        match self.kind {
            ShapeKind::Square => true,
            ShapeKind::Circle => {
                let r = s / 2.0;
                (u - cx).powi(2) + (v - cy).powi(2) <= r * r
            }
            ShapeKind::Triangle => {
                // apex at top-middle, base along the bottom edge
                let depth = (v - self.y0 as f64) / s;
                (u - cx).abs() <= depth * s / 2.0
            }
        }
    }

    /// Tight pixel bounds `[x1, y1, x2, y2)` of the rasterized shape.
    pub fn pixel_bounds(&self) -> [usize; 4] {
        let mut b = [usize::MAX, usize::MAX, 0, 0];
        for py in self.y0..self.y0 + self.extent {
            for px in self.x0..self.x0 + self.extent {
                if self.covers(px, py) {
                    b[0] = b[0].min(px);
                    b[1] = b[1].min(py);
                    b[2] = b[2].max(px + 1);
                    b[3] = b[3].max(py + 1);
                }
            }
        }
        b
    }

    /// Non-empty overlap of the extents after growing one by `gap` pixels.
    pub fn too_close(&self, other: &SceneObject, gap: usize) -> bool {
        let a = [self.x0, self.y0, self.x0 + self.extent, self.y0 + self.extent];
        let b = [
            other.x0.saturating_sub(gap),
            other.y0.saturating_sub(gap),
            other.x0 + other.extent + gap,
            other.y0 + other.extent + gap,
        ];
        a[0] < b[2] && b[0] < a[2] && a[1] < b[3] && b[1] < a[3]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        for (i, o) in self.objects.iter().enumerate() {
            if o.extent == 0 || o.x0 + o.extent > self.width || o.y0 + o.extent > self.height {
                return Err(Error::Invalid(format!("object {i} leaves the {}x{} frame", self.width, self.height)));
            }
        }
        Ok(())
    }
}

pub fn rgb_to_unit(c: [u8; 3]) -> [f64; 3] {
    [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0]
}

/// Rasterizes a scene into a `3 x H x W` tensor with values in `[0, 1]`.
/// Later objects paint over earlier ones.
pub fn render_scene(scene: &Scene) -> Tensor {
    let (w, h) = (scene.width, scene.height);
    let plane = w * h;
    let mut v = vec![0.0; 3 * plane];
    let bg = rgb_to_unit(BACKGROUND_RGB);
    for c in 0..3 {
        v[c * plane..(c + 1) * plane].fill(bg[c]);
    }
    for o in &scene.objects {
        let col = rgb_to_unit(o.color.rgb());
        for py in o.y0..(o.y0 + o.extent).min(h) {
            for px in o.x0..(o.x0 + o.extent).min(w) {
                if o.covers(px, py) {
                    for c in 0..3 {
                        v[c * plane + py * w + px] = col[c];
                    }
                }
            }
        }
    }
    Tensor::new(&[3, h, w], v).expect("scene dims positive")
}
