//! Random shift and scale applied jointly to an image and its target box.

use rand::Rng;

use crate::data::scene::{rgb_to_unit, BACKGROUND_RGB};
use crate::data::Sample;
use crate::targets::GroundTruthBox;
use crate::tensor::Tensor;

/// Redraws allowed before a sample is passed through unchanged.
pub const MAX_REDRAWS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub max_shift: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_shift: 0.2,
            scale_min: 0.8,
            scale_max: 1.25,
        }
    }
}

/// Scale about the image center, then translate by `(dx, dy)` pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        dx: 0.0,
        dy: 0.0,
        scale: 1.0,
    };

    pub fn draw<R: Rng>(rng: &mut R, cfg: &AugmentConfig, width: usize, height: usize) -> Self {
        let sx = cfg.max_shift * width as f64;
        let sy = cfg.max_shift * height as f64;
        let dx = if sx > 0.0 { rng.random_range(-sx..=sx) } else { 0.0 };
        let dy = if sy > 0.0 { rng.random_range(-sy..=sy) } else { 0.0 };
        let scale = if cfg.scale_max > cfg.scale_min {
            rng.random_range(cfg.scale_min..=cfg.scale_max)
        } else {
            cfg.scale_min
        };
        Transform { dx, dy, scale }
    }

    fn forward(&self, x: f64, c: f64, shift: f64) -> f64 {
        (x - c) * self.scale + c + shift
    }

    pub fn apply_box(&self, b: &GroundTruthBox, width: usize, height: usize) -> GroundTruthBox {
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        let [x1, y1, x2, y2] = b.corners();
        GroundTruthBox::from_corners(
            self.forward(x1, cx, self.dx),
            self.forward(y1, cy, self.dy),
            self.forward(x2, cx, self.dx),
            self.forward(y2, cy, self.dy),
        )
    }

    /// Resamples a `3 x H x W` image. Each output pixel takes the source
    /// pixel under its center unless that is background, in which case any
    /// non-background source pixel its footprint overlaps wins; pixels mapped
    /// from outside the source take the background color. Unlike plain
    /// nearest-neighbour sampling this never drops one-pixel-wide features
    /// when shrinking, so re-extracted boxes stay within a pixel.
    pub fn apply_image(&self, img: &Tensor) -> Tensor {
        if *self == Transform::IDENTITY {
            return img.clone();
        }
        let s = img.shape();
        let (h, w) = (s[1], s[2]);
        let bg = rgb_to_unit(BACKGROUND_RGB);
        let plane = h * w;
        let v = img.values();
        let cols: Vec<Footprint> = (0..w).map(|u| self.footprint(u, w as f64 / 2.0, self.dx, w)).collect();
        let rows: Vec<Footprint> = (0..h).map(|u| self.footprint(u, h as f64 / 2.0, self.dy, h)).collect();
        let is_bg = |r: usize, q: usize| (0..3).all(|c| v[c * plane + r * w + q] == bg[c]);
        let mut out = vec![0.0; 3 * plane];
        for (y, row) in rows.iter().enumerate() {
            for (x, col) in cols.iter().enumerate() {
                let mut pick = match (row.center, col.center) {
                    (Some(r), Some(q)) if !is_bg(r, q) => Some((r, q)),
                    _ => None,
                };
                if pick.is_none() {
                    pick = row
                        .span
                        .clone()
                        .flat_map(|r| col.span.clone().map(move |q| (r, q)))
                        .find(|&(r, q)| !is_bg(r, q));
                }
                for c in 0..3 {
                    out[c * plane + y * w + x] = match pick {
                        Some((r, q)) => v[c * plane + r * w + q],
                        None => bg[c],
                    };
                }
            }
        }
        Tensor::new(s, out).expect("same shape")
    }

    fn footprint(&self, u: usize, c: f64, shift: f64, n: usize) -> Footprint {
        let back = |x: f64| (x - c - shift) / self.scale + c;
        let center = back(u as f64 + 0.5).floor();
        let lo = back(u as f64).floor().max(0.0);
        let hi = back(u as f64 + 1.0).ceil().min(n as f64);
        Footprint {
            center: (center >= 0.0 && center < n as f64).then_some(center as usize),
            span: if lo < hi { lo as usize..hi as usize } else { 0..0 },
        }
    }
}

/// Source pixels seen by one output row or column.
struct Footprint {
    center: Option<usize>,
    span: std::ops::Range<usize>,
}

fn inside(b: &GroundTruthBox, width: usize, height: usize) -> bool {
    let [x1, y1, x2, y2] = b.corners();
    x1 >= 0.0 && y1 >= 0.0 && x2 <= width as f64 && y2 <= height as f64
}

/// Draws transforms until the target stays fully in frame; after
/// [`MAX_REDRAWS`] failures the sample is returned unchanged.
pub fn augment_sample<R: Rng>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> (Sample, Transform) {
    let s = sample.image.shape();
    let (h, w) = (s[1], s[2]);
    for _ in 0..MAX_REDRAWS {
        let t = Transform::draw(rng, cfg, w, h);
        let target = t.apply_box(&sample.target, w, h);
        if inside(&target, w, h) {
            let out = Sample {
                image: t.apply_image(&sample.image),
                expression: sample.expression.clone(),
                target,
            };
            return (out, t);
        }
    }
    (sample.clone(), Transform::IDENTITY)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{render_scene, Color, Scene, SceneObject, ShapeKind, SizeClass};
    use crate::data::{generate_sample, object_box, GeneratorConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn nonbackground_bounds(img: &Tensor) -> [f64; 4] {
        let s = img.shape();
        let (h, w) = (s[1], s[2]);
        let bg = rgb_to_unit(BACKGROUND_RGB);
        let v = img.values();
        let mut b = [f64::MAX, f64::MAX, f64::MIN, f64::MIN];
        for y in 0..h {
            for x in 0..w {
                if (0..3).any(|c| v[c * h * w + y * w + x] != bg[c]) {
                    b = [b[0].min(x as f64), b[1].min(y as f64), b[2].max(x as f64 + 1.0), b[3].max(y as f64 + 1.0)];
                }
            }
        }
        b
    }

    #[test]
    fn identity_leaves_sample_alone() {
        let g = generate_sample(1, &GeneratorConfig::default()).unwrap();
        let t = Transform::IDENTITY;
        assert_eq!(t.apply_image(&g.sample.image), g.sample.image);
        let b = t.apply_box(&g.sample.target, 64, 64);
        assert_eq!(b.corners(), g.sample.target.corners());
    }

    #[test]
    fn integer_shift_moves_box_exactly() {
        let g = generate_sample(2, &GeneratorConfig::default()).unwrap();
        let t = Transform {
            dx: 4.0,
            dy: 0.0,
            scale: 1.0,
        };
        let [x1, y1, x2, y2] = g.sample.target.corners();
        assert_eq!(t.apply_box(&g.sample.target, 64, 64).corners(), [x1 + 4.0, y1, x2 + 4.0, y2]);
        // and the pixels move with it
        let moved = t.apply_image(&g.sample.image);
        let (v, m) = (g.sample.image.values(), moved.values());
        for c in 0..3 {
            for y in 0..64 {
                for x in 0..60 {
                    assert_eq!(m[c * 4096 + y * 64 + x + 4], v[c * 4096 + y * 64 + x]);
                }
            }
        }
    }

    #[test]
    fn rerasterized_box_matches_transformed_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = AugmentConfig::default();
        for i in 0..200 {
            let kind = ShapeKind::ALL[i % 3];
            let extent = 8 + i % 13;
            let obj = SceneObject {
                kind,
                color: Color::ALL[i % 6],
                size: SizeClass::Small,
                x0: 12 + (i * 7) % 20,
                y0: 10 + (i * 11) % 24,
                extent,
            };
            let scene = Scene {
                objects: vec![obj],
                width: 64,
                height: 64,
                seed: i as u64,
            };
            let sample = Sample {
                image: render_scene(&scene),
                expression: "x".into(),
                target: object_box(&obj),
            };
            let (aug, t) = augment_sample(&sample, &cfg, &mut rng);
            let got = nonbackground_bounds(&aug.image);
            let want = aug.target.corners();
            for k in 0..4 {
                assert!((got[k] - want[k]).abs() <= 1.0, "case {i} {t:?}: {got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn target_stays_in_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AugmentConfig {
            max_shift: 0.3,
            ..AugmentConfig::default()
        };
        for seed in 0..100 {
            let g = generate_sample(seed, &GeneratorConfig::default()).unwrap();
            let (aug, _) = augment_sample(&g.sample, &cfg, &mut rng);
            assert!(inside(&aug.target, 64, 64));
        }
    }
}
