//! Convolutional image encoder producing a three-level feature pyramid at a
//! single unified resolution.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{he_bound, lecun_bound, uniform, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageEncoderConfig {
    /// Output stride `d`; a power of two.
    pub stride: usize,
    /// Channels `C` of every pyramid level.
    pub channels: usize,
    /// Width of the first backbone stage; deeper stages use twice this.
    pub width: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rectified: bool,
    ) -> Self {
        let fan_in = c_in * k * k;
        let bound = if rectified {
            he_bound(fan_in)
        } else {
            lecun_bound(fan_in)
        };
        Conv {
            w: store.add(format!("{name}.w"), uniform(rng, &[c_out, c_in, k, k], bound)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[c_out])),
            stride,
            pad: k / 2,
        }
    }

    pub(crate) fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.w], Some(p[self.b]), self.stride, self.pad)
    }

    pub(crate) fn apply_relu(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = self.apply(tape, p, x)?;
        Ok(tape.relu(y))
    }
}

/// Three same-shaped feature maps. `levels[0]` comes from the shallowest,
/// highest-resolution stage and is the one regression heads read.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub levels: [Var; 3],
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    config: ImageEncoderConfig,
    stem: Vec<Conv>,
    stages: [Vec<Conv>; 3],
    projections: [Conv; 3],
}

impl ImageEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        config: ImageEncoderConfig,
    ) -> Result<Self> {
        if !config.stride.is_power_of_two() {
            return Err(Error::Config(format!(
                "output stride {} must be a power of two",
                config.stride
            )));
        }
        if config.channels == 0 || config.width == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        let w = config.width;
        let mut stem = Vec::new();
        let mut c_in = 3;
        for i in 0..config.stride.trailing_zeros() {
            stem.push(Conv::new(store, rng, &format!("image.stem{i}"), c_in, w, 3, 2, true));
            c_in = w;
        }
        let stage1 = vec![Conv::new(store, rng, "image.stage1.0", c_in, w, 3, 1, true)];
        let stage2 = vec![
            Conv::new(store, rng, "image.stage2.0", w, 2 * w, 3, 2, true),
            Conv::new(store, rng, "image.stage2.1", 2 * w, 2 * w, 3, 1, true),
        ];
        let stage3 = vec![
            Conv::new(store, rng, "image.stage3.0", 2 * w, 2 * w, 3, 2, true),
            Conv::new(store, rng, "image.stage3.1", 2 * w, 2 * w, 3, 1, true),
        ];
        let c = config.channels;
        let projections = [
            Conv::new(store, rng, "image.proj1", w, c, 1, 1, false),
            Conv::new(store, rng, "image.proj2", 2 * w, c, 1, 1, false),
            Conv::new(store, rng, "image.proj3", 2 * w, c, 1, 1, false),
        ];
        Ok(ImageEncoder {
            config,
            stem,
            stages: [stage1, stage2, stage3],
            projections,
        })
    }

    pub fn config(&self) -> ImageEncoderConfig {
        self.config
    }

    /// Checks that an `h x w` image is accepted: both divisible by `8 d`.
    pub fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let q = 8 * self.config.stride;
        if h == 0 || w == 0 || h % q != 0 || w % q != 0 {
            return Err(Error::Shape {
                op: "encode_image",
                detail: format!("image {h}x{w} must have both sides divisible by 8*d = {q}"),
            });
        }
        Ok(())
    }

    /// Runs the backbone on a `3 x H x W` image already on the tape.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<FeaturePyramid> {
        let s = tape.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape("encode_image", format!("image {s:?} must be 3xHxW")));
        }
        self.check_size(s[1], s[2])?;
        let (oh, ow) = (s[1] / self.config.stride, s[2] / self.config.stride);
        let mut x = image;
        for conv in &self.stem {
            x = conv.apply_relu(tape, p, x)?;
        }
        let mut levels = Vec::with_capacity(3);
        for (stage, proj) in self.stages.iter().zip(&self.projections) {
            for conv in stage {
                x = conv.apply_relu(tape, p, x)?;
            }
            let sh = tape.shape(x);
            let unified = if sh[1] == oh && sh[2] == ow {
                x
            } else {
                tape.bilinear_resize(x, oh, ow)?
            };
            levels.push(proj.apply(tape, p, unified)?);
        }
        Ok(FeaturePyramid {
            levels: [levels[0], levels[1], levels[2]],
            channels: self.config.channels,
            height: oh,
            width: ow,
        })
    }
}
