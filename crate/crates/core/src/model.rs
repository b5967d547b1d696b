//! The full network: expression and image encoders, language-guided
//! correlation, and the size/offset regression heads.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::correlation::{
    keyword_enum, CorrelationConfig, CorrelationFilter, CorrelationOutput, Fusion, KernelMode,
    KernelSet, KernelShape, LevelMode,
};
use crate::decode::{decode_box, Prediction, PredictionMaps};
use crate::error::{Error, Result};
use crate::expression::{tokenize, EncoderKind, ExpressionDims, ExpressionEncoder, TokenSequence, Vocabulary};
use crate::image_encoder::{Conv, FeaturePyramid, ImageEncoder, ImageEncoderConfig};
use crate::params::{Bound, ParamStore};
use crate::targets::SizeUnits;
use crate::tensor::Tensor;

/// What the size and offset heads read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressionInput {
    /// The highest-resolution visual level alone.
    VisualOnly,
    /// The stacked pre-activation correlation maps.
    LanguageGuided,
}
keyword_enum!(RegressionInput {
    VisualOnly => "visual-only",
    LanguageGuided => "language-guided",
});

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub stride: usize,
    pub channels: usize,
    pub backbone_width: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Expression feature width `D_l`.
    pub lang_dim: usize,
    pub encoder: EncoderKind,
    pub kernel_shape: KernelShape,
    pub kernel_mode: KernelMode,
    pub levels: LevelMode,
    pub fusion: Fusion,
    pub regression_input: RegressionInput,
    pub head_width: usize,
    pub size_units: SizeUnits,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stride: 4,
            channels: 32,
            backbone_width: 32,
            embed_dim: 16,
            hidden_dim: 48,
            lang_dim: 48,
            encoder: EncoderKind::Recurrent,
            kernel_shape: KernelShape::OneByOne,
            kernel_mode: KernelMode::PerLevel,
            levels: LevelMode::Multi,
            fusion: Fusion::Average,
            regression_input: RegressionInput::VisualOnly,
            head_width: 32,
            size_units: SizeUnits::Map,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("stride", self.stride),
            ("channels", self.channels),
            ("backbone_width", self.backbone_width),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("lang_dim", self.lang_dim),
            ("head_width", self.head_width),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.stride.is_power_of_two() {
            return Err(Error::Config(format!("stride {} is not a power of two", self.stride)));
        }
        Ok(())
    }

    pub fn correlation(&self) -> CorrelationConfig {
        CorrelationConfig {
            lang_dim: self.lang_dim,
            channels: self.channels,
            kernel_shape: self.kernel_shape,
            kernel_mode: self.kernel_mode,
            levels: self.levels,
            fusion: self.fusion,
        }
    }
}

/// 3x3 conv + relu, then a 1x1 conv to two channels.
#[derive(Debug, Clone, Copy)]
struct Head {
    hidden: Conv,
    out: Conv,
}

impl Head {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c_in: usize, width: usize) -> Self {
        Head {
            hidden: Conv::new(store, rng, &format!("{name}.0"), c_in, width, 3, 1, true),
            out: Conv::new(store, rng, &format!("{name}.1"), width, 2, 1, 1, false),
        }
    }

    fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.apply_relu(tape, p, x)?;
        self.out.apply(tape, p, h)
    }
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    pub lang: Var,
    pub kernels: KernelSet,
    pub correlation: CorrelationOutput,
    /// `2 x H/d x W/d`: width, height.
    pub size: Var,
    /// `2 x H/d x W/d`: dx, dy.
    pub offset: Var,
}

impl ForwardOutput {
    /// Reads the heatmap and regression maps off the tape.
    pub fn maps(&self, tape: &Tape) -> Result<PredictionMaps> {
        let (h, w) = (self.pyramid.height, self.pyramid.width);
        let plane = h * w;
        let split = |v: Var| -> Result<(Tensor, Tensor)> {
            let vals = tape.value(v);
            Ok((
                Tensor::new(&[h, w], vals[..plane].to_vec())?,
                Tensor::new(&[h, w], vals[plane..].to_vec())?,
            ))
        };
        let (width, height) = split(self.size)?;
        let (offset_x, offset_y) = split(self.offset)?;
        Ok(PredictionMaps {
            heatmap: Tensor::new(&[h, w], tape.value(self.correlation.fused).to_vec())?,
            width,
            height,
            offset_x,
            offset_y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RccfModel {
    config: ModelConfig,
    vocab: Vocabulary,
    store: ParamStore,
    image: ImageEncoder,
    expression: ExpressionEncoder,
    correlation: CorrelationFilter,
    size_head: Head,
    offset_head: Head,
}

impl RccfModel {
    /// Builds a model with parameters drawn from `seed`.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let image = ImageEncoder::new(
            &mut store,
            &mut rng,
            ImageEncoderConfig {
                stride: config.stride,
                channels: config.channels,
                width: config.backbone_width,
            },
        )?;
        let expression = ExpressionEncoder::new(
            &mut store,
            &mut rng,
            ExpressionDims {
                vocab_size: vocab.size(),
                embed: config.embed_dim,
                hidden: config.hidden_dim,
                output: config.lang_dim,
            },
            config.encoder,
        );
        let correlation = CorrelationFilter::new(&mut store, &mut rng, config.correlation());
        let head_in = match config.regression_input {
            RegressionInput::VisualOnly => config.channels,
            RegressionInput::LanguageGuided => config.correlation().level_count(),
        };
        let size_head = Head::new(&mut store, &mut rng, "head.size", head_in, config.head_width);
        let offset_head = Head::new(&mut store, &mut rng, "head.offset", head_in, config.head_width);
        Ok(RccfModel {
            config,
            vocab,
            store,
            image,
            expression,
            correlation,
            size_head,
            offset_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        tokenize(text, &self.vocab)
    }

    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape("model", format!("image {s:?} must be 3xHxW")));
        }
        self.image.check_size(s[1], s[2])
    }

    pub fn encode_image(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<FeaturePyramid> {
        self.image.encode(tape, p, image)
    }

    pub fn encode_expression(&self, tape: &mut Tape, p: &Bound, tokens: &TokenSequence) -> Result<Var> {
        self.expression.encode(tape, p, tokens)
    }

    pub fn correlate(
        &self,
        tape: &mut Tape,
        p: &Bound,
        lang: Var,
        pyramid: &FeaturePyramid,
    ) -> Result<(KernelSet, CorrelationOutput)> {
        self.correlation.forward(tape, p, lang, pyramid)
    }

    /// Size and offset maps from the configured head input.
    pub fn regress(
        &self,
        tape: &mut Tape,
        p: &Bound,
        pyramid: &FeaturePyramid,
        correlation: &CorrelationOutput,
    ) -> Result<(Var, Var)> {
        let x = match self.config.regression_input {
            RegressionInput::VisualOnly => pyramid.levels[0],
            RegressionInput::LanguageGuided => tape.concat(&correlation.per_level)?,
        };
        let size = self.size_head.apply(tape, p, x)?;
        let offset = self.offset_head.apply(tape, p, x)?;
        Ok((size, offset))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        image: Var,
        tokens: &TokenSequence,
    ) -> Result<ForwardOutput> {
        let pyramid = self.encode_image(tape, p, image)?;
        let lang = self.encode_expression(tape, p, tokens)?;
        let (kernels, correlation) = self.correlate(tape, p, lang, &pyramid)?;
        let (size, offset) = self.regress(tape, p, &pyramid, &correlation)?;
        Ok(ForwardOutput {
            pyramid,
            lang,
            kernels,
            correlation,
            size,
            offset,
        })
    }

    pub fn decode(&self, maps: &PredictionMaps, image_w: usize, image_h: usize) -> Result<Prediction> {
        decode_box(maps, self.config.stride, image_w, image_h, self.config.size_units)
    }

    /// Heatmap, regression maps and the decoded box for one image and
    /// expression.
    pub fn predict_maps(&self, image: &Tensor, text: &str) -> Result<(PredictionMaps, Prediction)> {
        self.check_image(image)?;
        let tokens = self.tokenize(text)?;
        let mut tape = Tape::new();
        let p = self.store.bind_constant(&mut tape);
        let x = tape.constant(image);
        let out = self.forward(&mut tape, &p, x, &tokens)?;
        let maps = out.maps(&tape)?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let pred = self.decode(&maps, w, h)?;
        Ok((maps, pred))
    }

    pub fn predict(&self, image: &Tensor, text: &str) -> Result<Prediction> {
        self.predict_maps(image, text).map(|(_, p)| p)
    }
}
