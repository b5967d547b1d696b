//! Referring-expression grounding by language-guided correlation filtering:
//! an expression is turned into convolution kernels that are correlated
//! with a multi-level visual feature pyramid to produce a center-point
//! heatmap, from which a box is decoded with size and offset regression.

pub mod ablation;
pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod correlation;
pub mod data;
pub mod decode;
pub mod error;
pub mod eval;
pub mod expression;
pub mod gradcheck;
pub mod image_encoder;
pub mod kv;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod targets;
pub mod tensor;
pub mod train;

pub use ablation::{run_ablation, AblationTable, Variant};
pub use augment::{augment_sample, AugmentConfig, Transform};
pub use autodiff::{Activation, FocalParams, Gradients, Tape, Var};
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use correlation::{
    correlate, fuse_maps, CorrelationConfig, CorrelationFilter, CorrelationOutput, Fusion,
    KernelMode, KernelSet, KernelShape, LevelMode,
};
pub use decode::{argmax, decode_box, iou, precision_at_iou, BBox, Prediction, PredictionMaps};
pub use error::{Error, Result};
pub use eval::{dump_heatmap, evaluate, timing_profile, SplitReport, TimingProfile};
pub use expression::{
    tokenize, EncoderKind, ExpressionDims, ExpressionEncoder, TokenSequence, Vocabulary,
};
pub use image_encoder::{FeaturePyramid, ImageEncoder, ImageEncoderConfig};
pub use losses::{focal_loss, focal_loss_value, regression_losses, total_loss, total_loss_value, LossWeights};
pub use model::{ForwardOutput, ModelConfig, RccfModel, RegressionInput};
pub use optim::{learning_rate, Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use targets::{
    gaussian_radius, gaussian_sigma, make_targets, GroundTruthBox, SizeUnits, TargetBundle,
    TargetOptions,
};
pub use tensor::Tensor;
pub use train::{train, StepMetrics, Trainer};
