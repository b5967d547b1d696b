//! Training configuration as a flat `key = value` file. Every key has a
//! default and the full resolved set is echoed into run outputs.

use std::fs;
use std::path::Path;

use crate::autodiff::FocalParams;
use crate::error::{Error, Result};
use crate::kv;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::targets::TargetOptions;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_factor: f64,
    /// Fractions of `steps` at which the learning rate is multiplied by
    /// `decay_factor`.
    pub decay_at: [f64; 2],
    /// Steps over which the learning rate ramps linearly up to its base value.
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub lambda_size: f64,
    pub lambda_offset: f64,
    pub focal_alpha: f64,
    pub focal_beta: f64,
    pub focal_eps: f64,
    pub min_overlap: f64,
    pub sigma_min: f64,
    pub augment: bool,
    /// Largest translation as a fraction of the image side.
    pub max_shift: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Steps between held-out evaluations; 0 disables them.
    pub eval_every: usize,
    /// Held-out samples scored at each evaluation; 0 means the whole split.
    pub eval_samples: usize,
    /// Steps between intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            seed: 7,
            steps: 2000,
            batch_size: 16,
            learning_rate: 2e-3,
            decay_factor: 0.1,
            decay_at: [0.75, 0.875],
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            lambda_size: 0.1,
            lambda_offset: 1.0,
            focal_alpha: 2.0,
            focal_beta: 4.0,
            focal_eps: 1e-4,
            min_overlap: 0.7,
            sigma_min: 0.5,
            augment: true,
            max_shift: 0.2,
            scale_min: 0.8,
            scale_max: 1.25,
            eval_every: 250,
            eval_samples: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            size: self.lambda_size,
            offset: self.lambda_offset,
        }
    }

    pub fn focal(&self) -> FocalParams {
        FocalParams {
            alpha: self.focal_alpha,
            beta: self.focal_beta,
            eps: self.focal_eps,
        }
    }

    pub fn target_options(&self) -> TargetOptions {
        TargetOptions {
            min_overlap: self.min_overlap,
            sigma_min: self.sigma_min,
            size_units: self.model.size_units,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive".into());
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("focal_eps", self.focal_eps),
            ("sigma_min", self.sigma_min),
            ("scale_min", self.scale_min),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        let non_negative = [
            ("lambda_size", self.lambda_size),
            ("lambda_offset", self.lambda_offset),
            ("focal_alpha", self.focal_alpha),
            ("focal_beta", self.focal_beta),
            ("max_shift", self.max_shift),
        ];
        for (k, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{k} must be non-negative, got {v}"));
            }
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor {} must lie in (0, 1]", self.decay_factor));
        }
        let [a, b] = self.decay_at;
        if !(0.0 < a && a <= b && b <= 1.0) {
            return bad(format!("decay_at {a} {b} must satisfy 0 < a <= b <= 1"));
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{k} must lie in [0, 1), got {v}"));
            }
        }
        if !(0.0 < self.min_overlap && self.min_overlap < 1.0) {
            return bad(format!("min_overlap {} must lie in (0, 1)", self.min_overlap));
        }
        if self.scale_min > self.scale_max || self.max_shift >= 0.5 {
            return bad("augmentation needs scale_min <= scale_max and max_shift < 0.5".into());
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        put("seed", self.seed.to_string());
        put("steps", self.steps.to_string());
        put("batch_size", self.batch_size.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("decay_factor", self.decay_factor.to_string());
        put("decay_at", format!("{} {}", self.decay_at[0], self.decay_at[1]));
        put("warmup_steps", self.warmup_steps.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("adam_eps", self.adam_eps.to_string());
        put("lambda_size", self.lambda_size.to_string());
        put("lambda_offset", self.lambda_offset.to_string());
        put("focal_alpha", self.focal_alpha.to_string());
        put("focal_beta", self.focal_beta.to_string());
        put("focal_eps", self.focal_eps.to_string());
        put("min_overlap", self.min_overlap.to_string());
        put("sigma_min", self.sigma_min.to_string());
        put("augment", self.augment.to_string());
        put("max_shift", self.max_shift.to_string());
        put("scale_min", self.scale_min.to_string());
        put("scale_max", self.scale_max.to_string());
        put("eval_every", self.eval_every.to_string());
        put("eval_samples", self.eval_samples.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("stride", m.stride.to_string());
        put("channels", m.channels.to_string());
        put("backbone_width", m.backbone_width.to_string());
        put("embed_dim", m.embed_dim.to_string());
        put("hidden_dim", m.hidden_dim.to_string());
        put("lang_dim", m.lang_dim.to_string());
        put("head_width", m.head_width.to_string());
        put("encoder", m.encoder.to_string());
        put("kernel_shape", m.kernel_shape.to_string());
        put("kernel_mode", m.kernel_mode.to_string());
        put("levels", m.levels.to_string());
        put("fusion", m.fusion.to_string());
        put("regression_input", m.regression_input.to_string());
        put("size_units", m.size_units.to_string());
        s
    }

    /// Parses a config file body; absent keys keep their defaults.
    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut c = TrainConfig::default();
        for e in kv::parse(text, path)? {
            c.set(&e, path)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    fn set(&mut self, e: &kv::Entry, path: &Path) -> Result<()> {
        let m = &mut self.model;
        match e.key.as_str() {
            "seed" => self.seed = kv::parse_value(e, path)?,
            "steps" => self.steps = kv::parse_value(e, path)?,
            "batch_size" => self.batch_size = kv::parse_value(e, path)?,
            "learning_rate" => self.learning_rate = kv::parse_value(e, path)?,
            "decay_factor" => self.decay_factor = kv::parse_value(e, path)?,
            "decay_at" => {
                let parts: Vec<&str> = e.value.split_whitespace().collect();
                let bad = || Error::Parse {
                    path: path.to_path_buf(),
                    line: e.line,
                    msg: "`decay_at` expects two fractions".into(),
                };
                let [a, b] = parts[..] else { return Err(bad()) };
                self.decay_at = [a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?];
            }
            "warmup_steps" => self.warmup_steps = kv::parse_value(e, path)?,
            "beta1" => self.beta1 = kv::parse_value(e, path)?,
            "beta2" => self.beta2 = kv::parse_value(e, path)?,
            "adam_eps" => self.adam_eps = kv::parse_value(e, path)?,
            "lambda_size" => self.lambda_size = kv::parse_value(e, path)?,
            "lambda_offset" => self.lambda_offset = kv::parse_value(e, path)?,
            "focal_alpha" => self.focal_alpha = kv::parse_value(e, path)?,
            "focal_beta" => self.focal_beta = kv::parse_value(e, path)?,
            "focal_eps" => self.focal_eps = kv::parse_value(e, path)?,
            "min_overlap" => self.min_overlap = kv::parse_value(e, path)?,
            "sigma_min" => self.sigma_min = kv::parse_value(e, path)?,
            "augment" => self.augment = kv::parse_value(e, path)?,
            "max_shift" => self.max_shift = kv::parse_value(e, path)?,
            "scale_min" => self.scale_min = kv::parse_value(e, path)?,
            "scale_max" => self.scale_max = kv::parse_value(e, path)?,
            "eval_every" => self.eval_every = kv::parse_value(e, path)?,
            "eval_samples" => self.eval_samples = kv::parse_value(e, path)?,
            "checkpoint_every" => self.checkpoint_every = kv::parse_value(e, path)?,
            "stride" => m.stride = kv::parse_value(e, path)?,
            "channels" => m.channels = kv::parse_value(e, path)?,
            "backbone_width" => m.backbone_width = kv::parse_value(e, path)?,
            "embed_dim" => m.embed_dim = kv::parse_value(e, path)?,
            "hidden_dim" => m.hidden_dim = kv::parse_value(e, path)?,
            "lang_dim" => m.lang_dim = kv::parse_value(e, path)?,
            "head_width" => m.head_width = kv::parse_value(e, path)?,
            "encoder" => m.encoder = kv::parse_value(e, path)?,
            "kernel_shape" => m.kernel_shape = kv::parse_value(e, path)?,
            "kernel_mode" => m.kernel_mode = kv::parse_value(e, path)?,
            "levels" => m.levels = kv::parse_value(e, path)?,
            "fusion" => m.fusion = kv::parse_value(e, path)?,
            "regression_input" => m.regression_input = kv::parse_value(e, path)?,
            "size_units" => m.size_units = kv::parse_value(e, path)?,
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: e.line,
                    msg: format!("unknown config key `{other}`"),
                })
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::Fusion;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_text(&c.to_text(), Path::new("c")).unwrap(), c);
        assert_eq!(TrainConfig::from_text("", Path::new("c")).unwrap(), c);
    }

    #[test]
    fn overrides_apply() {
        let c = TrainConfig::from_text("fusion = max\nsteps = 10\ndecay_at = 0.5 0.9\n", Path::new("c")).unwrap();
        assert_eq!(c.model.fusion, Fusion::Max);
        assert_eq!(c.steps, 10);
        assert_eq!(c.decay_at, [0.5, 0.9]);
        assert_eq!(TrainConfig::from_text(&c.to_text(), Path::new("c")).unwrap(), c);
    }

    #[test]
    fn bad_values_are_rejected() {
        for text in [
            "steps = 0",
            "fusion = mean",
            "decay_at = 0.9 0.5",
            "learning_rate = -1",
            "nope = 1",
            "beta2 = 1",
        ] {
            assert!(TrainConfig::from_text(text, Path::new("c")).is_err(), "{text}");
        }
        let err = TrainConfig::from_text("steps = 5\nfusion = mean\n", Path::new("c")).unwrap_err();
        assert!(err.to_string().starts_with("c:2:"), "{err}");
    }
}
