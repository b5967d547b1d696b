//! Mini-batch training with counter-based randomness, so a run resumed
//! from any checkpoint replays the uninterrupted run exactly.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_sample, AugmentConfig};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{Dataset, Record, Sample};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::expression::{TokenSequence, Vocabulary};
use crate::losses::{focal_loss, regression_losses, total_loss};
use crate::model::RccfModel;
use crate::optim::{learning_rate, Adam, AdamConfig};
use crate::params::Bound;
use crate::targets::make_targets;

pub const METRICS_HEADER: &str = "step\tlr\tl_c\tl_size\tl_off\tloss\n";
pub const EVAL_HEADER: &str = "step\tsplit\tcount\tprec@0.5\tmean_iou\n";
/// Window, in steps, of the non-decreasing-loss diagnostic.
pub const ALARM_WINDOW: usize = 100;

/// Batch means of the loss terms at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub l_c: f64,
    pub l_size: f64,
    pub l_off: f64,
    pub loss: f64,
}

impl StepMetrics {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:e}\t{}\t{}\t{}\t{}\n",
            self.step, self.lr, self.l_c, self.l_size, self.l_off, self.loss
        )
    }

    pub fn parse_line(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        let [step, lr, l_c, l_size, l_off, loss] = f[..] else {
            return None;
        };
        Some(StepMetrics {
            step: step.parse().ok()?,
            lr: lr.parse().ok()?,
            l_c: l_c.parse().ok()?,
            l_size: l_size.parse().ok()?,
            l_off: l_off.parse().ok()?,
            loss: loss.parse().ok()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    pub step: usize,
    pub count: usize,
    pub precision: f64,
    pub mean_iou: f64,
}

/// Parses the step rows of a metrics log.
pub fn parse_metrics(text: &str) -> Vec<StepMetrics> {
    text.lines().skip(1).filter_map(StepMetrics::parse_line).collect()
}

/// SplitMix64 finalizer; used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed, |acc, &p| mix(acc ^ mix(p)))
}

const STREAM_SHUFFLE: u64 = 1;
const STREAM_AUGMENT: u64 = 2;

/// Training-split record order for one epoch.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, STREAM_SHUFFLE, epoch]));
    order.shuffle(&mut rng);
    order
}

/// Focal, size and offset losses of one sample and their weighted total.
pub fn sample_losses(
    model: &RccfModel,
    tape: &mut Tape,
    p: &Bound,
    sample: &Sample,
    tokens: &TokenSequence,
    cfg: &TrainConfig,
) -> Result<[Var; 4]> {
    let x = tape.constant(&sample.image);
    let out = model.forward(tape, p, x, tokens)?;
    let (mh, mw) = (out.pyramid.height, out.pyramid.width);
    let targets = make_targets(&sample.target, cfg.model.stride, mh, mw, &cfg.target_options())?;
    let l_c = focal_loss(tape, out.correlation.fused, &targets.heatmap, cfg.focal())?;
    let (l_size, l_off) = regression_losses(tape, out.size, out.offset, &targets)?;
    let total = total_loss(tape, l_c, l_size, l_off, cfg.loss_weights())?;
    Ok([l_c, l_size, l_off, total])
}

pub struct Trainer<'a> {
    config: TrainConfig,
    model: RccfModel,
    adam: Adam,
    step: usize,
    train: &'a [Record],
    val: &'a [Record],
    tokens: Vec<TokenSequence>,
    order: Option<(u64, Vec<usize>)>,
    metrics: String,
    evals: String,
    recent: Vec<f64>,
    previous_window: Option<f64>,
}

impl<'a> Trainer<'a> {
    /// Fresh run: vocabulary from the training split, parameters from the
    /// config seed.
    pub fn new(config: TrainConfig, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        let train = data.split("train")?;
        let vocab = Vocabulary::from_expressions(train.iter().map(|r| r.sample.expression.as_str()));
        let model = RccfModel::new(config.model, vocab, config.seed)?;
        let adam = Adam::new(model.params(), adam_config(&config));
        Self::assemble(config, model, adam, 0, String::from(METRICS_HEADER), data)
    }

    pub fn resume(ckpt: Checkpoint, data: &'a Dataset) -> Result<Self> {
        if ckpt.seed != ckpt.config.seed {
            return Err(Error::Invalid("checkpoint seed disagrees with its config".into()));
        }
        let (metrics, evals) = split_log(&ckpt.metrics);
        let mut t = Self::assemble(ckpt.config, ckpt.model, ckpt.adam, ckpt.step as usize, metrics, data)?;
        t.evals = evals;
        let losses: Vec<f64> = parse_metrics(&t.metrics).iter().map(|m| m.loss).collect();
        let full = losses.len() / ALARM_WINDOW * ALARM_WINDOW;
        if full >= ALARM_WINDOW {
            let w = &losses[full - ALARM_WINDOW..full];
            t.previous_window = Some(w.iter().sum::<f64>() / w.len() as f64);
        }
        t.recent = losses[full..].to_vec();
        Ok(t)
    }

    fn assemble(
        config: TrainConfig,
        model: RccfModel,
        adam: Adam,
        step: usize,
        metrics: String,
        data: &'a Dataset,
    ) -> Result<Self> {
        let train = data.split("train")?;
        if train.is_empty() {
            return Err(Error::Invalid("training split is empty".into()));
        }
        let val = data.split("val").unwrap_or(&[]);
        for r in train.iter().chain(val) {
            model.check_image(&r.sample.image).map_err(|e| {
                Error::Invalid(format!("dataset does not fit the model config ({}): {e}", r.file))
            })?;
        }
        let tokens = train
            .iter()
            .map(|r| model.tokenize(&r.sample.expression))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trainer {
            config,
            model,
            adam,
            step,
            train,
            val,
            tokens,
            order: None,
            metrics,
            evals: String::from(EVAL_HEADER),
            recent: Vec::new(),
            previous_window: None,
        })
    }

    pub fn model(&self) -> &RccfModel {
        &self.model
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Metrics and evaluation logs as written to disk.
    pub fn log_text(&self) -> String {
        format!("{}{}", self.metrics, self.evals)
    }

    pub fn metrics_text(&self) -> &str {
        &self.metrics
    }

    pub fn evals_text(&self) -> &str {
        &self.evals
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            adam: self.adam.clone(),
            step: self.step as u64,
            seed: self.config.seed,
            metrics: self.log_text(),
        }
    }

    fn record_index(&mut self, position: u64) -> usize {
        let n = self.train.len() as u64;
        let epoch = position / n;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.order = Some((epoch, epoch_order(self.config.seed, epoch, self.train.len())));
        }
        self.order.as_ref().expect("just set").1[(position % n) as usize]
    }

    /// One optimizer step over the next batch.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let b = self.config.batch_size;
        let indices: Vec<usize> = (0..b)
            .map(|j| self.record_index((self.step * b + j) as u64))
            .collect();
        let cfg = &self.config;
        let lr = learning_rate(cfg.learning_rate, cfg.decay_factor, cfg.decay_at, cfg.warmup_steps, cfg.steps, self.step);
        let aug = AugmentConfig {
            max_shift: cfg.max_shift,
            scale_min: cfg.scale_min,
            scale_max: cfg.scale_max,
        };
        let (augment, seed) = (cfg.augment, cfg.seed);

        let mut tape = Tape::new();
        let p = self.model.params().bind(&mut tape);
        let mut sums = [0.0; 3];
        let mut batch_losses = Vec::with_capacity(b);
        for (j, &idx) in indices.iter().enumerate() {
            let record = &self.train[idx].sample;
            let sample = if augment {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                    seed,
                    STREAM_AUGMENT,
                    self.step as u64,
                    j as u64,
                ]));
                augment_sample(record, &aug, &mut rng).0
            } else {
                record.clone()
            };
            let [l_c, l_size, l_off, total] =
                sample_losses(&self.model, &mut tape, &p, &sample, &self.tokens[idx], cfg)?;
            for (s, v) in sums.iter_mut().zip([l_c, l_size, l_off]) {
                *s += tape.scalar(v);
            }
            batch_losses.push(total);
        }
        let stacked = tape.concat(&batch_losses)?;
        let summed = tape.sum(stacked);
        let loss = tape.scale(summed, 1.0 / b as f64);
        let grads = tape.backward(loss)?;
        let store = self.model.params_mut();
        store.zero_grad();
        store.accumulate(&grads, &p);
        self.adam.step(store, lr)?;

        self.step += 1;
        let n = b as f64;
        let m = StepMetrics {
            step: self.step,
            lr,
            l_c: sums[0] / n,
            l_size: sums[1] / n,
            l_off: sums[2] / n,
            loss: tape.scalar(loss),
        };
        self.metrics.push_str(&m.to_line());
        self.watch_loss(m.loss);
        Ok(m)
    }

    fn watch_loss(&mut self, loss: f64) {
        self.recent.push(loss);
        if self.recent.len() < ALARM_WINDOW {
            return;
        }
        let mean = self.recent.iter().sum::<f64>() / self.recent.len() as f64;
        if let Some(prev) = self.previous_window {
            if mean >= prev {
                log::warn!(
                    "loss not decreasing: mean {mean:.5} over steps {}..={} vs {prev:.5} before",
                    self.step + 1 - ALARM_WINDOW,
                    self.step
                );
            }
        }
        self.previous_window = Some(mean);
        self.recent.clear();
    }

    /// Held-out Prec@0.5 on the validation split (or its first
    /// `eval_samples` records).
    pub fn evaluate_val(&mut self) -> Result<Option<EvalPoint>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let n = match self.config.eval_samples {
            0 => self.val.len(),
            k => k.min(self.val.len()),
        };
        let r = evaluate(&self.model, "val", &self.val[..n])?;
        let point = EvalPoint {
            step: self.step,
            count: r.count,
            precision: r.precision,
            mean_iou: r.mean_iou,
        };
        self.evals.push_str(&format!(
            "{}\tval\t{}\t{:.6}\t{:.6}\n",
            point.step, point.count, point.precision, point.mean_iou
        ));
        Ok(Some(point))
    }

    /// Trains until `config.steps`, evaluating and checkpointing on the
    /// configured cadence. With `out_dir`, writes `config.txt`,
    /// `metrics.tsv`, `eval.tsv`, `checkpoint-<step>.ckpt` and the final
    /// `model.ckpt`.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<Checkpoint> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write(&dir.join("config.txt"), &self.config.to_text())?;
        }
        let started = Instant::now();
        while self.step < self.config.steps {
            let m = self.train_step()?;
            let s = self.step;
            if s % 50 == 0 || s == 1 {
                log::info!(
                    "step {s}/{} loss {:.4} (l_c {:.4} l_size {:.4} l_off {:.4}) lr {:e} [{:.0}s]",
                    self.config.steps,
                    m.loss,
                    m.l_c,
                    m.l_size,
                    m.l_off,
                    m.lr,
                    started.elapsed().as_secs_f64()
                );
            }
            let every = self.config.eval_every;
            if (every > 0 && s % every == 0) || s == self.config.steps {
                if let Some(e) = self.evaluate_val()? {
                    log::info!("step {s} val prec@0.5 {:.4} mean iou {:.4}", e.precision, e.mean_iou);
                }
            }
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && s % every == 0 && s < self.config.steps {
                    self.checkpoint().save(&dir.join(format!("checkpoint-{s:06}.ckpt")))?;
                }
            }
        }
        let ckpt = self.checkpoint();
        if let Some(dir) = out_dir {
            write(&dir.join("metrics.tsv"), &self.metrics)?;
            write(&dir.join("eval.tsv"), &self.evals)?;
            ckpt.save(&dir.join("model.ckpt"))?;
        }
        Ok(ckpt)
    }
}

fn adam_config(c: &TrainConfig) -> AdamConfig {
    AdamConfig {
        beta1: c.beta1,
        beta2: c.beta2,
        eps: c.adam_eps,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Splits the stored log back into its metrics and evaluation parts.
fn split_log(text: &str) -> (String, String) {
    match text.find(EVAL_HEADER) {
        Some(i) => (text[..i].to_string(), text[i..].to_string()),
        None => (text.to_string(), String::from(EVAL_HEADER)),
    }
}

/// Trains from scratch on `data`.
pub fn train(config: &TrainConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<Checkpoint> {
    Trainer::new(config.clone(), data)?.run(out_dir)
}
