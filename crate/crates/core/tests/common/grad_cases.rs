//! Randomized finite-difference cases for every differentiable tape
//! operation and for the full training loss. Shared by the gradient
//! property tests and the acceptance harness.
//!
//! Each case draws its shapes and values from a seed, reduces the
//! operation's output to a scalar through a fixed random projection (so one
//! check covers the whole vector-Jacobian product) and returns the largest
//! relative error over all coordinates. Inputs to ReLU, abs and max are
//! drawn away from their kinks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rccf_core::correlation::{correlate, fuse_maps, Fusion};
use rccf_core::data::{generate_sample, GeneratorConfig, Sample};
use rccf_core::expression::{EncoderKind, Vocabulary};
use rccf_core::gradcheck::{finite_difference_check, finite_difference_check_at, FD_STEP};
use rccf_core::targets::GroundTruthBox;
use rccf_core::train::sample_losses;
use rccf_core::{Activation, FocalParams, ModelConfig, RccfModel, Result, Tape, Tensor, TrainConfig, Var, Variant};

pub const TOL: f64 = 1e-4;

pub type Case = fn(u64) -> Result<f64>;

pub const OPS: [(&str, Case); 15] = [
    ("conv2d", conv2d),
    ("linear", linear),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("tanh", tanh),
    ("bilinear_resize", bilinear_resize),
    ("add_sub_mul", add_sub_mul),
    ("scale_offset", scale_offset),
    ("abs", abs),
    ("sum_reshape_concat_slice", sum_reshape_concat_slice),
    ("row_pick", row_pick),
    ("max", max),
    ("focal_loss", focal_loss),
    ("correlation", correlation),
    ("fusion", fusion),
];

pub const COMPOSITE: (&str, Case) = ("composite", composite);

fn values(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Magnitudes in `[0.05, 1.5]` with random signs: at least 50 steps from
/// zero.
fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// `sum(y * w)` for a fixed random `w` of y's shape.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let n = t.value(y).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = t.constant_from(&shape, values(&mut rng, n, -1.0, 1.0))?;
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// Splits a flat point into consecutive pieces of the given shapes.
fn split(t: &mut Tape, x: Var, shapes: &[Vec<usize>]) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut start = 0;
    for s in shapes {
        let n: usize = s.iter().product();
        let piece = t.slice(x, start, n)?;
        out.push(t.reshape(piece, s)?);
        start += n;
    }
    Ok(out)
}

fn numel(shapes: &[Vec<usize>]) -> usize {
    shapes.iter().map(|s| s.iter().product::<usize>()).sum()
}

fn check<F>(f: F, point: Vec<f64>) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let n = point.len();
    let r = finite_difference_check(f, &Tensor::new(&[n], point)?, FD_STEP)?;
    Ok(r.max_relative_error)
}

fn conv2d(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c_in, c_out) = (rng.random_range(1..4), rng.random_range(1..4));
    let (h, w, k) = (rng.random_range(3..7), rng.random_range(3..7), rng.random_range(1..4));
    let (stride, pad, with_bias) = (rng.random_range(1..3), rng.random_range(0..2), rng.random_bool(0.5));
    let shapes = vec![vec![c_in, h, w], vec![c_out, c_in, k, k], vec![c_out]];
    let point = values(&mut rng, numel(&shapes), -1.0, 1.0);
    check(
        |t, x| {
            let v = split(t, x, &shapes)?;
            let y = t.conv2d(v[0], v[1], with_bias.then_some(v[2]), stride, pad)?;
            project(t, y, seed)
        },
        point,
    )
}

fn linear(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d_in, d_out, with_bias) = (rng.random_range(1..8), rng.random_range(1..8), rng.random_bool(0.5));
    let shapes = vec![vec![d_in], vec![d_out, d_in], vec![d_out]];
    let point = values(&mut rng, numel(&shapes), -1.0, 1.0);
    check(
        |t, x| {
            let v = split(t, x, &shapes)?;
            let y = t.linear(v[0], v[1], with_bias.then_some(v[2]))?;
            project(t, y, seed)
        },
        point,
    )
}

fn activation(seed: u64, kind: Activation) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..20);
    let point = match kind {
        Activation::Relu => off_zero(&mut rng, n),
        _ => values(&mut rng, n, -4.0, 4.0),
    };
    check(
        |t, x| {
            let y = t.activation(x, kind);
            project(t, y, seed)
        },
        point,
    )
}

fn relu(seed: u64) -> Result<f64> {
    activation(seed, Activation::Relu)
}

fn sigmoid(seed: u64) -> Result<f64> {
    activation(seed, Activation::Sigmoid)
}

fn tanh(seed: u64) -> Result<f64> {
    activation(seed, Activation::Tanh)
}

fn bilinear_resize(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (rng.random_range(1..3), rng.random_range(1..6), rng.random_range(1..6));
    let (oh, ow) = (rng.random_range(1..9), rng.random_range(1..9));
    let point = values(&mut rng, c * h * w, -1.0, 1.0);
    check(
        |t, x| {
            let m = t.reshape(x, &[c, h, w])?;
            let y = t.bilinear_resize(m, oh, ow)?;
            project(t, y, seed)
        },
        point,
    )
}

fn add_sub_mul(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..16);
    let shapes = vec![vec![n], vec![n]];
    let point = values(&mut rng, 2 * n, -2.0, 2.0);
    check(
        |t, x| {
            let v = split(t, x, &shapes)?;
            let a = t.add(v[0], v[1])?;
            let s = t.sub(v[0], v[1])?;
            let m = t.mul(v[0], v[1])?;
            let y = t.concat(&[a, s, m])?;
            project(t, y, seed)
        },
        point,
    )
}

fn scale_offset(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k) = (rng.random_range(1..16), rng.random_range(-3.0..3.0));
    let point = values(&mut rng, n, -2.0, 2.0);
    check(
        |t, x| {
            let s = t.scale(x, k);
            let o = t.offset(x, k);
            let y = t.mul(s, o)?;
            project(t, y, seed)
        },
        point,
    )
}

fn abs(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..20);
    let point = off_zero(&mut rng, n);
    check(
        |t, x| {
            let y = t.abs(x);
            project(t, y, seed)
        },
        point,
    )
}

/// Quadratic in the point, so central differences are exact up to
/// rounding.
fn sum_reshape_concat_slice(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b, inner) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..5));
    let shapes = vec![vec![a, inner], vec![b, inner]];
    let point = values(&mut rng, numel(&shapes), -1.0, 1.0);
    check(
        |t, x| {
            let v = split(t, x, &shapes)?;
            let cat = t.concat(&v)?;
            let tail = t.slice(cat, a, b)?;
            let flat = t.reshape(tail, &[b * inner])?;
            let sq = t.mul(flat, flat)?;
            let quad = project(t, sq, seed)?;
            let lin = project(t, cat, seed.wrapping_add(1))?;
            let both = t.concat(&[quad, lin])?;
            Ok(t.sum(both))
        },
        point,
    )
}

fn row_pick(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (rng.random_range(1..6), rng.random_range(1..6));
    let (r, c) = (rng.random_range(0..rows), rng.random_range(0..cols));
    let point = values(&mut rng, rows * cols, -1.0, 1.0);
    check(
        |t, x| {
            let table = t.reshape(x, &[rows, cols])?;
            let row = t.row(table, r)?;
            let one = t.pick(row, c)?;
            let sq = t.mul(one, one)?;
            let y = project(t, row, seed)?;
            t.add(y, sq)
        },
        point,
    )
}

/// `k` rows of `n` values; per column the rows sit on shuffled levels 0.1
/// apart, so no two inputs tie within a step.
fn separated_rows(rng: &mut ChaCha8Rng, k: usize, n: usize, spacing: f64) -> Vec<f64> {
    let mut point = vec![0.0; k * n];
    for i in 0..n {
        let mut levels: Vec<f64> = (0..k).map(|j| j as f64 * spacing).collect();
        levels.shuffle(rng);
        for j in 0..k {
            point[j * n + i] = levels[j] + rng.random_range(-0.2 * spacing..0.2 * spacing);
        }
    }
    point
}

fn max(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, n) = (rng.random_range(1..4), rng.random_range(1..10));
    let point = separated_rows(&mut rng, k, n, 0.1);
    let shapes = vec![vec![n]; k];
    check(
        |t, x| {
            let v = split(t, x, &shapes)?;
            let y = t.max(&v)?;
            project(t, y, seed)
        },
        point,
    )
}

/// Predictions in `[0.1, 0.9]`, away from the clamp boundaries.
fn focal_loss(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, centers) = (rng.random_range(1..20), rng.random_range(0..3));
    let mut target = values(&mut rng, n, 0.0, 0.95);
    for c in target.iter_mut().take(centers) {
        *c = 1.0;
    }
    let point = values(&mut rng, n, 0.1, 0.9);
    check(|t, x| t.focal_loss(x, &target, FocalParams::default()), point)
}

fn correlation(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6));
    let k = if rng.random_bool(0.5) { 3 } else { 1 };
    let shapes = vec![vec![c, k, k], vec![c, h, w]];
    let point = values(&mut rng, numel(&shapes), -1.0, 1.0);
    check(
        |t, x| {
            let v = split(t, x, &shapes)?;
            let y = correlate(t, v[0], v[1])?;
            project(t, y, seed)
        },
        point,
    )
}

fn fusion(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (levels, h, w) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5));
    let fusion = [Fusion::Average, Fusion::Max, Fusion::Concat][rng.random_range(0..3)];
    let mut point = separated_rows(&mut rng, levels, h * w, 0.2);
    point.extend(values(&mut rng, levels + 1, -1.0, 1.0));
    let mut shapes = vec![vec![1, h, w]; levels];
    shapes.push(vec![1, levels, 1, 1]);
    shapes.push(vec![1]);
    check(
        |t, x| {
            let v = split(t, x, &shapes)?;
            let cw = (fusion == Fusion::Concat).then_some((v[levels], v[levels + 1]));
            let y = fuse_maps(t, &v[..levels], fusion, cw)?;
            project(t, y, seed)
        },
        point,
    )
}

/// Chained conv, tanh, resize, a kernel from a linear map of a tanh vector,
/// correlation, sigmoid and focal loss. Positive inputs and targets below 1
/// make the loss increasing along every path, so no coordinate's gradient
/// cancels to near zero, where central differences lose their relative
/// accuracy.
fn composite(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = vec![vec![2, 4, 4], vec![3, 2, 3, 3], vec![3], vec![4], vec![3, 4]];
    let target = values(&mut rng, 36, 0.0, 0.9);
    let point = values(&mut rng, numel(&shapes), 0.02, 0.4);
    check(
        |t, x| {
            let v = split(t, x, &shapes)?;
            let f = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            let f = t.tanh(f);
            let f = t.bilinear_resize(f, 6, 6)?;
            let lang = t.tanh(v[3]);
            let k = t.linear(lang, v[4], None)?;
            let k = t.reshape(k, &[3, 1, 1])?;
            let m = correlate(t, k, f)?;
            let p = t.sigmoid(m);
            t.focal_loss(p, &target, FocalParams::default())
        },
        point,
    )
}

/// A tiny model at stride 2 with parameters jittered by `jitter`, and a
/// generated scene block-averaged down to 16x16 so that few ReLU units sit
/// within a step of their kink.
fn tiny_model(variant: Variant, encoder: EncoderKind, jitter: u64) -> Result<(TrainConfig, RccfModel, Sample)> {
    let mut cfg = variant.apply(&TrainConfig::default());
    cfg.model = ModelConfig {
        stride: 2,
        channels: 3,
        backbone_width: 4,
        embed_dim: 4,
        hidden_dim: 4,
        lang_dim: 5,
        head_width: 2,
        encoder,
        ..cfg.model
    };
    let g = generate_sample(11, &GeneratorConfig::default())?.sample;
    let (f, n) = (4, 16);
    let src = g.image.values();
    let mut small = vec![0.0; 3 * n * n];
    for c in 0..3 {
        for y in 0..n * f {
            for x in 0..n * f {
                small[(c * n + y / f) * n + x / f] += src[(c * n * f + y) * n * f + x] / (f * f) as f64;
            }
        }
    }
    let t = g.target;
    let s = f as f64;
    let sample = Sample {
        image: Tensor::new(&[3, n, n], small)?,
        expression: g.expression,
        target: GroundTruthBox {
            cx: t.cx / s,
            cy: t.cy / s,
            w: t.w / s,
            h: t.h / s,
        },
    };
    let vocab = Vocabulary::from_expressions([sample.expression.as_str()]);
    let mut model = RccfModel::new(cfg.model, vocab, 5)?;
    // Zero-initialized biases can leave units exactly on a ReLU kink;
    // jitter every parameter to reach a generic point.
    let mut rng = ChaCha8Rng::seed_from_u64(jitter);
    let store = model.params_mut();
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).values_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    Ok((cfg, model, sample))
}

#[derive(Debug, Default)]
pub struct PipelineReport {
    pub max_error: f64,
    pub coordinates: usize,
    /// `variant tensor` labels with no coordinate off every kink.
    pub unchecked: Vec<String>,
    /// `variant tensor[coordinate]` labels at or above [`TOL`].
    pub failures: Vec<String>,
}

/// Full training loss against central differences for every parameter
/// tensor of each ablation variant. Coordinates are drawn at random until
/// three are found whose perturbations cross no ReLU, abs, max or clamp
/// boundary; a tensor with none among its draws is retried at a freshly
/// jittered point.
pub fn full_pipeline(seed: u64) -> Result<PipelineReport> {
    const WANT: usize = 3;
    const DRAWS: usize = 12;
    const POINTS: u64 = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = PipelineReport::default();
    for (i, variant) in Variant::ALL.into_iter().enumerate() {
        let encoder = if i % 2 == 0 { EncoderKind::Recurrent } else { EncoderKind::BagOfWords };
        let count = tiny_model(variant, encoder, 0)?.1.params().len();
        for k in 0..count {
            let mut smooth = 0;
            let mut name = String::new();
            for jitter in 0..POINTS {
                let (cfg, model, sample) = tiny_model(variant, encoder, jitter)?;
                let tokens = model.tokenize(&sample.expression)?;
                let store = model.params();
                let id = store.ids().nth(k).expect("same layout at every jitter");
                let point = store.get(id).clone();
                name = store.name(id).to_string();
                for _ in 0..DRAWS {
                    let coord = rng.random_range(0..point.numel());
                    let r = finite_difference_check_at(
                        |t, x| {
                            let p = store.bind_replacing(t, id, x);
                            let [.., total] = sample_losses(&model, t, &p, &sample, &tokens, &cfg)?;
                            Ok(total)
                        },
                        &point,
                        FD_STEP,
                        &[coord],
                    )?;
                    if r.crosses_kink[0] {
                        continue;
                    }
                    report.max_error = report.max_error.max(r.max_relative_error);
                    report.coordinates += 1;
                    if r.max_relative_error >= TOL {
                        report.failures.push(format!(
                            "{variant:?} {name}[{coord}]: error {:.3e}, analytic {}, numeric {}",
                            r.max_relative_error, r.analytic[0], r.numeric[0]
                        ));
                    }
                    smooth += 1;
                    if smooth == WANT {
                        break;
                    }
                }
                if smooth > 0 {
                    break;
                }
            }
            if smooth == 0 {
                report.unchecked.push(format!("{variant:?} {name}"));
            }
        }
    }
    Ok(report)
}
