//! Language-guided kernels, cross-modality correlation and map fusion.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image_encoder::FeaturePyramid;
use crate::params::{lecun_bound, uniform, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

macro_rules! keyword_enum {
    ($name:ident { $($variant:ident => $kw:literal),+ $(,)? }) => {
        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $kw),+ })
            }
        }
        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($kw => Ok($name::$variant),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " `{}` (", $($kw, " ",)+ ")"),
                        s
                    ))),
                }
            }
        }
    };
}
pub(crate) use keyword_enum;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelShape {
    OneByOne,
    ThreeByThree,
}
keyword_enum!(KernelShape { OneByOne => "1x1", ThreeByThree => "3x3" });

impl KernelShape {
    pub fn side(self) -> usize {
        match self {
            KernelShape::OneByOne => 1,
            KernelShape::ThreeByThree => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelMode {
    /// One linear map per pyramid level.
    PerLevel,
    /// One linear map whose kernel is shared by every level.
    Single,
}
keyword_enum!(KernelMode { PerLevel => "per-level", Single => "single" });

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    Average,
    Max,
    Concat,
}
keyword_enum!(Fusion { Average => "average", Max => "max", Concat => "concat" });

/// Which pyramid levels take part in correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelMode {
    Multi,
    /// Only the highest-resolution level.
    Single,
}
keyword_enum!(LevelMode { Multi => "multi", Single => "single" });

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorrelationConfig {
    pub lang_dim: usize,
    pub channels: usize,
    pub kernel_shape: KernelShape,
    pub kernel_mode: KernelMode,
    pub levels: LevelMode,
    pub fusion: Fusion,
}

impl CorrelationConfig {
    pub fn level_count(&self) -> usize {
        match self.levels {
            LevelMode::Multi => 3,
            LevelMode::Single => 1,
        }
    }
}

/// Kernels produced from one expression feature, each `C x k x k`.
#[derive(Debug, Clone)]
pub struct KernelSet {
    pub kernels: Vec<Var>,
    pub shape: KernelShape,
    pub mode: KernelMode,
}

#[derive(Debug, Clone)]
pub struct CorrelationOutput {
    /// Pre-activation maps, each `1 x H x W`.
    pub per_level: Vec<Var>,
    /// Fused heatmap in (0, 1), `1 x H x W`.
    pub fused: Var,
    pub fusion: Fusion,
}

/// Correlates `kernel` (`C x k x k`) with `level` (`C x H x W`), zero-padded
/// so the output keeps the level's spatial size. Returns `1 x H x W`.
pub fn correlate(tape: &mut Tape, kernel: Var, level: Var) -> Result<Var> {
    let ks = tape.shape(kernel).to_vec();
    let ls = tape.shape(level).to_vec();
    if ks.len() != 3 || ls.len() != 3 || ks[0] != ls[0] || ks[1] != ks[2] || ks[1] % 2 == 0 {
        return Err(Error::shape(
            "correlate",
            format!("kernel {ks:?} does not fit feature level {ls:?}"),
        ));
    }
    let k4 = tape.reshape(kernel, &[1, ks[0], ks[1], ks[2]])?;
    tape.conv2d(level, k4, None, 1, ks[1] / 2)
}

/// Fuses pre-activation correlation maps and applies the sigmoid.
///
/// `concat_weights` is the `(1 x n x 1 x 1 kernel, [1] bias)` pair used by
/// [`Fusion::Concat`].
pub fn fuse_maps(
    tape: &mut Tape,
    maps: &[Var],
    fusion: Fusion,
    concat_weights: Option<(Var, Var)>,
) -> Result<Var> {
    let first = *maps
        .first()
        .ok_or_else(|| Error::shape("fuse_maps", "no correlation maps"))?;
    let pre = match fusion {
        Fusion::Average => {
            let mut acc = first;
            for &m in &maps[1..] {
                acc = tape.add(acc, m)?;
            }
            if maps.len() == 1 {
                acc
            } else {
                tape.scale(acc, 1.0 / maps.len() as f64)
            }
        }
        Fusion::Max => tape.max(maps)?,
        Fusion::Concat => {
            let (w, b) = concat_weights.ok_or_else(|| {
                Error::Config("concat fusion requires 1x1 convolution weights".into())
            })?;
            let stacked = tape.concat(maps)?;
            tape.conv2d(stacked, w, Some(b), 1, 0)?
        }
    };
    Ok(tape.sigmoid(pre))
}

/// Parameters of the cross-modality mapping and the optional fusion layer.
#[derive(Debug, Clone)]
pub struct CorrelationFilter {
    config: CorrelationConfig,
    maps: Vec<(ParamId, ParamId)>,
    concat: Option<(ParamId, ParamId)>,
}

impl CorrelationFilter {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: CorrelationConfig) -> Self {
        let k = config.kernel_shape.side();
        let out = config.channels * k * k;
        let n_maps = match config.kernel_mode {
            KernelMode::PerLevel => config.level_count(),
            KernelMode::Single => 1,
        };
        let maps = (0..n_maps)
            .map(|i| {
                let w = store.add(
                    format!("corr.map{}.w", i + 1),
                    uniform(rng, &[out, config.lang_dim], lecun_bound(config.lang_dim)),
                );
                let b = store.add(format!("corr.map{}.b", i + 1), Tensor::zeros(&[out]));
                (w, b)
            })
            .collect();
        let concat = (config.fusion == Fusion::Concat).then(|| {
            let n = config.level_count();
            let w = store.add(
                "corr.fuse.w",
                Tensor::full(&[1, n, 1, 1], 1.0 / n as f64),
            );
            let b = store.add("corr.fuse.b", Tensor::zeros(&[1]));
            (w, b)
        });
        CorrelationFilter {
            config,
            maps,
            concat,
        }
    }

    pub fn config(&self) -> CorrelationConfig {
        self.config
    }

    /// `k_i = M_i(L_Q)` reshaped to `C x k x k`; in single mode the one
    /// kernel is repeated for every level.
    pub fn generate_kernels(&self, tape: &mut Tape, p: &Bound, lang: Var) -> Result<KernelSet> {
        let ls = tape.shape(lang);
        if ls != [self.config.lang_dim] {
            return Err(Error::shape(
                "generate_kernels",
                format!("expression feature {ls:?} vs mapping input {}", self.config.lang_dim),
            ));
        }
        let k = self.config.kernel_shape.side();
        let c = self.config.channels;
        let mut kernels = Vec::with_capacity(self.maps.len());
        for &(w, b) in &self.maps {
            let v = tape.linear(lang, p[w], Some(p[b]))?;
            kernels.push(tape.reshape(v, &[c, k, k])?);
        }
        while kernels.len() < self.config.level_count() {
            kernels.push(kernels[0]);
        }
        Ok(KernelSet {
            kernels,
            shape: self.config.kernel_shape,
            mode: self.config.kernel_mode,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        lang: Var,
        pyramid: &FeaturePyramid,
    ) -> Result<(KernelSet, CorrelationOutput)> {
        let kernels = self.generate_kernels(tape, p, lang)?;
        let mut per_level = Vec::with_capacity(kernels.kernels.len());
        for (&k, &level) in kernels.kernels.iter().zip(&pyramid.levels) {
            per_level.push(correlate(tape, k, level)?);
        }
        let concat = self.concat.map(|(w, b)| (p[w], p[b]));
        let fused = fuse_maps(tape, &per_level, self.config.fusion, concat)?;
        Ok((
            kernels,
            CorrelationOutput {
                per_level,
                fused,
                fusion: self.config.fusion,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg(shape: KernelShape, mode: KernelMode, fusion: Fusion) -> CorrelationConfig {
        CorrelationConfig {
            lang_dim: 6,
            channels: 8,
            kernel_shape: shape,
            kernel_mode: mode,
            levels: LevelMode::Multi,
            fusion,
        }
    }

    fn filter(c: CorrelationConfig) -> (ParamStore, CorrelationFilter) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = CorrelationFilter::new(&mut store, &mut rng, c);
        (store, f)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform(&mut rng, shape, 1.0)
    }

    #[test]
    fn one_by_one_kernels_have_channel_shape() {
        let (store, f) = filter(cfg(KernelShape::OneByOne, KernelMode::PerLevel, Fusion::Average));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let l = tape.constant(&random(&[6], 1));
        let ks = f.generate_kernels(&mut tape, &p, l).unwrap();
        assert_eq!(ks.kernels.len(), 3);
        for k in &ks.kernels {
            assert_eq!(tape.shape(*k), &[8, 1, 1]);
        }
    }

    #[test]
    fn three_by_three_kernels_use_nine_times_the_outputs() {
        let (store, f) = filter(cfg(KernelShape::ThreeByThree, KernelMode::PerLevel, Fusion::Average));
        let (w, _) = f.maps[0];
        assert_eq!(store.get(w).shape(), &[72, 6]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let l = tape.constant(&random(&[6], 1));
        let ks = f.generate_kernels(&mut tape, &p, l).unwrap();
        for k in &ks.kernels {
            assert_eq!(tape.shape(*k), &[8, 3, 3]);
        }
    }

    #[test]
    fn zero_feature_yields_bias_kernels() {
        let (mut store, f) = filter(cfg(KernelShape::OneByOne, KernelMode::PerLevel, Fusion::Average));
        for (i, &(_, b)) in f.maps.iter().enumerate() {
            let name = store.name(b).to_string();
            let vals = (0..8).map(|j| (i * 10 + j) as f64).collect();
            store
                .set_values(&name, Tensor::new(&[8], vals).unwrap())
                .unwrap();
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let l = tape.constant(&Tensor::zeros(&[6]));
        let ks = f.generate_kernels(&mut tape, &p, l).unwrap();
        for (k, &(_, b)) in ks.kernels.iter().zip(&f.maps) {
            assert_eq!(tape.value(*k), store.get(b).values());
        }
    }

    #[test]
    fn single_mode_repeats_one_kernel() {
        let (store, f) = filter(cfg(KernelShape::OneByOne, KernelMode::Single, Fusion::Average));
        assert_eq!(f.maps.len(), 1);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let l = tape.constant(&random(&[6], 2));
        let ks = f.generate_kernels(&mut tape, &p, l).unwrap();
        assert_eq!(ks.kernels.len(), 3);
        assert_eq!(tape.value(ks.kernels[0]), tape.value(ks.kernels[2]));
    }

    #[test]
    fn mapping_dimension_mismatch() {
        let (store, f) = filter(cfg(KernelShape::OneByOne, KernelMode::PerLevel, Fusion::Average));
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let l = tape.constant(&Tensor::zeros(&[5]));
        assert!(matches!(
            f.generate_kernels(&mut tape, &p, l),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn correlation_is_linear_in_the_kernel() {
        let mut tape = Tape::new();
        let k = tape.constant(&random(&[4, 3, 3], 3));
        let e = tape.constant(&random(&[4, 5, 6], 4));
        let a = correlate(&mut tape, k, e).unwrap();
        let k2 = tape.scale(k, 2.0);
        let b = correlate(&mut tape, k2, e).unwrap();
        assert_eq!(tape.shape(a), &[1, 5, 6]);
        for (x, y) in tape.value(a).iter().zip(tape.value(b)) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
        let z = tape.constant(&Tensor::zeros(&[4, 3, 3]));
        let c = correlate(&mut tape, z, e).unwrap();
        assert!(tape.value(c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn correlation_channel_mismatch() {
        let mut tape = Tape::new();
        let k = tape.constant(&Tensor::zeros(&[3, 1, 1]));
        let e = tape.constant(&Tensor::zeros(&[4, 5, 5]));
        assert!(matches!(correlate(&mut tape, k, e), Err(Error::Shape { .. })));
    }

    #[test]
    fn fusion_reference_values() {
        let mut tape = Tape::new();
        let m = tape.constant(&random(&[1, 4, 4], 8));
        let avg = fuse_maps(&mut tape, &[m, m, m], Fusion::Average, None).unwrap();
        let sig = tape.sigmoid(m);
        for (a, b) in tape.value(avg).iter().zip(tape.value(sig)) {
            assert!((a - b).abs() < 1e-15);
        }
        let z = tape.constant(&Tensor::zeros(&[1, 2, 2]));
        let h = fuse_maps(&mut tape, &[z, z, z], Fusion::Average, None).unwrap();
        assert!(tape.value(h).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn mean_never_exceeds_max() {
        let mut tape = Tape::new();
        let maps: Vec<Var> = (0..3).map(|i| tape.constant(&random(&[1, 5, 5], 20 + i))).collect();
        let mx = tape.max(&maps).unwrap();
        let mut sum = tape.add(maps[0], maps[1]).unwrap();
        sum = tape.add(sum, maps[2]).unwrap();
        let mean = tape.scale(sum, 1.0 / 3.0);
        for (a, b) in tape.value(mean).iter().zip(tape.value(mx)) {
            assert!(a <= b);
        }
    }

    #[test]
    fn concat_without_weights_is_a_config_error() {
        let mut tape = Tape::new();
        let m = tape.constant(&Tensor::zeros(&[1, 2, 2]));
        let err = fuse_maps(&mut tape, &[m, m, m], Fusion::Concat, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn keywords_round_trip() {
        for f in [Fusion::Average, Fusion::Max, Fusion::Concat] {
            assert_eq!(f.to_string().parse::<Fusion>().unwrap(), f);
        }
        assert_eq!("3x3".parse::<KernelShape>().unwrap(), KernelShape::ThreeByThree);
        assert!("5x5".parse::<KernelShape>().is_err());
    }
}
