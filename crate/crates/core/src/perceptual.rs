//! Image distances used by the alignment loss.
//!
//! `pixel` is plain mean squared error. `random_features` runs a frozen,
//! seeded random convolution at several pooling levels, squashes with tanh,
//! normalizes each pixel's feature vector to unit length and averages the
//! squared differences per level.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::nn::{Conv2d, ConvCache, Init, ParamSet};
use crate::tensor::Tensor;
use crate::Result;

pub const DEFAULT_LEVELS: [usize; 4] = [1, 2, 4, 8];
const FEATURES: usize = 8;
const NORM_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    Pixel,
    #[default]
    RandomFeatures,
}

impl std::str::FromStr for ExtractorKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(Self::Pixel),
            "random_features" => Ok(Self::RandomFeatures),
            other => invalid(format!("unknown extractor kind {other:?}")),
        }
    }
}

impl std::fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Pixel => "pixel",
            Self::RandomFeatures => "random_features",
        })
    }
}

#[derive(Clone, Debug)]
struct Level {
    pool: usize,
    conv: Conv2d,
    weight: f64,
}

/// A frozen feature extractor plus per-level weights.
#[derive(Clone, Debug)]
pub struct FeatureDistance {
    pub kind: ExtractorKind,
    pub seed: u64,
    params: ParamSet,
    levels: Vec<Level>,
}

struct LevelCache {
    conv: ConvCache,
    /// tanh activations before normalization.
    act: Tensor,
    norm: Vec<f64>,
    unit: Tensor,
}

pub fn make_extractor(kind: ExtractorKind, seed: u64) -> FeatureDistance {
    make_extractor_with_levels(kind, seed, &DEFAULT_LEVELS)
}

pub fn make_extractor_with_levels(kind: ExtractorKind, seed: u64, pools: &[usize]) -> FeatureDistance {
    let mut params = ParamSet::new();
    let mut levels = Vec::new();
    if kind == ExtractorKind::RandomFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, &pool) in pools.iter().enumerate() {
            let conv = Conv2d::new(&mut params, &format!("level{i}"), 3, FEATURES, 3, 1, false, Init::He, &mut rng);
            levels.push(Level { pool: pool.max(1), conv, weight: 1.0 });
        }
    }
    FeatureDistance { kind, seed, params, levels }
}

impl FeatureDistance {
    fn check(&self, x: &Tensor, y: &Tensor) -> Result<()> {
        if !x.same_shape(y) {
            return invalid(format!("distance needs equal shapes, got {:?} and {:?}", x.shape(), y.shape()));
        }
        if x.channels == 0 || x.data.is_empty() {
            return invalid("distance needs non-empty images");
        }
        if self.kind == ExtractorKind::RandomFeatures && x.channels != 3 {
            return invalid("random feature extractor expects 3-channel images");
        }
        Ok(())
    }

    fn level_forward(&self, level: &Level, x: &Tensor) -> LevelCache {
        let pooled = if level.pool > 1 { x.avg_pool(level.pool) } else { x.clone() };
        let (mut act, conv) = level.conv.forward(&self.params.values, &pooled);
        for v in act.data.iter_mut() {
            *v = v.tanh();
        }
        let n = act.plane_len();
        let mut norm = vec![0.0; n];
        for c in 0..act.channels {
            for (s, v) in norm.iter_mut().zip(act.plane(c)) {
                *s += v * v;
            }
        }
        for s in norm.iter_mut() {
            *s = (*s + NORM_EPS).sqrt();
        }
        let mut unit = act.clone();
        for c in 0..unit.channels {
            for (v, s) in unit.plane_mut(c).iter_mut().zip(&norm) {
                *v /= s;
            }
        }
        LevelCache { conv, act, norm, unit }
    }

    fn level_backward(&self, level: &Level, cache: &LevelCache, d_unit: &Tensor, in_h: usize, in_w: usize) -> Tensor {
        let n = cache.unit.plane_len();
        let mut dots = vec![0.0; n];
        for c in 0..d_unit.channels {
            for ((d, g), u) in dots.iter_mut().zip(d_unit.plane(c)).zip(cache.unit.plane(c)) {
                *d += g * u;
            }
        }
        let mut d_act = d_unit.clone();
        for c in 0..d_act.channels {
            let units = cache.unit.plane(c);
            let acts = cache.act.plane(c);
            for (p, g) in d_act.plane_mut(c).iter_mut().enumerate() {
                let dn = (*g - units[p] * dots[p]) / cache.norm[p];
                *g = dn * (1.0 - acts[p] * acts[p]);
            }
        }
        let dx = level.conv.backward(&self.params.values, &cache.conv, &d_act, None, true).expect("requested");
        if level.pool > 1 {
            Tensor::avg_pool_backward(&dx, level.pool, in_h, in_w)
        } else {
            dx
        }
    }

    pub fn distance(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        self.check(x, y)?;
        match self.kind {
            ExtractorKind::Pixel => {
                Ok(x.data.iter().zip(&y.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.data.len() as f64)
            }
            ExtractorKind::RandomFeatures => {
                let mut total = 0.0;
                for level in &self.levels {
                    let fx = self.level_forward(level, x);
                    let fy = self.level_forward(level, y);
                    let sq: f64 = fx.unit.data.iter().zip(&fy.unit.data).map(|(a, b)| (a - b) * (a - b)).sum();
                    total += level.weight * sq / fx.unit.data.len() as f64;
                }
                Ok(total)
            }
        }
    }

    /// Distance plus its gradients with respect to `x` and `y`.
    pub fn distance_grad(&self, x: &Tensor, y: &Tensor) -> Result<(f64, Tensor, Tensor)> {
        self.check(x, y)?;
        let (c, h, w) = x.shape();
        match self.kind {
            ExtractorKind::Pixel => {
                let n = x.data.len() as f64;
                let mut dx = Tensor::zeros(c, h, w);
                let mut loss = 0.0;
                for ((d, a), b) in dx.data.iter_mut().zip(&x.data).zip(&y.data) {
                    loss += (a - b) * (a - b);
                    *d = 2.0 * (a - b) / n;
                }
                let mut dy = dx.clone();
                dy.scale(-1.0);
                Ok((loss / n, dx, dy))
            }
            ExtractorKind::RandomFeatures => {
                let mut total = 0.0;
                let mut dx = Tensor::zeros(c, h, w);
                let mut dy = Tensor::zeros(c, h, w);
                for level in &self.levels {
                    let fx = self.level_forward(level, x);
                    let fy = self.level_forward(level, y);
                    let n = fx.unit.data.len() as f64;
                    let mut d_unit = fx.unit.clone();
                    let mut sq = 0.0;
                    for (d, b) in d_unit.data.iter_mut().zip(&fy.unit.data) {
                        let diff = *d - b;
                        sq += diff * diff;
                        *d = 2.0 * level.weight * diff / n;
                    }
                    total += level.weight * sq / n;
                    dx.add_assign(&self.level_backward(level, &fx, &d_unit, h, w));
                    d_unit.scale(-1.0);
                    dy.add_assign(&self.level_backward(level, &fy, &d_unit, h, w));
                }
                Ok((total, dx, dy))
            }
        }
    }
}
