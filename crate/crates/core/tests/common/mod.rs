#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Mutex;

use gangealing::config::TrainConfig;
use gangealing::tensor::Tensor;
use gangealing::trainer::{train, Model, TrainOutputs};
use gangealing::warp::{pixel_to_norm, FlowField, SamplingGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Low-frequency test pattern, so interpolation error stays small.
pub fn smooth_image(h: usize, w: usize) -> Tensor {
    let mut t = Tensor::zeros(3, h, w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
                let i = t.idx(c, y, x);
                t.data[i] = (2.0 * u + 1.3 * v + c as f64).sin() * 0.8;
            }
        }
    }
    t
}

pub fn random_flow(seed: u64, h: usize, w: usize, scale: f64) -> FlowField {
    let mut r = rng(seed);
    FlowField::from_vec(h, w, (0..2 * h * w).map(|_| r.gen_range(-scale..scale)).collect()).unwrap()
}

/// Scalar bilinear lookup of an in-range normalized point, written out
/// independently of the library.
pub fn bilinear_oracle(img: &Tensor, c: usize, x: f64, y: f64) -> f64 {
    let px = (x + 1.0) / 2.0 * (img.width - 1) as f64;
    let py = (y + 1.0) / 2.0 * (img.height - 1) as f64;
    let (x0, y0) = (px.floor() as usize, py.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (fx, fy) = (px - x0 as f64, py - y0 as f64);
    let top = img.at(c, y0, x0) * (1.0 - fx) + img.at(c, y0, x1) * fx;
    let bottom = img.at(c, y1, x0) * (1.0 - fx) + img.at(c, y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Exhaustive nearest-neighbour inversion with the row-major tie rule.
pub fn nn_inverse_oracle(grid: &SamplingGrid) -> SamplingGrid {
    let (h, w) = (grid.height, grid.width);
    let mut coords = Vec::with_capacity(2 * h * w);
    for i in 0..h {
        for j in 0..w {
            let (tx, ty) = (pixel_to_norm(j as f64, w), pixel_to_norm(i as f64, h));
            let mut best = (0, 0, f64::INFINITY);
            for a in 0..h {
                for b in 0..w {
                    let g = grid.get(a, b);
                    let d = (g[0] - tx).powi(2) + (g[1] - ty).powi(2);
                    if d < best.2 {
                        best = (a, b, d);
                    }
                }
            }
            coords.push(pixel_to_norm(best.1 as f64, w));
            coords.push(pixel_to_norm(best.0 as f64, h));
        }
    }
    SamplingGrid::from_coords(h, w, coords).unwrap()
}

/// 3x3 box average of a coarse flow with replicated borders, repeated over
/// each 8x8 fine block.
pub fn box_average_oracle(coarse: &FlowField) -> Vec<f64> {
    let (h, w) = (coarse.height, coarse.width);
    let mut out = vec![0.0; 2 * 64 * h * w];
    for y in 0..8 * h {
        for x in 0..8 * w {
            let (i, j) = (y / 8, x / 8);
            for c in 0..2 {
                let mut s = 0.0;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let ii = (i as i64 + di).clamp(0, h as i64 - 1) as usize;
                        let jj = (j as i64 + dj).clamp(0, w as i64 - 1) as usize;
                        s += coarse.get(ii, jj)[c];
                    }
                }
                out[2 * (y * 8 * w + x) + c] = s / 9.0;
            }
        }
    }
    out
}

pub fn huber_oracle(x: &[f64], delta: f64) -> f64 {
    let mut s = 0.0;
    for &t in x {
        s += if t.abs() <= delta { 0.5 * t * t } else { delta * (t.abs() - 0.5 * delta) };
    }
    s / x.len() as f64
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

static TRAIN_LOCK: Mutex<()> = Mutex::new(());

fn fnv(text: &str) -> u64 {
    text.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

/// Cache directory of a training run.
pub fn model_dir(name: &str, cfg_text: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("model-{name}-{:016x}", fnv(cfg_text)))
}

/// Train (or reload) a toy model for a config text. Checkpoints are cached
/// under the cargo target tmpdir so test binaries share one training run.
pub fn trained(name: &str, cfg_text: &str) -> Model {
    let _guard = TRAIN_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let dir = model_dir(name, cfg_text);
    let final_dir = dir.join("final");
    if let Ok(m) = gangealing::checkpoint::load(&final_dir) {
        return m;
    }
    let cfg = TrainConfig::from_kv_text(cfg_text).unwrap();
    let start = std::time::Instant::now();
    let model = train(cfg, TrainOutputs::to_dir(&dir)).unwrap();
    eprintln!("trained {name} in {:.0}s", start.elapsed().as_secs_f64());
    // Reload so callers see exactly what the checkpoint stores.
    gangealing::checkpoint::load(&final_dir).unwrap_or(model)
}

pub const BASE_CONFIG: &str = "total_steps = 6000\nanneal_steps = 2000\npca_pool = 5000\n";

pub fn base_model() -> Model {
    trained("base", BASE_CONFIG)
}

/// Base schedule with every extra line of `extra` appended.
pub fn with_base(extra: &str) -> String {
    format!("{BASE_CONFIG}{extra}")
}

/// Two mirrored pose groups on the facing entry.
pub const CLUSTER_CONFIG: &str = "total_steps = 2000\nanneal_steps = 666\npca_pool = 5000\nfacing = true\nprior = groups\nprior_dim = 8\nprior_centers = 2, -2\nprior_weights = 0.5, 0.5\nprior_spread = 0.25\nclusters = 2\nkmeans_pool = 500\nclassifier_samples = 3000\n";

/// Base schedule without target annealing.
pub const NOANNEAL_CONFIG: &str = "total_steps = 6000\nanneal_steps = 2000\nanneal = false\npca_pool = 5000\n";

/// Pose groups 70/30 on opposite facings: the mean latent renders a pose
/// that no warp of the minority group reaches. One learned component.
pub const LEARNED_CONFIG: &str = "total_steps = 2000\nanneal_steps = 666\npca_pool = 5000\nfacing = true\nprior = groups\nprior_dim = 8\nprior_centers = 1.5, -3.5\nprior_weights = 0.7, 0.3\nprior_spread = 0.25\nn_components = 1\n";

/// Same pool with the target frozen at the mean latent.
pub const FROZEN_CONFIG: &str = "total_steps = 2000\nanneal_steps = 666\npca_pool = 5000\nfacing = true\nprior = groups\nprior_dim = 8\nprior_centers = 1.5, -3.5\nprior_weights = 0.7, 0.3\nprior_spread = 0.25\nn_components = 0\n";

/// Random keypoint fixture: `n` points in a `size` square, each visible with
/// probability 0.8, plus a noisy prediction of it.
pub fn pck_fixture(seed: u64, n: usize, size: f64) -> (gangealing::keypoints::KeypointSet, gangealing::keypoints::KeypointSet) {
    use gangealing::keypoints::{Keypoint, KeypointSet};
    let mut r = rng(seed);
    let gt: Vec<Keypoint> = (0..n)
        .map(|_| Keypoint { x: r.gen_range(0.0..size), y: r.gen_range(0.0..size), visible: r.gen_bool(0.8) })
        .collect();
    let pred: Vec<Keypoint> = gt
        .iter()
        .map(|g| Keypoint {
            x: g.x + r.gen_range(-0.2 * size..0.2 * size),
            y: g.y + r.gen_range(-0.2 * size..0.2 * size),
            visible: r.gen_bool(0.9),
        })
        .collect();
    (KeypointSet::new(pred), KeypointSet::new(gt))
}

/// Per-point PCK loop over mutually visible points.
pub fn pck_oracle(
    pred: &gangealing::keypoints::KeypointSet,
    gt: &gangealing::keypoints::KeypointSet,
    h: f64,
    w: f64,
    alpha: f64,
) -> Option<f64> {
    let radius = alpha * if h > w { h } else { w };
    let mut scored = 0usize;
    let mut hits = 0usize;
    for i in 0..gt.points.len() {
        let (p, g) = (pred.points[i], gt.points[i]);
        if p.visible && g.visible {
            scored += 1;
            let d = ((p.x - g.x) * (p.x - g.x) + (p.y - g.y) * (p.y - g.y)).sqrt();
            if d <= radius {
                hits += 1;
            }
        }
    }
    if scored == 0 {
        None
    } else {
        Some(hits as f64 / scored as f64)
    }
}
