//! Generator contract, latent utilities and the procedural toy generator.
//!
//! The toy generator draws a textured sprite (body, head, tail, eye) over a
//! two-tone background in a canonical frame, then warps the whole scene with a
//! pose decoded from the first half of the latent. Because the warp is known,
//! every sample comes with its exact reverse-sampling grid and keypoints.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::keypoints::{Keypoint, KeypointSet};
use crate::tensor::Tensor;
use crate::warp::{
    self, affine_inverse, apply_affine, identity_grid, norm_to_pixel, pixel_to_norm, Mat3, Padding, SampleGrads,
    SamplingGrid, SimilarityParams,
};
use crate::Result;

pub const LATENT_DIM: usize = 32;
/// Latent entries per "layer".
pub const BLOCK: usize = 4;
pub const LAYERS: usize = LATENT_DIM / BLOCK;
/// Layers that drive geometry; the rest drive colour.
pub const POSE_LAYERS: usize = 4;
pub const POSE_DIMS: usize = POSE_LAYERS * BLOCK;
pub const DEFAULT_CUTOFF: usize = POSE_LAYERS;
pub const FACING_DIM: usize = 8;

const MAX_ROTATION: f64 = std::f64::consts::FRAC_PI_4;
const LOG_SCALE_RANGE: f64 = 0.47;
const MAX_SHIFT: f64 = 0.5;
const MAX_ARTICULATION: f64 = 0.1;
const BUMP_SIGMA: f64 = 0.25;
const HEAD: [f64; 2] = [0.4, -0.15];
const TAIL: [f64; 2] = [-0.62, 0.0];
const COLOR_RANGE: f64 = 0.45;

/// The differentiable image generator used for training.
///
/// Implementations must be pure: equal latents give equal images.
pub trait Generator: Sync {
    fn latent_dim(&self) -> usize;
    fn layers(&self) -> usize;
    fn resolution(&self) -> usize;
    fn sample_latent_with(&self, rng: &mut ChaCha8Rng) -> Vec<f64>;
    fn synthesize(&self, latent: &[f64]) -> Result<Tensor>;
    /// Vector-Jacobian product of [`Generator::synthesize`] with respect to the latent.
    fn synthesize_vjp(&self, latent: &[f64], d_image: &Tensor) -> Result<Vec<f64>>;

    fn sample_latent(&self, seed: u64) -> Vec<f64> {
        self.sample_latent_with(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn block(&self) -> usize {
        self.latent_dim() / self.layers()
    }
}

/// A latent whose first `cutoff` layers come from `pose` and the rest from
/// `appearance`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedLatent {
    pub pose: Vec<f64>,
    pub appearance: Vec<f64>,
    pub cutoff: usize,
    pub block: usize,
}

impl MixedLatent {
    pub fn resolve(&self) -> Vec<f64> {
        let split = self.cutoff * self.block;
        let mut out = self.appearance.clone();
        out[..split].copy_from_slice(&self.pose[..split]);
        out
    }
}

pub fn mix(pose: &[f64], appearance: &[f64], cutoff: usize, layers: usize) -> Result<MixedLatent> {
    if pose.len() != appearance.len() || pose.is_empty() || pose.len() % layers != 0 {
        return invalid("mix needs two latents of equal length divisible by the layer count");
    }
    if cutoff > layers {
        return invalid(format!("cutoff {cutoff} exceeds layer count {layers}"));
    }
    Ok(MixedLatent { pose: pose.to_vec(), appearance: appearance.to_vec(), cutoff, block: pose.len() / layers })
}

/// Mean and principal directions of a latent pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentBasis {
    pub mean: Vec<f64>,
    /// Orthonormal rows, ordered by decreasing eigenvalue.
    pub directions: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

impl LatentBasis {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn max_components(&self) -> usize {
        self.directions.len()
    }

    /// Coefficients of `w - mean` on the first `n` directions.
    pub fn project(&self, w: &[f64], n: usize) -> Vec<f64> {
        self.directions[..n]
            .iter()
            .map(|d| d.iter().zip(w).zip(&self.mean).map(|((a, b), m)| a * (b - m)).sum())
            .collect()
    }
}

pub fn fit_pca(pool: &[Vec<f64>]) -> Result<LatentBasis> {
    if pool.len() < 2 {
        return invalid("PCA needs at least two latents");
    }
    let d = pool[0].len();
    if d == 0 || pool.iter().any(|w| w.len() != d) {
        return invalid("PCA pool has inconsistent latent sizes");
    }
    let n = pool.len() as f64;
    let mut mean = vec![0.0; d];
    for w in pool {
        for (m, v) in mean.iter_mut().zip(w) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for w in pool {
        for (c, (v, m)) in centered.iter_mut().zip(w.iter().zip(&mean)) {
            *c = v - m;
        }
        for a in 0..d {
            let ca = centered[a];
            for b in a..d {
                cov[(a, b)] += ca * centered[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / (n - 1.0);
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut directions = Vec::with_capacity(d);
    let mut eigenvalues = Vec::with_capacity(d);
    for &k in &order {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let lead = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() + 1e-12 { x } else { acc });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        for x in v.iter_mut() {
            *x *= sign / norm;
        }
        directions.push(v);
        eigenvalues.push(eig.eigenvalues[k].max(0.0));
    }
    Ok(LatentBasis { mean, directions, eigenvalues })
}

/// Learned target `c = mean + sum_i alpha_i d_i`; `N` is the coefficient count.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TargetLatent {
    pub coefficients: Vec<f64>,
}

impl TargetLatent {
    pub fn zeros(n: usize) -> Self {
        Self { coefficients: vec![0.0; n] }
    }

    pub fn n(&self) -> usize {
        self.coefficients.len()
    }

    pub fn materialize(&self, basis: &LatentBasis) -> Result<Vec<f64>> {
        if self.n() > basis.max_components() {
            return invalid(format!("target uses {} directions, basis has {}", self.n(), basis.max_components()));
        }
        let mut c = basis.mean.clone();
        for (a, d) in self.coefficients.iter().zip(&basis.directions) {
            for (ci, di) in c.iter_mut().zip(d) {
                *ci += a * di;
            }
        }
        Ok(c)
    }

    /// Chain a latent-space gradient back to the coefficients.
    pub fn coefficient_grad(&self, basis: &LatentBasis, d_latent: &[f64]) -> Vec<f64> {
        basis.directions[..self.n()].iter().map(|d| d.iter().zip(d_latent).map(|(a, b)| a * b).sum()).collect()
    }
}

/// Latent distribution of the toy generator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatentPrior {
    #[default]
    StandardNormal,
    /// Standard normal except entry `dim`, which is drawn from a mixture of
    /// narrow Gaussians.
    Groups { dim: usize, centers: Vec<f64>, weights: Vec<f64>, spread: f64 },
}

impl LatentPrior {
    pub fn sample(&self, rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        let mut w: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let LatentPrior::Groups { dim: k, .. } = self {
            w[*k] = self.sample_group(rng).1;
        }
        w
    }

    /// Draw (group index, value) for the grouped entry.
    pub fn sample_group(&self, rng: &mut ChaCha8Rng) -> (usize, f64) {
        match self {
            LatentPrior::StandardNormal => (0, rng.sample(StandardNormal)),
            LatentPrior::Groups { centers, weights, spread, .. } => {
                let total: f64 = weights.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                let mut g = centers.len() - 1;
                for (i, wt) in weights.iter().enumerate() {
                    if u < *wt {
                        g = i;
                        break;
                    }
                    u -= wt;
                }
                let z: f64 = rng.sample(StandardNormal);
                (g, centers[g] + spread * z)
            }
        }
    }

    /// Group label of a latent: nearest center on the grouped entry.
    pub fn group_of(&self, w: &[f64]) -> usize {
        match self {
            LatentPrior::StandardNormal => 0,
            LatentPrior::Groups { dim, centers, .. } => {
                let mut best = 0;
                for (i, c) in centers.iter().enumerate() {
                    if (w[*dim] - c).abs() < (w[*dim] - centers[best]).abs() {
                        best = i;
                    }
                }
                best
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub resolution: usize,
    /// Multiplies pose latents before the bounded decoders.
    pub pose_gain: f64,
    /// Enables the mirror/facing entry of the pose block.
    pub facing: bool,
    pub facing_gain: f64,
    pub prior: LatentPrior,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { resolution: 64, pose_gain: 0.6, facing: false, facing_gain: 2.0, prior: LatentPrior::StandardNormal }
    }
}

/// Decoded geometry of a toy sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyPose {
    pub sim: SimilarityParams,
    pub articulation: [f64; 4],
    /// Horizontal mirror factor in (-1, 1]; 1 when facing is disabled.
    pub facing: f64,
}

#[derive(Clone, Debug)]
struct Appearance {
    colors: [[f64; 3]; 5],
    stripe: f64,
}

const BASE_COLORS: [[f64; 3]; 5] = [
    [0.1, 0.3, 0.55],   // background top
    [-0.35, 0.1, -0.2], // background bottom
    [0.8, 0.3, -0.4],   // body
    [0.55, 0.6, -0.1],  // head
    [0.2, -0.5, -0.6],  // tail
];
const EYE_COLOR: f64 = -0.9;
const BASE_STRIPE: f64 = 0.3;
const STRIPE_RANGE: f64 = 0.25;
const APPEARANCE_DIMS: usize = 16;

/// Canonical keypoints in normalized scene coordinates.
pub const CANONICAL_KEYPOINTS: [[f64; 2]; 10] = [
    [0.47, -0.2],  // eye
    [0.42, -0.31], // head top
    [0.56, -0.1],  // snout
    [0.0, -0.22],  // back
    [0.0, 0.22],   // belly
    [-0.2, 0.0],   // flank
    [-0.76, -0.2], // upper tail tip
    [-0.76, 0.2],  // lower tail tip
    [-0.45, 0.0],  // tail base
    [0.28, 0.16],  // chest
];

/// Procedural sprite generator with exact ground truth.
#[derive(Clone, Debug)]
pub struct ToyGenerator {
    pub config: ToyConfig,
    /// Per-pixel coefficient of each of the five colours in the scene.
    color_weights: Vec<Vec<f64>>,
    stripe_weights: Vec<f64>,
    eye_weights: Vec<f64>,
    alpha: Vec<f64>,
}

fn smooth_mask(sd: f64, width: f64) -> f64 {
    let t = (0.5 - sd / width).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn triangle_sd(p: [f64; 2], v: [[f64; 2]; 3]) -> f64 {
    // Vertices in counter-clockwise order (y down): max of edge distances.
    let mut sd = f64::NEG_INFINITY;
    for k in 0..3 {
        let a = v[k];
        let b = v[(k + 1) % 3];
        let e = [b[0] - a[0], b[1] - a[1]];
        let len = (e[0] * e[0] + e[1] * e[1]).sqrt();
        let n = [e[1] / len, -e[0] / len];
        sd = sd.max((p[0] - a[0]) * n[0] + (p[1] - a[1]) * n[1]);
    }
    sd
}

impl ToyGenerator {
    pub fn new(config: ToyConfig) -> Result<Self> {
        let r = config.resolution;
        if r < 8 {
            return invalid("toy generator resolution must be at least 8");
        }
        if !(config.pose_gain.is_finite() && config.facing_gain.is_finite()) {
            return invalid("toy generator gains must be finite");
        }
        let edge = 1.5 * 2.0 / (r - 1) as f64;
        let n = r * r;
        let mut color_weights = vec![vec![0.0; n]; 5];
        let mut stripe_weights = vec![0.0; n];
        let mut eye_weights = vec![0.0; n];
        let mut alpha = vec![0.0; n];
        // Triangle listed so that every edge normal points outward.
        let tail = [[-0.40, 0.0], [-0.80, 0.26], [-0.80, -0.26]];
        for i in 0..r {
            let y = pixel_to_norm(i as f64, r);
            for j in 0..r {
                let x = pixel_to_norm(j as f64, r);
                let k = i * r + j;
                let v = ((y + 1.0) / 2.0).clamp(0.0, 1.0);
                let m_tail = smooth_mask(triangle_sd([x, y], tail), edge);
                let m_body = smooth_mask(((x / 0.45).powi(2) + (y / 0.25).powi(2)).sqrt().mul_add(0.25, -0.25), edge);
                let dh = ((x - HEAD[0]).powi(2) + (y - HEAD[1]).powi(2)).sqrt();
                let m_head = smooth_mask(dh - 0.18, edge);
                let de = ((x - 0.47).powi(2) + (y + 0.2).powi(2)).sqrt();
                let m_eye = smooth_mask(de - 0.045, edge);
                // Painter's order: background, tail, body, head, eye.
                let mut keep = (1.0 - m_tail) * (1.0 - m_body) * (1.0 - m_head) * (1.0 - m_eye);
                color_weights[0][k] = (1.0 - v) * keep;
                color_weights[1][k] = v * keep;
                keep = m_tail * (1.0 - m_body) * (1.0 - m_head) * (1.0 - m_eye);
                color_weights[4][k] = keep;
                let body = m_body * (1.0 - m_head) * (1.0 - m_eye);
                color_weights[2][k] = body;
                stripe_weights[k] = body * 0.5 * (14.0 * x).sin();
                color_weights[3][k] = m_head * (1.0 - m_eye);
                eye_weights[k] = m_eye;
                alpha[k] = 1.0 - (1.0 - m_tail) * (1.0 - m_body) * (1.0 - m_head) * (1.0 - m_eye);
            }
        }
        Ok(Self { config, color_weights, stripe_weights, eye_weights, alpha })
    }

    pub fn default_toy() -> Self {
        Self::new(ToyConfig::default()).expect("default toy config is valid")
    }

    fn check_latent(&self, latent: &[f64]) -> Result<()> {
        if latent.len() != LATENT_DIM {
            return invalid(format!("toy latent must have {LATENT_DIM} entries, got {}", latent.len()));
        }
        if latent.iter().any(|v| !v.is_finite()) {
            return invalid("latent has non-finite entries");
        }
        Ok(())
    }

    pub fn decode_pose(&self, latent: &[f64]) -> Result<ToyPose> {
        self.check_latent(latent)?;
        let g = self.config.pose_gain;
        let r = MAX_ROTATION * (g * latent[0]).tanh();
        let s = (LOG_SCALE_RANGE * (g * latent[1]).tanh()).exp();
        let tx = MAX_SHIFT * (g * latent[2]).tanh();
        let ty = MAX_SHIFT * (g * latent[3]).tanh();
        let mut articulation = [0.0; 4];
        for (k, a) in articulation.iter_mut().enumerate() {
            *a = MAX_ARTICULATION * (g * latent[4 + k]).tanh();
        }
        let facing = if self.config.facing { (self.config.facing_gain * latent[FACING_DIM]).tanh() } else { 1.0 };
        Ok(ToyPose { sim: SimilarityParams::from_parts(r, s, tx, ty), articulation, facing })
    }

    fn decode_appearance(&self, latent: &[f64]) -> Appearance {
        let a = &latent[POSE_DIMS..];
        let mut colors = BASE_COLORS;
        for (m, col) in colors.iter_mut().enumerate() {
            for (c, v) in col.iter_mut().enumerate() {
                *v += COLOR_RANGE * a[m * 3 + c].tanh();
            }
        }
        Appearance { colors, stripe: BASE_STRIPE + STRIPE_RANGE * a[15].tanh() }
    }

    /// The canonical scene for a given latent's appearance half.
    pub fn canonical_scene(&self, latent: &[f64]) -> Result<Tensor> {
        self.check_latent(latent)?;
        let app = self.decode_appearance(latent);
        let r = self.config.resolution;
        let mut scene = Tensor::zeros(3, r, r);
        for c in 0..3 {
            let plane = scene.plane_mut(c);
            for (k, p) in plane.iter_mut().enumerate() {
                let mut v = EYE_COLOR * self.eye_weights[k] + app.stripe * self.stripe_weights[k];
                for m in 0..5 {
                    v += self.color_weights[m][k] * app.colors[m][c];
                }
                *p = v;
            }
        }
        Ok(scene)
    }

    /// Sprite coverage of the canonical scene.
    pub fn canonical_alpha(&self) -> Tensor {
        let r = self.config.resolution;
        Tensor { channels: 1, height: r, width: r, data: self.alpha.clone() }
    }

    fn articulation_field(pose: &ToyPose, p: [f64; 2]) -> ([f64; 2], [[f64; 2]; 2]) {
        let mut a = [0.0; 2];
        let mut jac = [[0.0; 2]; 2];
        for (k, center) in [HEAD, HEAD, TAIL, TAIL].iter().enumerate() {
            let d = [p[0] - center[0], p[1] - center[1]];
            let gk = (-(d[0] * d[0] + d[1] * d[1]) / (2.0 * BUMP_SIGMA * BUMP_SIGMA)).exp();
            let axis = if k % 2 == 0 { 1 } else { 0 };
            let beta = pose.articulation[k];
            a[axis] += beta * gk;
            let s2 = BUMP_SIGMA * BUMP_SIGMA;
            jac[axis][0] += -beta * gk * d[0] / s2;
            jac[axis][1] += -beta * gk * d[1] / s2;
        }
        (a, jac)
    }

    fn bump(k: usize, p: [f64; 2]) -> [f64; 2] {
        let center = if k < 2 { HEAD } else { TAIL };
        let d = [p[0] - center[0], p[1] - center[1]];
        let g = (-(d[0] * d[0] + d[1] * d[1]) / (2.0 * BUMP_SIGMA * BUMP_SIGMA)).exp();
        if k % 2 == 0 {
            [0.0, g]
        } else {
            [g, 0.0]
        }
    }

    fn map_point(pose: &ToyPose, q: [f64; 2]) -> [f64; 2] {
        let p1 = apply_affine(&pose.sim.matrix, q);
        let p2 = [pose.facing * p1[0], p1[1]];
        let (a, _) = Self::articulation_field(pose, p2);
        [p2[0] + a[0], p2[1] + a[1]]
    }

    /// The exact reverse-sampling grid used to render `latent`.
    pub fn ground_truth_grid(&self, latent: &[f64]) -> Result<SamplingGrid> {
        let pose = self.decode_pose(latent)?;
        Ok(self.grid_for_pose(&pose))
    }

    pub fn grid_for_pose(&self, pose: &ToyPose) -> SamplingGrid {
        let r = self.config.resolution;
        let mut grid = identity_grid(r, r).expect("resolution checked at construction");
        for c in grid.coords.chunks_exact_mut(2) {
            let p = Self::map_point(pose, [c[0], c[1]]);
            c[0] = p[0];
            c[1] = p[1];
        }
        grid
    }

    /// Where a canonical scene point appears in a rendered image, in
    /// normalized coordinates. `None` when the pose is degenerate.
    pub fn locate(pose: &ToyPose, scene_point: [f64; 2]) -> Option<[f64; 2]> {
        if pose.facing.abs() < 1e-6 {
            return None;
        }
        let mut p2 = scene_point;
        for _ in 0..60 {
            let (a, _) = Self::articulation_field(pose, p2);
            let next = [scene_point[0] - a[0], scene_point[1] - a[1]];
            let moved = (next[0] - p2[0]).abs() + (next[1] - p2[1]).abs();
            p2 = next;
            if moved < 1e-13 {
                break;
            }
        }
        let p1 = [p2[0] / pose.facing, p2[1]];
        let inv: Mat3 = affine_inverse(&pose.sim.matrix)?;
        Some(apply_affine(&inv, p1))
    }

    /// Ground-truth keypoints of a sample in pixel coordinates. Points that
    /// land outside the frame are flagged not visible.
    pub fn keypoints(&self, latent: &[f64]) -> Result<KeypointSet> {
        let pose = self.decode_pose(latent)?;
        Ok(self.keypoints_for_pose(&pose))
    }

    pub fn keypoints_for_pose(&self, pose: &ToyPose) -> KeypointSet {
        let r = self.config.resolution;
        let points = CANONICAL_KEYPOINTS
            .iter()
            .map(|&kp| match Self::locate(pose, kp) {
                Some(q) => Keypoint {
                    x: norm_to_pixel(q[0], r),
                    y: norm_to_pixel(q[1], r),
                    visible: q[0].abs() <= 1.0 && q[1].abs() <= 1.0,
                },
                None => Keypoint { x: 0.0, y: 0.0, visible: false },
            })
            .collect();
        KeypointSet::new(points)
    }

    /// Sprite coverage after warping (geometry only; ignores appearance).
    pub fn silhouette(&self, latent: &[f64]) -> Result<Tensor> {
        let grid = self.ground_truth_grid(latent)?;
        warp::sample(&self.canonical_alpha(), &grid, Padding::Border)
    }

    fn pose_backward(&self, latent: &[f64], pose: &ToyPose, d_grid: &[f64], out: &mut [f64]) {
        let m = &pose.sim.matrix;
        let mut d_m = [[0.0; 3]; 2];
        let mut d_beta = [0.0; 4];
        let mut d_f = 0.0;
        let r = self.config.resolution;
        let id = identity_grid(r, r).expect("resolution checked at construction");
        for (k, q) in id.coords.chunks_exact(2).enumerate() {
            let g = [d_grid[2 * k], d_grid[2 * k + 1]];
            if g[0] == 0.0 && g[1] == 0.0 {
                continue;
            }
            let p1 = apply_affine(m, [q[0], q[1]]);
            let p2 = [pose.facing * p1[0], p1[1]];
            let (_, jac) = Self::articulation_field(pose, p2);
            for (b, db) in d_beta.iter_mut().enumerate() {
                let phi = Self::bump(b, p2);
                *db += g[0] * phi[0] + g[1] * phi[1];
            }
            let d_p2 = [g[0] + jac[0][0] * g[0] + jac[1][0] * g[1], g[1] + jac[0][1] * g[0] + jac[1][1] * g[1]];
            d_f += d_p2[0] * p1[0];
            let d_p1 = [pose.facing * d_p2[0], d_p2[1]];
            for a in 0..2 {
                d_m[a][0] += d_p1[a] * q[0];
                d_m[a][1] += d_p1[a] * q[1];
                d_m[a][2] += d_p1[a];
            }
        }
        let (rot, s) = (pose.sim.rotation, pose.sim.scale);
        let (c, sn) = (rot.cos(), rot.sin());
        let d_r = d_m[0][0] * (-s * sn) + d_m[0][1] * (-s * c) + d_m[1][0] * (s * c) + d_m[1][1] * (-s * sn);
        let d_s = d_m[0][0] * c - d_m[0][1] * sn + d_m[1][0] * sn + d_m[1][1] * c;
        let g = self.config.pose_gain;
        let dtanh = |u: f64| 1.0 - u.tanh().powi(2);
        out[0] += d_r * MAX_ROTATION * g * dtanh(g * latent[0]);
        out[1] += d_s * s * LOG_SCALE_RANGE * g * dtanh(g * latent[1]);
        out[2] += d_m[0][2] * MAX_SHIFT * g * dtanh(g * latent[2]);
        out[3] += d_m[1][2] * MAX_SHIFT * g * dtanh(g * latent[3]);
        for k in 0..4 {
            out[4 + k] += d_beta[k] * MAX_ARTICULATION * g * dtanh(g * latent[4 + k]);
        }
        if self.config.facing {
            let fg = self.config.facing_gain;
            out[FACING_DIM] += d_f * fg * dtanh(fg * latent[FACING_DIM]);
        }
    }

    fn appearance_backward(&self, latent: &[f64], d_scene: &Tensor, out: &mut [f64]) {
        let a = &latent[POSE_DIMS..];
        for c in 0..3 {
            let plane = d_scene.plane(c);
            for m in 0..5 {
                let dot: f64 = plane.iter().zip(&self.color_weights[m]).map(|(x, y)| x * y).sum();
                out[POSE_DIMS + m * 3 + c] += dot * COLOR_RANGE * (1.0 - a[m * 3 + c].tanh().powi(2));
            }
            let dot: f64 = plane.iter().zip(&self.stripe_weights).map(|(x, y)| x * y).sum();
            out[POSE_DIMS + 15] += dot * STRIPE_RANGE * (1.0 - a[15].tanh().powi(2));
        }
    }
}

impl Generator for ToyGenerator {
    fn latent_dim(&self) -> usize {
        LATENT_DIM
    }

    fn layers(&self) -> usize {
        LAYERS
    }

    fn resolution(&self) -> usize {
        self.config.resolution
    }

    fn sample_latent_with(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.config.prior.sample(rng, LATENT_DIM)
    }

    fn synthesize(&self, latent: &[f64]) -> Result<Tensor> {
        let scene = self.canonical_scene(latent)?;
        let grid = self.ground_truth_grid(latent)?;
        warp::sample(&scene, &grid, Padding::Border)
    }

    fn synthesize_vjp(&self, latent: &[f64], d_image: &Tensor) -> Result<Vec<f64>> {
        let scene = self.canonical_scene(latent)?;
        let pose = self.decode_pose(latent)?;
        let grid = self.grid_for_pose(&pose);
        let r = self.config.resolution;
        if d_image.shape() != (3, r, r) {
            return invalid("image gradient has the wrong shape");
        }
        let (d_scene, d_grid) =
            warp::sample_backward(&scene, &grid, Padding::Border, d_image, SampleGrads { image: true, grid: true });
        let mut out = vec![0.0; LATENT_DIM];
        self.pose_backward(latent, &pose, &d_grid.expect("requested"), &mut out);
        self.appearance_backward(latent, &d_scene.expect("requested"), &mut out);
        Ok(out)
    }
}

const _: () = assert!(POSE_DIMS + APPEARANCE_DIMS == LATENT_DIM);
