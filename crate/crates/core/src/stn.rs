//! Learnable spatial transformer: a similarity head followed by a dense flow
//! head with convex upsampling, with one set of output heads per cluster.
//!
//! Every output layer starts at zero, so a fresh network is the identity warp.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::nn::{self, Conv2d, ConvCache, Init, Linear, ParamSet, LEAKY_SLOPE};
use crate::tensor::Tensor;
use crate::warp::{
    self, compose, compose_backward, convex_upsample, convex_upsample_backward, grid_from_matrix,
    grid_from_matrix_backward, mat3_mul, similarity_from_raw, similarity_from_raw_backward, FlowField,
    Mat3, Padding, SampleGrads, SamplingGrid, SimilarityParams, IDENTITY3, UPSAMPLE_FACTOR,
};
use crate::Result;

/// Backbone downsampling relative to the input image.
const BACKBONE_STRIDE: usize = 8;
const INPUT_POOL: usize = 2;
const MASK_CHANNELS: usize = 9 * UPSAMPLE_FACTOR * UPSAMPLE_FACTOR;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StnConfig {
    pub resolution: usize,
    pub clusters: usize,
    pub padding: Padding,
    pub use_flow: bool,
    /// Channel widths of the two backbone stages.
    pub widths: [usize; 2],
    /// Width of the hidden layers in the heads.
    pub hidden: usize,
    pub seed: u64,
}

impl Default for StnConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            clusters: 1,
            padding: Padding::Reflection,
            use_flow: true,
            widths: [16, 32],
            hidden: 32,
            seed: 0,
        }
    }
}

/// Small residual feature extractor without normalization layers.
#[derive(Clone, Debug)]
pub struct Backbone {
    stem: Conv2d,
    a1: Conv2d,
    a2: Conv2d,
    skip: Conv2d,
    tail: Conv2d,
    pub out_channels: usize,
}

#[derive(Clone, Debug)]
pub struct BackboneCache {
    in_hw: (usize, usize),
    stem: ConvCache,
    s: Tensor,
    a1: ConvCache,
    h1: Tensor,
    a2: ConvCache,
    h2: Tensor,
    skip: ConvCache,
    tail: ConvCache,
    out: Tensor,
}

fn lrelu_vec(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x *= LEAKY_SLOPE;
        }
    }
}

fn lrelu_vec_backward(out: &[f64], d: &mut [f64]) {
    for (g, o) in d.iter_mut().zip(out) {
        if *o < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

impl Backbone {
    fn new(params: &mut ParamSet, prefix: &str, widths: [usize; 2], rng: &mut ChaCha8Rng) -> Self {
        let [c1, c2] = widths;
        Self {
            stem: Conv2d::new(params, &format!("{prefix}.stem"), 3, c1, 3, 2, true, Init::He, rng),
            a1: Conv2d::new(params, &format!("{prefix}.res.conv1"), c1, c1, 3, 1, true, Init::He, rng),
            a2: Conv2d::new(params, &format!("{prefix}.res.conv2"), c1, c2, 3, 2, true, Init::He, rng),
            skip: Conv2d::new(params, &format!("{prefix}.res.skip"), c1, c2, 1, 1, false, Init::He, rng),
            tail: Conv2d::new(params, &format!("{prefix}.tail"), c2, c2, 3, 1, true, Init::He, rng),
            out_channels: c2,
        }
    }

    pub fn forward(&self, p: &[f64], x: &Tensor) -> (Tensor, BackboneCache) {
        let x0 = x.avg_pool(INPUT_POOL);
        let (mut s, stem) = self.stem.forward(p, &x0);
        nn::leaky_relu(&mut s);
        let (mut h1, a1) = self.a1.forward(p, &s);
        nn::leaky_relu(&mut h1);
        let (mut h2, a2) = self.a2.forward(p, &h1);
        nn::leaky_relu(&mut h2);
        let (sk, skip) = self.skip.forward(p, &s.avg_pool2());
        let mut r = h2.clone();
        r.add_assign(&sk);
        r.scale(std::f64::consts::FRAC_1_SQRT_2);
        let (mut out, tail) = self.tail.forward(p, &r);
        nn::leaky_relu(&mut out);
        let cache = BackboneCache { in_hw: (x.height, x.width), stem, s, a1, h1, a2, h2, skip, tail, out: out.clone() };
        (out, cache)
    }

    /// Backpropagate; returns the gradient for the raw input when requested.
    pub fn backward(
        &self,
        p: &[f64],
        c: &BackboneCache,
        d_out: &Tensor,
        mut grads: Option<&mut [f64]>,
        need_input: bool,
    ) -> Option<Tensor> {
        let mut d = d_out.clone();
        nn::leaky_relu_backward(&c.out, &mut d);
        let mut d_r = self.tail.backward(p, &c.tail, &d, grads.as_deref_mut(), true).expect("requested");
        d_r.scale(std::f64::consts::FRAC_1_SQRT_2);
        let d_pool = self.skip.backward(p, &c.skip, &d_r, grads.as_deref_mut(), true).expect("requested");
        let mut d_s = Tensor::avg_pool2_backward(&d_pool, c.s.height, c.s.width);
        let mut d_h2 = d_r;
        nn::leaky_relu_backward(&c.h2, &mut d_h2);
        let mut d_h1 = self.a2.backward(p, &c.a2, &d_h2, grads.as_deref_mut(), true).expect("requested");
        nn::leaky_relu_backward(&c.h1, &mut d_h1);
        d_s.add_assign(&self.a1.backward(p, &c.a1, &d_h1, grads.as_deref_mut(), true).expect("requested"));
        nn::leaky_relu_backward(&c.s, &mut d_s);
        let d_x0 = self.stem.backward(p, &c.stem, &d_s, grads, need_input)?;
        Some(Tensor::avg_pool_backward(&d_x0, INPUT_POOL, c.in_hw.0, c.in_hw.1))
    }

    fn copy_into(&self, from: &ParamSet, to: &mut ParamSet, other: &Backbone) {
        for (a, b) in [
            (&self.stem, &other.stem),
            (&self.a1, &other.a1),
            (&self.a2, &other.a2),
            (&self.skip, &other.skip),
            (&self.tail, &other.tail),
        ] {
            copy_conv(a, from, b, to);
        }
    }
}

fn copy_conv(a: &Conv2d, from: &ParamSet, b: &Conv2d, to: &mut ParamSet) {
    let n = a.cout * a.cin * a.kernel * a.kernel;
    to.values[b.w_off..b.w_off + n].copy_from_slice(&from.values[a.w_off..a.w_off + n]);
    if let (Some(x), Some(y)) = (a.b_off, b.b_off) {
        to.values[y..y + a.cout].copy_from_slice(&from.values[x..x + a.cout]);
    }
}

fn copy_linear(a: &Linear, from: &ParamSet, b: &Linear, to: &mut ParamSet) {
    let n = a.inputs * a.outputs;
    to.values[b.w_off..b.w_off + n].copy_from_slice(&from.values[a.w_off..a.w_off + n]);
    to.values[b.b_off..b.b_off + a.outputs].copy_from_slice(&from.values[a.b_off..a.b_off + a.outputs]);
}

#[derive(Clone, Debug)]
struct FlowHeads {
    backbone: Backbone,
    flow1: Conv2d,
    flow_out: Vec<Conv2d>,
    mask1: Conv2d,
    mask_out: Vec<Conv2d>,
}

/// Output of a full forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpResult {
    pub warped: Tensor,
    pub grid: SamplingGrid,
    pub sim: SimilarityParams,
    /// Dense flow over the similarity-warped frame (zero without a flow head).
    pub flow: FlowField,
    pub cluster: usize,
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    cluster: usize,
    sim_bb: BackboneCache,
    sim_flat: Vec<f64>,
    sim_hidden: Vec<f64>,
    raw: [f64; 4],
    sim_grid: SamplingGrid,
    flow: Option<FlowCache>,
    final_grid: SamplingGrid,
}

#[derive(Clone, Debug)]
struct FlowCache {
    bb: BackboneCache,
    f1: ConvCache,
    f1_out: Tensor,
    fo: ConvCache,
    m1: ConvCache,
    m1_out: Tensor,
    mo: ConvCache,
    coarse: FlowField,
    logits: Tensor,
    flow_grid: SamplingGrid,
}

/// The warp network `T = T_flow o T_sim` with `K` output heads.
#[derive(Clone, Debug)]
pub struct WarpNetwork {
    pub config: StnConfig,
    pub params: ParamSet,
    sim_backbone: Backbone,
    sim_fc: Linear,
    sim_out: Vec<Linear>,
    flow: Option<FlowHeads>,
}

fn coarse_to_field(t: &Tensor) -> FlowField {
    let n = t.plane_len();
    let mut d = vec![0.0; 2 * n];
    for k in 0..n {
        d[2 * k] = t.data[k];
        d[2 * k + 1] = t.data[n + k];
    }
    FlowField { height: t.height, width: t.width, displacement: d }
}

fn field_grad_to_tensor(d: &[f64], h: usize, w: usize) -> Tensor {
    let n = h * w;
    let mut t = Tensor::zeros(2, h, w);
    for k in 0..n {
        t.data[k] = d[2 * k];
        t.data[n + k] = d[2 * k + 1];
    }
    t
}

/// `(9*f*f, h, w)` mask logits to `(9, f*h, f*w)`: channel `n*f*f + a*f + b`
/// at coarse cell `(i, j)` is neighbour `n` of fine pixel `(i*f + a, j*f + b)`.
fn unfold_mask(t: &Tensor) -> Tensor {
    let f = UPSAMPLE_FACTOR;
    let (h, w) = (t.height, t.width);
    let mut out = Tensor::zeros(9, h * f, w * f);
    for n in 0..9 {
        for a in 0..f {
            for b in 0..f {
                let src = t.plane(n * f * f + a * f + b);
                for i in 0..h {
                    for j in 0..w {
                        let idx = out.idx(n, i * f + a, j * f + b);
                        out.data[idx] = src[i * w + j];
                    }
                }
            }
        }
    }
    out
}

fn fold_mask(d: &Tensor, h: usize, w: usize) -> Tensor {
    let f = UPSAMPLE_FACTOR;
    let mut out = Tensor::zeros(MASK_CHANNELS, h, w);
    for n in 0..9 {
        for a in 0..f {
            for b in 0..f {
                let c = n * f * f + a * f + b;
                for i in 0..h {
                    for j in 0..w {
                        out.data[(c * h + i) * w + j] = d.at(n, i * f + a, j * f + b);
                    }
                }
            }
        }
    }
    out
}

impl WarpNetwork {
    pub fn new(config: StnConfig) -> Result<Self> {
        if config.resolution == 0 || config.resolution % BACKBONE_STRIDE != 0 {
            return invalid(format!("network resolution must be a positive multiple of {BACKBONE_STRIDE}"));
        }
        if config.clusters == 0 {
            return invalid("cluster count must be at least 1");
        }
        if config.widths.contains(&0) || config.hidden == 0 {
            return invalid("layer widths must be positive");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let cells = (config.resolution / BACKBONE_STRIDE).pow(2);
        let sim_backbone = Backbone::new(&mut params, "sim.backbone", config.widths, &mut rng);
        let sim_fc = Linear::new(&mut params, "sim.fc", config.widths[1] * cells, config.hidden, Init::He, &mut rng);
        let sim_out = (0..config.clusters)
            .map(|k| Linear::new(&mut params, &format!("sim.out{k}"), config.hidden, 4, Init::Zero, &mut rng))
            .collect();
        let flow = config.use_flow.then(|| {
            let backbone = Backbone::new(&mut params, "flow.backbone", config.widths, &mut rng);
            let c2 = config.widths[1];
            let h = config.hidden;
            let flow1 = Conv2d::new(&mut params, "flow.head1", c2, h, 3, 1, true, Init::He, &mut rng);
            let flow_out = (0..config.clusters)
                .map(|k| Conv2d::new(&mut params, &format!("flow.out{k}"), h, 2, 3, 1, true, Init::Zero, &mut rng))
                .collect();
            let mask1 = Conv2d::new(&mut params, "mask.head1", c2, h, 3, 1, true, Init::He, &mut rng);
            let mask_out = (0..config.clusters)
                .map(|k| {
                    Conv2d::new(&mut params, &format!("mask.out{k}"), h, MASK_CHANNELS, 1, 1, true, Init::Zero, &mut rng)
                })
                .collect();
            FlowHeads { backbone, flow1, flow_out, mask1, mask_out }
        });
        Ok(Self { config, params, sim_backbone, sim_fc, sim_out, flow })
    }

    pub fn clusters(&self) -> usize {
        self.config.clusters
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    fn check_input(&self, image: &Tensor, cluster: usize) -> Result<()> {
        if cluster >= self.config.clusters {
            return invalid(format!("cluster {cluster} out of range for K = {}", self.config.clusters));
        }
        let r = self.config.resolution;
        if image.shape() != (3, r, r) {
            return invalid(format!("network expects 3x{r}x{r} input, got {:?}", image.shape()));
        }
        Ok(())
    }

    /// Raw similarity outputs for one head, with the values needed for backward.
    fn sim_raw(&self, image: &Tensor, cluster: usize) -> ([f64; 4], BackboneCache, Vec<f64>, Vec<f64>) {
        let p = &self.params.values;
        let (feat, bb) = self.sim_backbone.forward(p, image);
        let flat = feat.data;
        let mut hidden = self.sim_fc.forward(p, &flat);
        lrelu_vec(&mut hidden);
        let o = self.sim_out[cluster].forward(p, &hidden);
        ([o[0], o[1], o[2], o[3]], bb, flat, hidden)
    }

    pub fn similarity(&self, image: &Tensor, cluster: usize) -> Result<SimilarityParams> {
        self.check_input(image, cluster)?;
        similarity_from_raw(self.sim_raw(image, cluster).0)
    }

    pub fn forward_sim(&self, image: &Tensor, cluster: usize) -> Result<(Tensor, SimilarityParams)> {
        let sim = self.similarity(image, cluster)?;
        let r = self.config.resolution;
        let grid = grid_from_matrix(&sim.matrix, r, r)?;
        Ok((warp::sample(image, &grid, self.config.padding)?, sim))
    }

    fn flow_raw(&self, x: &Tensor, cluster: usize) -> Option<FlowCache> {
        let heads = self.flow.as_ref()?;
        let p = &self.params.values;
        let (feat, bb) = heads.backbone.forward(p, x);
        let (mut f1_out, f1) = heads.flow1.forward(p, &feat);
        nn::leaky_relu(&mut f1_out);
        let (coarse_t, fo) = heads.flow_out[cluster].forward(p, &f1_out);
        let (mut m1_out, m1) = heads.mask1.forward(p, &feat);
        nn::leaky_relu(&mut m1_out);
        let (mask_t, mo) = heads.mask_out[cluster].forward(p, &m1_out);
        let coarse = coarse_to_field(&coarse_t);
        let logits = unfold_mask(&mask_t);
        let fine = convex_upsample(&coarse, &logits).expect("shapes follow from the architecture");
        let flow_grid = fine.to_grid();
        Some(FlowCache { bb, f1, f1_out, fo, m1, m1_out, mo, coarse, logits, flow_grid })
    }

    /// Dense flow head applied directly to `image`.
    pub fn forward_flow(&self, image: &Tensor, cluster: usize) -> Result<(Tensor, FlowField)> {
        self.check_input(image, cluster)?;
        let r = self.config.resolution;
        match self.flow_raw(image, cluster) {
            None => Ok((image.clone(), FlowField::zeros(r, r))),
            Some(fc) => {
                let warped = warp::sample(image, &fc.flow_grid, self.config.padding)?;
                Ok((warped, fc.flow_grid.to_flow()))
            }
        }
    }

    pub fn forward(&self, image: &Tensor, cluster: usize) -> Result<WarpResult> {
        Ok(self.forward_train(image, cluster)?.0)
    }

    /// Forward pass that also returns the cache needed by [`WarpNetwork::backward`].
    pub fn forward_train(&self, image: &Tensor, cluster: usize) -> Result<(WarpResult, ForwardCache)> {
        self.check_input(image, cluster)?;
        let r = self.config.resolution;
        let (raw, sim_bb, sim_flat, sim_hidden) = self.sim_raw(image, cluster);
        let sim = similarity_from_raw(raw)?;
        let sim_grid = grid_from_matrix(&sim.matrix, r, r)?;
        let (flow, final_grid, fine) = if self.flow.is_some() {
            let x_sim = warp::sample(image, &sim_grid, self.config.padding)?;
            let fc = self.flow_raw(&x_sim, cluster).expect("flow head present");
            let final_grid = compose(&fc.flow_grid, &sim_grid);
            let fine = fc.flow_grid.to_flow();
            (Some(fc), final_grid, fine)
        } else {
            (None, sim_grid.clone(), FlowField::zeros(r, r))
        };
        if !final_grid.is_finite() {
            return invalid("network produced a non-finite sampling grid");
        }
        // The raw input is resampled exactly once with the composed grid.
        let warped = warp::sample(image, &final_grid, self.config.padding)?;
        let result = WarpResult { warped, grid: final_grid.clone(), sim, flow: fine, cluster };
        let cache = ForwardCache { cluster, sim_bb, sim_flat, sim_hidden, raw, sim_grid, flow, final_grid };
        Ok((result, cache))
    }

    /// Accumulate parameter gradients given the gradient of the warped output
    /// and an optional extra gradient on the dense flow (from regularizers).
    pub fn backward(
        &self,
        image: &Tensor,
        cache: &ForwardCache,
        d_warped: &Tensor,
        d_flow: Option<&[f64]>,
        grads: &mut [f64],
    ) -> Result<()> {
        let p = &self.params.values;
        let r = self.config.resolution;
        let k = cache.cluster;
        let want_grid = SampleGrads { image: false, grid: true };
        let (_, dg) = warp::sample_backward(image, &cache.final_grid, self.config.padding, d_warped, want_grid);
        let dg = dg.expect("requested");
        let d_sim_grid = match (&self.flow, &cache.flow) {
            (Some(heads), Some(fc)) => {
                let (mut d_fine, mut d_sim_grid) = compose_backward(&fc.flow_grid, &cache.sim_grid, &dg);
                if let Some(extra) = d_flow {
                    for (a, b) in d_fine.iter_mut().zip(extra) {
                        *a += b;
                    }
                }
                let (d_coarse, d_logits) = convex_upsample_backward(&fc.coarse, &fc.logits, &d_fine);
                let (ch, cw) = (fc.coarse.height, fc.coarse.width);
                let d_coarse_t = field_grad_to_tensor(&d_coarse, ch, cw);
                let mut d_f1 = heads.flow_out[k].backward(p, &fc.fo, &d_coarse_t, Some(grads), true).expect("requested");
                nn::leaky_relu_backward(&fc.f1_out, &mut d_f1);
                let mut d_feat = heads.flow1.backward(p, &fc.f1, &d_f1, Some(grads), true).expect("requested");
                let d_mask_t = fold_mask(&d_logits, ch, cw);
                let mut d_m1 = heads.mask_out[k].backward(p, &fc.mo, &d_mask_t, Some(grads), true).expect("requested");
                nn::leaky_relu_backward(&fc.m1_out, &mut d_m1);
                d_feat.add_assign(&heads.mask1.backward(p, &fc.m1, &d_m1, Some(grads), true).expect("requested"));
                let d_xsim = heads.backbone.backward(p, &fc.bb, &d_feat, Some(grads), true).expect("requested");
                let (_, dg2) = warp::sample_backward(image, &cache.sim_grid, self.config.padding, &d_xsim, want_grid);
                for (a, b) in d_sim_grid.iter_mut().zip(dg2.expect("requested")) {
                    *a += b;
                }
                d_sim_grid
            }
            _ => dg,
        };
        let d_m = grid_from_matrix_backward(&d_sim_grid, r, r);
        let d_raw = similarity_from_raw_backward(cache.raw, &d_m);
        let mut d_hidden = self.sim_out[k].backward(p, &cache.sim_hidden, &d_raw, grads);
        lrelu_vec_backward(&cache.sim_hidden, &mut d_hidden);
        let d_flat = self.sim_fc.backward(p, &cache.sim_flat, &d_hidden, grads);
        let (c2, fh) = (self.sim_backbone.out_channels, r / BACKBONE_STRIDE);
        let d_feat = Tensor::from_vec(c2, fh, fh, d_flat)?;
        self.sim_backbone.backward(p, &cache.sim_bb, &d_feat, Some(grads), false);
        Ok(())
    }

    /// Apply the similarity head to its own output `iterations` times and
    /// return the accumulated matrix; the input is resampled once at the end.
    pub fn recursive_align(&self, image: &Tensor, cluster: usize, iterations: usize) -> Result<(Tensor, Mat3)> {
        self.check_input(image, cluster)?;
        if iterations == 0 {
            return invalid("recursive alignment needs at least one iteration");
        }
        let m = self.recursive_matrix(image, cluster, iterations)?;
        let r = self.config.resolution;
        let grid = grid_from_matrix(&m, r, r)?;
        Ok((warp::sample(image, &grid, self.config.padding)?, m))
    }

    fn recursive_matrix(&self, image: &Tensor, cluster: usize, iterations: usize) -> Result<Mat3> {
        let r = self.config.resolution;
        let mut acc = IDENTITY3;
        let mut current = image.clone();
        for it in 0..iterations {
            let sim = self.similarity(&current, cluster)?;
            acc = mat3_mul(&acc, &sim.matrix);
            if it + 1 < iterations {
                current = warp::sample(image, &grid_from_matrix(&acc, r, r)?, self.config.padding)?;
            }
        }
        Ok(acc)
    }

    /// Full forward where the similarity stage is applied `iterations` times.
    pub fn forward_recursive(&self, image: &Tensor, cluster: usize, iterations: usize) -> Result<WarpResult> {
        if iterations <= 1 {
            return self.forward(image, cluster);
        }
        self.check_input(image, cluster)?;
        let r = self.config.resolution;
        let m = self.recursive_matrix(image, cluster, iterations)?;
        let sim_grid = grid_from_matrix(&m, r, r)?;
        let sim = SimilarityParams::from_matrix(&m);
        let (grid, flow) = if self.flow.is_some() {
            let x_sim = warp::sample(image, &sim_grid, self.config.padding)?;
            let fc = self.flow_raw(&x_sim, cluster).expect("flow head present");
            (compose(&fc.flow_grid, &sim_grid), fc.flow_grid.to_flow())
        } else {
            (sim_grid, FlowField::zeros(r, r))
        };
        let warped = warp::sample(image, &grid, self.config.padding)?;
        Ok(WarpResult { warped, grid, sim, flow, cluster })
    }

    /// Replace the similarity head bias of one cluster (testing and tooling).
    pub fn set_sim_bias(&mut self, cluster: usize, raw: [f64; 4]) -> Result<()> {
        let head = self.sim_out.get(cluster).ok_or_else(|| crate::Error::InvalidArgument("cluster out of range".into()))?;
        self.params.values[head.b_off..head.b_off + 4].copy_from_slice(&raw);
        Ok(())
    }

    /// Replace the coarse-flow bias of one cluster, giving a constant coarse flow.
    pub fn set_flow_bias(&mut self, cluster: usize, v: [f64; 2]) -> Result<()> {
        let heads = self.flow.as_ref().ok_or_else(|| crate::Error::InvalidArgument("network has no flow head".into()))?;
        let conv = heads.flow_out.get(cluster).ok_or_else(|| crate::Error::InvalidArgument("cluster out of range".into()))?;
        let b = conv.b_off.expect("flow output has a bias");
        self.params.values[b..b + 2].copy_from_slice(&v);
        Ok(())
    }

    /// Parameter names belonging to one cluster's output heads.
    pub fn cluster_param_names(&self, cluster: usize) -> Vec<String> {
        let tags = [format!("sim.out{cluster}."), format!("flow.out{cluster}."), format!("mask.out{cluster}.")];
        self.params
            .entries
            .iter()
            .filter(|e| tags.iter().any(|t| e.name.starts_with(t.as_str())))
            .map(|e| e.name.clone())
            .collect()
    }
}

/// Exact horizontal mirror.
pub fn flip_input(image: &Tensor) -> Tensor {
    image.flip_horizontal()
}

/// Image classifier over `K` clusters times two flip states. Its backbone and
/// hidden layer start as copies of the warp network's similarity branch.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub params: ParamSet,
    pub classes: usize,
    backbone: Backbone,
    fc: Linear,
    out: Linear,
}

impl Classifier {
    pub fn from_network(net: &WarpNetwork, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let cfg = &net.config;
        let cells = (cfg.resolution / BACKBONE_STRIDE).pow(2);
        let backbone = Backbone::new(&mut params, "backbone", cfg.widths, &mut rng);
        let fc = Linear::new(&mut params, "fc", cfg.widths[1] * cells, cfg.hidden, Init::He, &mut rng);
        let out = Linear::new(&mut params, "out", cfg.hidden, classes, Init::He, &mut rng);
        net.sim_backbone.copy_into(&net.params, &mut params, &backbone);
        copy_linear(&net.sim_fc, &net.params, &fc, &mut params);
        Self { params, classes, backbone, fc, out }
    }

    /// Rebuild the layer layout for `classes` outputs around stored parameters.
    pub fn with_params(config: &StnConfig, classes: usize, values: Vec<f64>) -> Result<Self> {
        let net = WarpNetwork::new(config.clone())?;
        let mut c = Self::from_network(&net, classes, 0);
        if values.len() != c.params.len() {
            return invalid("classifier parameter count mismatch");
        }
        c.params.values = values;
        Ok(c)
    }

    pub fn logits(&self, image: &Tensor) -> Vec<f64> {
        let p = &self.params.values;
        let (feat, _) = self.backbone.forward(p, image);
        let mut h = self.fc.forward(p, &feat.data);
        lrelu_vec(&mut h);
        self.out.forward(p, &h)
    }

    /// Class with the highest logit (lowest index on ties).
    pub fn predict(&self, image: &Tensor) -> usize {
        let l = self.logits(image);
        let mut best = 0;
        for (i, v) in l.iter().enumerate() {
            if *v > l[best] {
                best = i;
            }
        }
        best
    }

    /// Cross-entropy loss for one example; accumulates parameter gradients.
    pub fn loss_grad(&self, image: &Tensor, label: usize, grads: &mut [f64]) -> f64 {
        let p = &self.params.values;
        let (feat, cache) = self.backbone.forward(p, image);
        let flat = feat.data;
        let mut h = self.fc.forward(p, &flat);
        lrelu_vec(&mut h);
        let logits = self.out.forward(p, &h);
        let (loss, d_logits) = nn::softmax_cross_entropy(&logits, label);
        let mut d_h = self.out.backward(p, &h, &d_logits, grads);
        lrelu_vec_backward(&h, &mut d_h);
        let d_flat = self.fc.backward(p, &flat, &d_h, grads);
        let d_feat = Tensor { channels: feat.channels, height: feat.height, width: feat.width, data: d_flat };
        self.backbone.backward(p, &cache, &d_feat, Some(grads), false);
        loss
    }
}

/// Label layout used by the classifier: `2k` unflipped, `2k + 1` flipped.
pub fn class_label(cluster: usize, flipped: bool) -> usize {
    2 * cluster + usize::from(flipped)
}

pub fn class_parts(label: usize) -> (usize, bool) {
    (label / 2, label % 2 == 1)
}
