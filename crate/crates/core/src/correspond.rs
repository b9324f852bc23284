//! Dense correspondence, edit propagation and the test-time flip rule, all
//! driven by a frozen warp network.
//!
//! Points are pixel coordinates `(x, y)` of images at the network
//! resolution. Grids returned by [`Aligner::align`] are always expressed in
//! the coordinates of the image as given, even when the network was run on
//! its mirror.

use crate::error::invalid;
use crate::keypoints::{Keypoint, KeypointSet};
use crate::par::{self, Execution};
use crate::stn::{class_parts, flip_input, Classifier, WarpNetwork, WarpResult};
use crate::tensor::Tensor;
use crate::trainer::Model;
use crate::warp::{self, grid_value_at, invert_grid_nn, nearest_entry, norm_to_pixel, pixel_to_norm, tv_loss, SamplingGrid};
use crate::Result;

/// Inversion residual, in pixel pitches, beyond which a congealed point is
/// reported as not visible.
pub const VISIBILITY_PITCHES: f64 = 2.0;

/// Color plus opacity in congealed coordinates: channels 0..3 are colors in
/// `[-1, 1]`, channel 3 is opacity in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Overlay {
    pub image: Tensor,
}

impl Overlay {
    pub fn new(image: Tensor) -> Result<Self> {
        if image.channels != 4 {
            return invalid(format!("overlay needs 4 channels, got {}", image.channels));
        }
        if image.plane(3).iter().any(|a| !(0.0..=1.0).contains(a)) {
            return invalid("overlay opacity must lie in [0, 1]");
        }
        Ok(Self { image })
    }

    pub fn transparent(height: usize, width: usize) -> Self {
        Self { image: Tensor::zeros(4, height, width) }
    }

    /// Opaque disc of `color` centred at pixel `(cx, cy)`.
    pub fn dot(height: usize, width: usize, cx: f64, cy: f64, radius: f64, color: [f64; 3]) -> Self {
        let mut t = Tensor::zeros(4, height, width);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if dx * dx + dy * dy <= radius * radius {
                    for (c, v) in color.iter().enumerate() {
                        let i = t.idx(c, y, x);
                        t.data[i] = *v;
                    }
                    let i = t.idx(3, y, x);
                    t.data[i] = 1.0;
                }
            }
        }
        Self { image: t }
    }
}

/// A network's alignment of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub result: WarpResult,
    /// Reverse sampling grid into the image as given (mirrored back when
    /// `flipped`).
    pub grid: SamplingGrid,
    pub flipped: bool,
}

impl Alignment {
    pub fn cluster(&self) -> usize {
        self.result.cluster
    }

    pub fn congealed(&self) -> &Tensor {
        &self.result.warped
    }
}

fn mirror_grid(grid: &SamplingGrid) -> SamplingGrid {
    let mut g = grid.clone();
    for c in g.coords.chunks_exact_mut(2) {
        c[0] = -c[0];
    }
    g
}

/// Runs a frozen network with cluster and flip selection.
#[derive(Clone, Copy, Debug)]
pub struct Aligner<'a> {
    pub network: &'a WarpNetwork,
    pub classifier: Option<&'a Classifier>,
    /// Similarity iterations; 1 disables recursion.
    pub recursion: usize,
    /// Whether the flip rule may mirror inputs.
    pub flips: bool,
}

impl<'a> Aligner<'a> {
    pub fn new(network: &'a WarpNetwork) -> Self {
        Self { network, classifier: None, recursion: 1, flips: false }
    }

    pub fn from_model(model: &'a Model) -> Self {
        Self {
            network: &model.network,
            classifier: model.classifier.as_ref(),
            recursion: model.config.recursion,
            flips: model.config.flips,
        }
    }

    pub fn with_recursion(mut self, iterations: usize) -> Self {
        self.recursion = iterations.max(1);
        self
    }

    fn run(&self, image: &Tensor, cluster: usize) -> Result<WarpResult> {
        self.network.forward_recursive(image, cluster, self.recursion)
    }

    /// Align with a fixed cluster and flip state.
    pub fn align_with(&self, image: &Tensor, cluster: usize, flipped: bool) -> Result<Alignment> {
        if flipped {
            let result = self.run(&flip_input(image), cluster)?;
            let grid = mirror_grid(&result.grid);
            Ok(Alignment { result, grid, flipped })
        } else {
            let result = self.run(image, cluster)?;
            let grid = result.grid.clone();
            Ok(Alignment { result, grid, flipped })
        }
    }

    /// Cluster and flip choice for an image: the classifier when present,
    /// otherwise the smoothest flow over clusters (and mirrors when flips
    /// are enabled), ties going to the lower cluster and to unflipped.
    pub fn choose(&self, image: &Tensor) -> Result<(usize, bool)> {
        if let Some(c) = self.classifier {
            let (k, f) = class_parts(c.predict(image));
            if k >= self.network.clusters() {
                return invalid("classifier predicts a cluster the network does not have");
            }
            return Ok((k, f && self.flips));
        }
        if self.network.clusters() == 1 && !self.flips {
            return Ok((0, false));
        }
        let mirrored = flip_input(image);
        let mut best = (0, false, f64::INFINITY);
        for k in 0..self.network.clusters() {
            for flipped in [false, true] {
                if flipped && !self.flips {
                    continue;
                }
                let x = if flipped { &mirrored } else { image };
                let score = tv_loss(&self.run(x, k)?.flow)?;
                if score < best.2 {
                    best = (k, flipped, score);
                }
            }
        }
        Ok((best.0, best.1))
    }

    pub fn align(&self, image: &Tensor) -> Result<Alignment> {
        let (k, f) = self.choose(image)?;
        self.align_with(image, k, f)
    }
}

/// True iff the mirrored input yields a strictly smoother flow.
pub fn decide_flip(aligner: &Aligner, image: &Tensor, cluster: usize) -> Result<bool> {
    let plain = tv_loss(&aligner.run(image, cluster)?.flow)?;
    let mirrored = tv_loss(&aligner.run(&flip_input(image), cluster)?.flow)?;
    Ok(mirrored < plain)
}

fn pitch(size: usize) -> f64 {
    if size <= 1 {
        1.0
    } else {
        2.0 / (size - 1) as f64
    }
}

/// Map points of the original image into congealed pixel coordinates by
/// nearest grid entry. Points whose nearest entry lies more than
/// [`VISIBILITY_PITCHES`] pixels away are marked not visible.
pub fn congeal_points(grid: &SamplingGrid, pts: &KeypointSet) -> KeypointSet {
    let (h, w) = (grid.height, grid.width);
    let points = pts
        .points
        .iter()
        .map(|p| {
            let target = [pixel_to_norm(p.x, w), pixel_to_norm(p.y, h)];
            let (i, j, _) = nearest_entry(grid, target);
            let g = grid.get(i, j);
            let rx = (g[0] - target[0]) / pitch(w);
            let ry = (g[1] - target[1]) / pitch(h);
            let residual = (rx * rx + ry * ry).sqrt();
            Keypoint { x: j as f64, y: i as f64, visible: p.visible && residual <= VISIBILITY_PITCHES }
        })
        .collect();
    KeypointSet { points, flip_permutation: pts.flip_permutation.clone() }
}

/// Map congealed pixel coordinates back into the original image by bilinear
/// lookup of the grid.
pub fn uncongeal_points(grid: &SamplingGrid, pts: &KeypointSet) -> KeypointSet {
    let (h, w) = (grid.height, grid.width);
    let points = pts
        .points
        .iter()
        .map(|p| {
            let v = grid_value_at(grid, [pixel_to_norm(p.x, w), pixel_to_norm(p.y, h)]);
            Keypoint { x: norm_to_pixel(v[0], w), y: norm_to_pixel(v[1], h), visible: p.visible }
        })
        .collect();
    KeypointSet { points, flip_permutation: pts.flip_permutation.clone() }
}

/// Transfer given two alignments. When exactly one side was mirrored the
/// output labels are permuted with the set's flip permutation.
pub fn transfer_aligned(a: &Alignment, b: &Alignment, pts: &KeypointSet) -> KeypointSet {
    let out = uncongeal_points(&b.grid, &congeal_points(&a.grid, pts));
    if a.flipped != b.flipped && out.flip_permutation.is_some() {
        out.permuted()
    } else {
        out
    }
}

/// Transfer points from image A to image B through the congealed frame.
pub fn transfer_points(aligner: &Aligner, a: &Tensor, b: &Tensor, pts: &KeypointSet) -> Result<KeypointSet> {
    let (la, lb) = (aligner.align(a)?, aligner.align(b)?);
    if la.cluster() != lb.cluster() {
        log::debug!("transfer between clusters {} and {}", la.cluster(), lb.cluster());
    }
    Ok(transfer_aligned(&la, &lb, pts))
}

/// Alpha-composite an overlay given in congealed coordinates onto the image
/// it was aligned from. Each image pixel reads the overlay at its
/// nearest-neighbour congealed location.
pub fn composite(overlay: &Overlay, image: &Tensor, grid: &SamplingGrid) -> Result<Tensor> {
    let (c, h, w) = image.shape();
    if c != 3 {
        return invalid("propagation expects a 3-channel image");
    }
    if (overlay.image.height, overlay.image.width) != (h, w) || (grid.height, grid.width) != (h, w) {
        return invalid("overlay, grid and image sizes differ");
    }
    if overlay.image.plane(3).iter().all(|a| *a == 0.0) {
        return Ok(image.clone());
    }
    let inverse = invert_grid_nn(grid);
    let o = warp::sample(&overlay.image, &inverse, warp::Padding::Zeros)?;
    let mut out = image.clone();
    let alpha = o.plane(3).to_vec();
    for ch in 0..3 {
        let src = o.plane(ch);
        for ((v, s), a) in out.plane_mut(ch).iter_mut().zip(src).zip(&alpha) {
            if *a > 0.0 {
                *v = a * s + (1.0 - a) * *v;
            }
        }
    }
    Ok(out)
}

pub fn propagate_overlay(aligner: &Aligner, overlay: &Overlay, image: &Tensor) -> Result<Tensor> {
    composite(overlay, image, &aligner.align(image)?.grid)
}

/// Per-image propagation over a batch.
pub fn propagate_batch(aligner: &Aligner, overlay: &Overlay, images: &[Tensor], exec: Execution) -> Result<Vec<Tensor>> {
    par::map(exec, images, |x| propagate_overlay(aligner, overlay, x)).into_iter().collect()
}

/// One frame of a tracked clip.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackedFrame {
    pub grid: SamplingGrid,
    pub composited: Tensor,
}

/// Independent per-frame propagation. Cluster and flip are chosen on the
/// first frame and held for the whole clip.
pub fn track_video(aligner: &Aligner, overlay: &Overlay, frames: &[Tensor], exec: Execution) -> Result<Vec<TrackedFrame>> {
    let Some(first) = frames.first() else {
        return Ok(Vec::new());
    };
    if frames.iter().any(|f| !f.same_shape(first)) {
        return invalid("video frames must share one resolution");
    }
    let (k, flipped) = aligner.choose(first)?;
    par::map(exec, frames, |f| {
        let a = aligner.align_with(f, k, flipped)?;
        let composited = composite(overlay, f, &a.grid)?;
        Ok(TrackedFrame { grid: a.grid, composited })
    })
    .into_iter()
    .collect()
}
