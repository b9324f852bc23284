//! Differentiable warp geometry: sampling grids, similarity transforms,
//! bilinear resampling, grid composition and inversion, convex flow
//! upsampling and the flow regularizers.
//!
//! Coordinates are normalized and corner-aligned: `x` grows rightward, `y`
//! downward, and `-1` / `1` land on the centers of the first and last pixel.
//! A grid entry `(i, j)` holds the source location that output pixel `(i, j)`
//! reads from (a reverse sampling grid).

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Upsampling ratio between the coarse flow and the dense flow.
pub const UPSAMPLE_FACTOR: usize = 8;

/// Default Huber breakpoint, in normalized flow units.
pub const HUBER_DELTA: f64 = 1.0;

const SNAP_EPS: f64 = 1e-9;

/// How out-of-range sample locations are resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Reflection,
    Border,
    Zeros,
}

impl FromStr for Padding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "reflection" => Ok(Padding::Reflection),
            "border" => Ok(Padding::Border),
            "zeros" => Ok(Padding::Zeros),
            other => invalid(format!("unknown padding mode '{other}'")),
        }
    }
}

impl fmt::Display for Padding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Padding::Reflection => "reflection",
            Padding::Border => "border",
            Padding::Zeros => "zeros",
        })
    }
}

/// Pixel index to normalized coordinate along an axis of `size` pixels.
#[inline]
pub fn pixel_to_norm(p: f64, size: usize) -> f64 {
    if size <= 1 {
        -1.0
    } else {
        -1.0 + 2.0 * p / (size - 1) as f64
    }
}

/// Normalized coordinate to (fractional) pixel index.
#[inline]
pub fn norm_to_pixel(v: f64, size: usize) -> f64 {
    if size <= 1 {
        0.0
    } else {
        (v + 1.0) * 0.5 * (size - 1) as f64
    }
}

#[inline]
fn half_span(size: usize) -> f64 {
    if size <= 1 {
        0.0
    } else {
        0.5 * (size - 1) as f64
    }
}

#[inline]
fn snap(p: f64) -> f64 {
    let r = p.round();
    if (p - r).abs() < SNAP_EPS {
        r
    } else {
        p
    }
}

/// A reverse sampling grid of normalized `(x, y)` coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid {
    pub height: usize,
    pub width: usize,
    /// Row-major, interleaved `(x, y)` pairs; length `2 * height * width`.
    pub coords: Vec<f64>,
}

impl SamplingGrid {
    pub fn from_coords(height: usize, width: usize, coords: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return invalid("grid dimensions must be positive");
        }
        if coords.len() != 2 * height * width {
            return invalid(format!(
                "grid coords length {} does not match {}x{}x2",
                coords.len(),
                height,
                width
            ));
        }
        Ok(Self { height, width, coords })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> [f64; 2] {
        let k = 2 * (i * self.width + j);
        [self.coords[k], self.coords[k + 1]]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: [f64; 2]) {
        let k = 2 * (i * self.width + j);
        self.coords[k] = v[0];
        self.coords[k + 1] = v[1];
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|v| v.is_finite())
    }

    /// Displacement relative to the identity grid.
    pub fn to_flow(&self) -> FlowField {
        let id = identity_coords(self.height, self.width);
        let displacement = self.coords.iter().zip(&id).map(|(g, e)| g - e).collect();
        FlowField { height: self.height, width: self.width, displacement }
    }

    /// Largest per-entry Euclidean distance to another grid, in normalized units.
    pub fn max_distance(&self, other: &SamplingGrid) -> f64 {
        self.coords
            .chunks_exact(2)
            .zip(other.coords.chunks_exact(2))
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .fold(0.0, f64::max)
    }

    /// Fraction of entries that fall outside `[-1, 1]` on either axis.
    pub fn out_of_bounds_fraction(&self) -> f64 {
        let n = self.len().max(1) as f64;
        let outside = self
            .coords
            .chunks_exact(2)
            .filter(|c| c[0].abs() > 1.0 + 1e-12 || c[1].abs() > 1.0 + 1e-12)
            .count();
        outside as f64 / n
    }
}

/// A dense displacement field; adding it to the identity grid yields a
/// [`SamplingGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    /// Row-major, interleaved `(dx, dy)`.
    pub displacement: Vec<f64>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, displacement: vec![0.0; 2 * height * width] }
    }

    pub fn constant(height: usize, width: usize, v: [f64; 2]) -> Self {
        let mut displacement = Vec::with_capacity(2 * height * width);
        for _ in 0..height * width {
            displacement.extend_from_slice(&v);
        }
        Self { height, width, displacement }
    }

    pub fn from_vec(height: usize, width: usize, displacement: Vec<f64>) -> Result<Self> {
        if displacement.len() != 2 * height * width {
            return invalid("flow length does not match its dimensions");
        }
        Ok(Self { height, width, displacement })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> [f64; 2] {
        let k = 2 * (i * self.width + j);
        [self.displacement[k], self.displacement[k + 1]]
    }

    pub fn to_grid(&self) -> SamplingGrid {
        let id = identity_coords(self.height, self.width);
        let coords = self.displacement.iter().zip(&id).map(|(d, e)| d + e).collect();
        SamplingGrid { height: self.height, width: self.width, coords }
    }

    pub fn is_zero(&self) -> bool {
        self.displacement.iter().all(|v| *v == 0.0)
    }
}

fn identity_coords(height: usize, width: usize) -> Vec<f64> {
    let mut coords = Vec::with_capacity(2 * height * width);
    for i in 0..height {
        let y = pixel_to_norm(i as f64, height);
        for j in 0..width {
            coords.push(pixel_to_norm(j as f64, width));
            coords.push(y);
        }
    }
    coords
}

/// The corner-aligned identity grid.
pub fn identity_grid(height: usize, width: usize) -> Result<SamplingGrid> {
    if height == 0 || width == 0 {
        return invalid("identity_grid needs positive dimensions");
    }
    Ok(SamplingGrid { height, width, coords: identity_coords(height, width) })
}

/// A 3x3 homogeneous matrix, row-major.
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Inverse of an affine matrix (last row `[0, 0, 1]`).
pub fn affine_inverse(m: &Mat3) -> Option<Mat3> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.abs() < 1e-15 || !det.is_finite() {
        return None;
    }
    let a = m[1][1] / det;
    let b = -m[0][1] / det;
    let c = -m[1][0] / det;
    let d = m[0][0] / det;
    let tx = -(a * m[0][2] + b * m[1][2]);
    let ty = -(c * m[0][2] + d * m[1][2]);
    Some([[a, b, tx], [c, d, ty], [0.0, 0.0, 1.0]])
}

#[inline]
pub fn apply_affine(m: &Mat3, p: [f64; 2]) -> [f64; 2] {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2],
    ]
}

/// Rotation, uniform scale and shift, together with the matrix they assemble.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityParams {
    pub rotation: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
    pub matrix: Mat3,
}

impl SimilarityParams {
    pub fn identity() -> Self {
        Self { rotation: 0.0, scale: 1.0, tx: 0.0, ty: 0.0, matrix: IDENTITY3 }
    }

    pub fn from_parts(rotation: f64, scale: f64, tx: f64, ty: f64) -> Self {
        let (sin, cos) = rotation.sin_cos();
        let matrix = [
            [scale * cos, -scale * sin, tx],
            [scale * sin, scale * cos, ty],
            [0.0, 0.0, 1.0],
        ];
        Self { rotation, scale, tx, ty, matrix }
    }

    /// Read the parameters back from a similarity matrix (for example an
    /// accumulated product of several similarities).
    pub fn from_matrix(m: &Mat3) -> Self {
        let scale = m[0][0].hypot(m[1][0]);
        let rotation = m[1][0].atan2(m[0][0]);
        Self { rotation, scale, tx: m[0][2], ty: m[1][2], matrix: *m }
    }
}

/// Raw regressor outputs to a similarity: `r = pi*tanh(o1)`, `s = exp(o2)`,
/// `tx = o3`, `ty = o4`.
pub fn similarity_from_raw(o: [f64; 4]) -> Result<SimilarityParams> {
    if o.iter().any(|v| !v.is_finite()) {
        return invalid("similarity_from_raw received a non-finite input");
    }
    Ok(SimilarityParams::from_parts(
        std::f64::consts::PI * o[0].tanh(),
        o[1].exp(),
        o[2],
        o[3],
    ))
}

/// Gradient of the raw outputs given the gradient of the top two rows of `M`.
pub fn similarity_from_raw_backward(o: [f64; 4], d_matrix: &[[f64; 3]; 2]) -> [f64; 4] {
    let th = o[0].tanh();
    let r = std::f64::consts::PI * th;
    let s = o[1].exp();
    let (sin, cos) = r.sin_cos();
    // dM/dr and dM/ds for the 2x2 block.
    let d_r = d_matrix[0][0] * (-s * sin)
        + d_matrix[0][1] * (-s * cos)
        + d_matrix[1][0] * (s * cos)
        + d_matrix[1][1] * (-s * sin);
    let d_s = d_matrix[0][0] * cos + d_matrix[0][1] * (-sin) + d_matrix[1][0] * sin + d_matrix[1][1] * cos;
    [
        d_r * std::f64::consts::PI * (1.0 - th * th),
        d_s * s,
        d_matrix[0][2],
        d_matrix[1][2],
    ]
}

/// Apply `M` to every entry of the identity grid.
pub fn grid_from_matrix(m: &Mat3, height: usize, width: usize) -> Result<SamplingGrid> {
    if m.iter().flatten().any(|v| !v.is_finite()) {
        return invalid("grid_from_matrix received a non-finite matrix");
    }
    let mut grid = identity_grid(height, width)?;
    for c in grid.coords.chunks_exact_mut(2) {
        let p = apply_affine(m, [c[0], c[1]]);
        c[0] = p[0];
        c[1] = p[1];
    }
    Ok(grid)
}

/// Gradient of the top two rows of `M` given a gradient on the grid it produced.
pub fn grid_from_matrix_backward(d_grid: &[f64], height: usize, width: usize) -> [[f64; 3]; 2] {
    let mut d = [[0.0; 3]; 2];
    for i in 0..height {
        let y = pixel_to_norm(i as f64, height);
        for j in 0..width {
            let x = pixel_to_norm(j as f64, width);
            let k = 2 * (i * width + j);
            for (a, row) in d.iter_mut().enumerate() {
                let g = d_grid[k + a];
                row[0] += g * x;
                row[1] += g * y;
                row[2] += g;
            }
        }
    }
    d
}

/// Map a pixel coordinate through the padding rule. Returns the resolved
/// coordinate and its derivative with respect to the input coordinate.
#[inline]
fn resolve_coord(p: f64, size: usize, padding: Padding) -> (f64, f64) {
    let span = (size.max(1) - 1) as f64;
    match padding {
        Padding::Zeros => (p, 1.0),
        Padding::Border => {
            if p < 0.0 {
                (0.0, 0.0)
            } else if p > span {
                (span, 0.0)
            } else {
                (p, 1.0)
            }
        }
        Padding::Reflection => {
            if span <= 0.0 {
                return (0.0, 0.0);
            }
            let twice = 2.0 * span;
            let mut sign = if p < 0.0 { -1.0 } else { 1.0 };
            let mut v = p.abs();
            let flips = (v / twice).floor();
            v -= flips * twice;
            if v > span {
                v = twice - v;
                sign = -sign;
            }
            (v.clamp(0.0, span), sign)
        }
    }
}

struct Tap {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
    dpx: f64,
    dpy: f64,
}

#[inline]
fn make_tap(gx: f64, gy: f64, in_w: usize, in_h: usize, padding: Padding) -> Tap {
    let px = snap(norm_to_pixel(gx, in_w));
    let py = snap(norm_to_pixel(gy, in_h));
    let (px, dpx) = resolve_coord(px, in_w, padding);
    let (py, dpy) = resolve_coord(py, in_h, padding);
    let x0 = px.floor();
    let y0 = py.floor();
    Tap {
        x0: x0 as isize,
        y0: y0 as isize,
        fx: px - x0,
        fy: py - y0,
        dpx: dpx * half_span(in_w),
        dpy: dpy * half_span(in_h),
    }
}

#[inline]
fn fetch(plane: &[f64], w: usize, h: usize, x: isize, y: isize) -> f64 {
    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
        0.0
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Bilinear resampling of `image` at every grid location.
pub fn sample(image: &Tensor, grid: &SamplingGrid, padding: Padding) -> Result<Tensor> {
    if image.channels == 0 {
        return invalid("sample needs at least one channel");
    }
    if image.height == 0 || image.width == 0 {
        return invalid("sample needs a non-empty image");
    }
    let (in_h, in_w) = (image.height, image.width);
    let mut out = Tensor::zeros(image.channels, grid.height, grid.width);
    let n = grid.len();
    for (k, c) in grid.coords.chunks_exact(2).enumerate() {
        let t = make_tap(c[0], c[1], in_w, in_h, padding);
        let w00 = (1.0 - t.fx) * (1.0 - t.fy);
        let w10 = t.fx * (1.0 - t.fy);
        let w01 = (1.0 - t.fx) * t.fy;
        let w11 = t.fx * t.fy;
        for ch in 0..image.channels {
            let plane = image.plane(ch);
            let mut v = w00 * fetch(plane, in_w, in_h, t.x0, t.y0);
            if w10 != 0.0 {
                v += w10 * fetch(plane, in_w, in_h, t.x0 + 1, t.y0);
            }
            if w01 != 0.0 {
                v += w01 * fetch(plane, in_w, in_h, t.x0, t.y0 + 1);
            }
            if w11 != 0.0 {
                v += w11 * fetch(plane, in_w, in_h, t.x0 + 1, t.y0 + 1);
            }
            out.data[ch * n + k] = v;
        }
    }
    Ok(out)
}

/// Which adjoints [`sample_backward`] should produce.
#[derive(Clone, Copy, Debug)]
pub struct SampleGrads {
    pub image: bool,
    pub grid: bool,
}

/// Adjoint of [`sample`]: gradients with respect to the image and the grid.
pub fn sample_backward(
    image: &Tensor,
    grid: &SamplingGrid,
    padding: Padding,
    d_out: &Tensor,
    want: SampleGrads,
) -> (Option<Tensor>, Option<Vec<f64>>) {
    let (in_h, in_w) = (image.height, image.width);
    let n = grid.len();
    let mut d_img = want.image.then(|| Tensor::zeros(image.channels, in_h, in_w));
    let mut d_grid = want.grid.then(|| vec![0.0; 2 * n]);
    let inside = |x: isize, y: isize| x >= 0 && y >= 0 && x < in_w as isize && y < in_h as isize;
    for (k, c) in grid.coords.chunks_exact(2).enumerate() {
        let t = make_tap(c[0], c[1], in_w, in_h, padding);
        let taps = [
            (t.x0, t.y0, (1.0 - t.fx) * (1.0 - t.fy)),
            (t.x0 + 1, t.y0, t.fx * (1.0 - t.fy)),
            (t.x0, t.y0 + 1, (1.0 - t.fx) * t.fy),
            (t.x0 + 1, t.y0 + 1, t.fx * t.fy),
        ];
        let mut gx = 0.0;
        let mut gy = 0.0;
        for ch in 0..image.channels {
            let g = d_out.data[ch * n + k];
            if g == 0.0 {
                continue;
            }
            let plane = image.plane(ch);
            if let Some(di) = d_img.as_mut() {
                let dp = di.plane_mut(ch);
                for &(x, y, w) in &taps {
                    if w != 0.0 && inside(x, y) {
                        dp[y as usize * in_w + x as usize] += g * w;
                    }
                }
            }
            if d_grid.is_some() {
                let v00 = fetch(plane, in_w, in_h, t.x0, t.y0);
                let v10 = fetch(plane, in_w, in_h, t.x0 + 1, t.y0);
                let v01 = fetch(plane, in_w, in_h, t.x0, t.y0 + 1);
                let v11 = fetch(plane, in_w, in_h, t.x0 + 1, t.y0 + 1);
                gx += g * ((1.0 - t.fy) * (v10 - v00) + t.fy * (v11 - v01));
                gy += g * ((1.0 - t.fx) * (v01 - v00) + t.fx * (v11 - v10));
            }
        }
        if let Some(dg) = d_grid.as_mut() {
            dg[2 * k] += gx * t.dpx;
            dg[2 * k + 1] += gy * t.dpy;
        }
    }
    (d_img, d_grid)
}

/// Bilinear lookup into a 2-channel grid with linear extrapolation beyond the
/// outermost cells. Returns the interpolated value plus the corner indices
/// and weights used.
#[inline]
fn grid_lookup(grid: &SamplingGrid, x: f64, y: f64) -> ([f64; 2], [(usize, f64); 4], [f64; 2], [f64; 2]) {
    let (h, w) = (grid.height, grid.width);
    let px = snap(norm_to_pixel(x, w));
    let py = snap(norm_to_pixel(y, h));
    let (x0, fx) = if w >= 2 {
        let x0 = px.floor().clamp(0.0, (w - 2) as f64);
        (x0 as usize, px - x0)
    } else {
        (0, 0.0)
    };
    let (y0, fy) = if h >= 2 {
        let y0 = py.floor().clamp(0.0, (h - 2) as f64);
        (y0 as usize, py - y0)
    } else {
        (0, 0.0)
    };
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let corners = [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ];
    let mut v = [0.0; 2];
    for &(idx, wt) in &corners {
        if wt != 0.0 {
            v[0] += wt * grid.coords[2 * idx];
            v[1] += wt * grid.coords[2 * idx + 1];
        }
    }
    // Partial derivatives of the value with respect to px and py.
    let g = |idx: usize, a: usize| grid.coords[2 * idx + a];
    let (i00, i10, i01, i11) = (corners[0].0, corners[1].0, corners[2].0, corners[3].0);
    let mut dpx = [0.0; 2];
    let mut dpy = [0.0; 2];
    for a in 0..2 {
        if w >= 2 {
            dpx[a] = (1.0 - fy) * (g(i10, a) - g(i00, a)) + fy * (g(i11, a) - g(i01, a));
        }
        if h >= 2 {
            dpy[a] = (1.0 - fx) * (g(i01, a) - g(i00, a)) + fx * (g(i11, a) - g(i10, a));
        }
    }
    (v, corners, dpx, dpy)
}

/// Evaluate a grid bilinearly at a normalized location (linear extrapolation
/// outside the lattice).
pub fn grid_value_at(grid: &SamplingGrid, p: [f64; 2]) -> [f64; 2] {
    grid_lookup(grid, p[0], p[1]).0
}

/// `result(i, j) = inner(outer(i, j))`: sampling with the result is sampling
/// with `inner` and then with `outer`.
pub fn compose(outer: &SamplingGrid, inner: &SamplingGrid) -> SamplingGrid {
    let mut coords = Vec::with_capacity(outer.coords.len());
    for c in outer.coords.chunks_exact(2) {
        let (v, ..) = grid_lookup(inner, c[0], c[1]);
        coords.extend_from_slice(&v);
    }
    SamplingGrid { height: outer.height, width: outer.width, coords }
}

/// Adjoint of [`compose`]: gradients with respect to `outer` and `inner`.
pub fn compose_backward(outer: &SamplingGrid, inner: &SamplingGrid, d_result: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut d_outer = vec![0.0; outer.coords.len()];
    let mut d_inner = vec![0.0; inner.coords.len()];
    let sx = half_span(inner.width);
    let sy = half_span(inner.height);
    for (k, c) in outer.coords.chunks_exact(2).enumerate() {
        let (_, corners, dpx, dpy) = grid_lookup(inner, c[0], c[1]);
        let g = [d_result[2 * k], d_result[2 * k + 1]];
        d_outer[2 * k] += (g[0] * dpx[0] + g[1] * dpx[1]) * sx;
        d_outer[2 * k + 1] += (g[0] * dpy[0] + g[1] * dpy[1]) * sy;
        for &(idx, wt) in &corners {
            d_inner[2 * idx] += wt * g[0];
            d_inner[2 * idx + 1] += wt * g[1];
        }
    }
    (d_outer, d_inner)
}

/// Closest grid entry (row-major first on ties) to a normalized point.
/// Returns `(row, col, distance)`.
pub fn nearest_entry(grid: &SamplingGrid, target: [f64; 2]) -> (usize, usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (k, c) in grid.coords.chunks_exact(2).enumerate() {
        let dx = c[0] - target[0];
        let dy = c[1] - target[1];
        let d = dx * dx + dy * dy;
        if d < best.1 {
            best = (k, d);
        }
    }
    (best.0 / grid.width, best.0 % grid.width, best.1.sqrt())
}

/// Nearest-neighbour inverse: entry `(i, j)` is the identity coordinate of the
/// grid entry closest to the identity coordinate of `(i, j)`.
pub fn invert_grid_nn(grid: &SamplingGrid) -> SamplingGrid {
    let (h, w) = (grid.height, grid.width);
    let mut out = SamplingGrid { height: h, width: w, coords: vec![0.0; 2 * h * w] };
    for i in 0..h {
        let y = pixel_to_norm(i as f64, h);
        for j in 0..w {
            let x = pixel_to_norm(j as f64, w);
            let (bi, bj, _) = nearest_entry(grid, [x, y]);
            out.set(i, j, [pixel_to_norm(bj as f64, w), pixel_to_norm(bi as f64, h)]);
        }
    }
    out
}

/// Softmax of the 9 neighbourhood logits at one fine pixel.
#[inline]
fn neighbourhood_softmax(logits: &Tensor, y: usize, x: usize) -> [f64; 9] {
    let mut p = [0.0; 9];
    let mut m = f64::NEG_INFINITY;
    for (k, v) in p.iter_mut().enumerate() {
        *v = logits.at(k, y, x);
        m = m.max(*v);
    }
    let mut z = 0.0;
    for v in p.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in p.iter_mut() {
        *v /= z;
    }
    p
}

#[inline]
fn neighbour(i: usize, j: usize, k: usize, h: usize, w: usize) -> usize {
    let di = (k / 3) as isize - 1;
    let dj = (k % 3) as isize - 1;
    let ii = (i as isize + di).clamp(0, h as isize - 1) as usize;
    let jj = (j as isize + dj).clamp(0, w as isize - 1) as usize;
    ii * w + jj
}

fn check_upsample_shapes(coarse: &FlowField, logits: &Tensor) -> Result<()> {
    let f = UPSAMPLE_FACTOR;
    if coarse.height == 0 || coarse.width == 0 {
        return invalid("convex_upsample needs a non-empty coarse flow");
    }
    if logits.channels != 9 || logits.height != coarse.height * f || logits.width != coarse.width * f {
        return invalid(format!(
            "convex weights must be 9x{}x{}, got {}x{}x{}",
            coarse.height * f,
            coarse.width * f,
            logits.channels,
            logits.height,
            logits.width
        ));
    }
    Ok(())
}

/// Learned convex upsampling by [`UPSAMPLE_FACTOR`]. `logits` holds, for every
/// fine pixel, 9 unnormalized weights over the 3x3 coarse neighbourhood (in
/// row-major neighbour order); edges replicate the border cells.
pub fn convex_upsample(coarse: &FlowField, logits: &Tensor) -> Result<FlowField> {
    check_upsample_shapes(coarse, logits)?;
    let f = UPSAMPLE_FACTOR;
    let (h, w) = (coarse.height, coarse.width);
    let mut out = FlowField::zeros(h * f, w * f);
    for y in 0..h * f {
        for x in 0..w * f {
            let p = neighbourhood_softmax(logits, y, x);
            let (i, j) = (y / f, x / f);
            let mut v = [0.0; 2];
            for (k, pk) in p.iter().enumerate() {
                let n = neighbour(i, j, k, h, w);
                v[0] += pk * coarse.displacement[2 * n];
                v[1] += pk * coarse.displacement[2 * n + 1];
            }
            let o = 2 * (y * w * f + x);
            out.displacement[o] = v[0];
            out.displacement[o + 1] = v[1];
        }
    }
    Ok(out)
}

/// Adjoint of [`convex_upsample`]: gradients for the coarse flow and logits.
pub fn convex_upsample_backward(coarse: &FlowField, logits: &Tensor, d_fine: &[f64]) -> (Vec<f64>, Tensor) {
    let f = UPSAMPLE_FACTOR;
    let (h, w) = (coarse.height, coarse.width);
    let mut d_coarse = vec![0.0; coarse.displacement.len()];
    let mut d_logits = Tensor::zeros(9, h * f, w * f);
    for y in 0..h * f {
        for x in 0..w * f {
            let o = 2 * (y * w * f + x);
            let g = [d_fine[o], d_fine[o + 1]];
            if g[0] == 0.0 && g[1] == 0.0 {
                continue;
            }
            let p = neighbourhood_softmax(logits, y, x);
            let (i, j) = (y / f, x / f);
            let mut dots = [0.0; 9];
            let mut mean = 0.0;
            for (k, pk) in p.iter().enumerate() {
                let n = neighbour(i, j, k, h, w);
                d_coarse[2 * n] += pk * g[0];
                d_coarse[2 * n + 1] += pk * g[1];
                dots[k] = coarse.displacement[2 * n] * g[0] + coarse.displacement[2 * n + 1] * g[1];
                mean += pk * dots[k];
            }
            for (k, pk) in p.iter().enumerate() {
                let idx = d_logits.idx(k, y, x);
                d_logits.data[idx] = pk * (dots[k] - mean);
            }
        }
    }
    (d_coarse, d_logits)
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0) || !delta.is_finite() {
        return invalid(format!("huber delta must be positive, got {delta}"));
    }
    Ok(())
}

#[inline]
fn huber_elem(t: f64, delta: f64) -> f64 {
    let a = t.abs();
    if a <= delta {
        0.5 * t * t
    } else {
        delta * (a - 0.5 * delta)
    }
}

#[inline]
fn huber_elem_grad(t: f64, delta: f64) -> f64 {
    if t.abs() <= delta {
        t
    } else {
        delta * t.signum()
    }
}

/// Mean Huber penalty over the elements of `x`.
pub fn huber(x: &[f64], delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if x.is_empty() {
        return Ok(0.0);
    }
    Ok(x.iter().map(|&t| huber_elem(t, delta)).sum::<f64>() / x.len() as f64)
}

fn forward_differences(flow: &FlowField) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (flow.height, flow.width);
    let d = &flow.displacement;
    let mut dx = Vec::with_capacity(2 * h * (w - 1));
    let mut dy = Vec::with_capacity(2 * (h - 1) * w);
    for i in 0..h {
        for j in 0..w - 1 {
            for c in 0..2 {
                dx.push(d[2 * (i * w + j + 1) + c] - d[2 * (i * w + j) + c]);
            }
        }
    }
    for i in 0..h - 1 {
        for j in 0..w {
            for c in 0..2 {
                dy.push(d[2 * ((i + 1) * w + j) + c] - d[2 * (i * w + j) + c]);
            }
        }
    }
    (dx, dy)
}

/// Total variation of a flow: Huber penalties on horizontal and vertical
/// forward differences.
pub fn tv_loss(flow: &FlowField) -> Result<f64> {
    tv_loss_with_delta(flow, HUBER_DELTA)
}

pub fn tv_loss_with_delta(flow: &FlowField, delta: f64) -> Result<f64> {
    if flow.height < 2 || flow.width < 2 {
        return invalid("tv_loss needs a flow of at least 2x2");
    }
    let (dx, dy) = forward_differences(flow);
    Ok(huber(&dx, delta)? + huber(&dy, delta)?)
}

/// Gradient of [`tv_loss`] with respect to the displacement.
pub fn tv_loss_grad(flow: &FlowField) -> Result<Vec<f64>> {
    if flow.height < 2 || flow.width < 2 {
        return invalid("tv_loss needs a flow of at least 2x2");
    }
    let (h, w) = (flow.height, flow.width);
    let (dx, dy) = forward_differences(flow);
    let nx = dx.len() as f64;
    let ny = dy.len() as f64;
    let mut g = vec![0.0; flow.displacement.len()];
    let mut k = 0;
    for i in 0..h {
        for j in 0..w - 1 {
            for c in 0..2 {
                let d = huber_elem_grad(dx[k], HUBER_DELTA) / nx;
                g[2 * (i * w + j + 1) + c] += d;
                g[2 * (i * w + j) + c] -= d;
                k += 1;
            }
        }
    }
    k = 0;
    for i in 0..h - 1 {
        for j in 0..w {
            for c in 0..2 {
                let d = huber_elem_grad(dy[k], HUBER_DELTA) / ny;
                g[2 * ((i + 1) * w + j) + c] += d;
                g[2 * (i * w + j) + c] -= d;
                k += 1;
            }
        }
    }
    Ok(g)
}

/// Mean squared displacement (deviation of the grid from identity).
pub fn identity_reg(flow: &FlowField) -> f64 {
    if flow.displacement.is_empty() {
        return 0.0;
    }
    flow.displacement.iter().map(|v| v * v).sum::<f64>() / flow.displacement.len() as f64
}

pub fn identity_reg_grad(flow: &FlowField) -> Vec<f64> {
    let n = flow.displacement.len().max(1) as f64;
    flow.displacement.iter().map(|v| 2.0 * v / n).collect()
}

const FLOW_MAGIC: &[u8; 4] = b"GGFL";

/// Write an `H x W x C` field as `GGFL`, three little-endian `u32` dims and
/// little-endian `f32` values, row-major and channel-last.
pub fn write_field<W: Write>(mut out: W, height: usize, width: usize, values: &[f64]) -> Result<()> {
    if values.len() != 2 * height * width {
        return invalid("field length does not match its dimensions");
    }
    out.write_all(FLOW_MAGIC)?;
    for d in [height, width, 2] {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Read a `GGFL` field; returns `(height, width, values)`.
pub fn read_field<R: Read>(mut input: R) -> Result<(usize, usize, Vec<f64>)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != FLOW_MAGIC {
        return Err(Error::Format("missing GGFL magic".into()));
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    if dims[2] != 2 {
        return Err(Error::Format(format!("expected 2 channels, found {}", dims[2])));
    }
    let n = dims[0] * dims[1] * dims[2];
    let mut raw = vec![0u8; n * 4];
    input.read_exact(&mut raw)?;
    let values = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok((dims[0], dims[1], values))
}

impl SamplingGrid {
    pub fn write_ggfl<W: Write>(&self, out: W) -> Result<()> {
        write_field(out, self.height, self.width, &self.coords)
    }

    pub fn read_ggfl<R: Read>(input: R) -> Result<Self> {
        let (h, w, coords) = read_field(input)?;
        SamplingGrid::from_coords(h, w, coords)
    }
}

impl FlowField {
    pub fn write_ggfl<W: Write>(&self, out: W) -> Result<()> {
        write_field(out, self.height, self.width, &self.displacement)
    }

    pub fn read_ggfl<R: Read>(input: R) -> Result<Self> {
        let (h, w, d) = read_field(input)?;
        FlowField::from_vec(h, w, d)
    }
}
