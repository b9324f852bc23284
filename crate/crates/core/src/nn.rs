//! Minimal layers with hand-written backward passes.
//!
//! Parameters of a model live in one flat [`ParamSet`]; layers keep offsets
//! into it, so a gradient is a plain `Vec<f64>` of the same length and the
//! optimizer works on flat slices.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named parameter tensors packed into one vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    pub values: Vec<f64>,
    pub entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor and return its offset.
    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, init: impl FnMut() -> f64) -> usize {
        let offset = self.values.len();
        let n: usize = shape.iter().product();
        self.values.extend(std::iter::repeat_with(init).take(n));
        self.entries.push(ParamEntry { name: name.into(), offset, shape });
        offset
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.entry(name).map(|e| &self.values[e.range()])
    }

    pub fn slice_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.entry(name)?.range();
        Some(&mut self.values[r])
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }
}

fn he_normal<R: Rng>(rng: &mut R, fan_in: usize) -> impl FnMut() -> f64 + '_ {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    move || std * rng.sample::<f64, _>(StandardNormal)
}

/// Weight initialization choice for a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    He,
    Zero,
}

/// 2-D convolution over planar tensors, evaluated as im2col + GEMM.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub w_off: usize,
    pub b_off: Option<usize>,
}

/// Saved activations for a convolution backward pass.
#[derive(Clone, Debug)]
pub struct ConvCache {
    col: Vec<f64>,
    in_h: usize,
    in_w: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let w_off = match init {
            Init::He => params.add(format!("{name}.weight"), vec![cout, cin, kernel, kernel], he_normal(rng, fan_in)),
            Init::Zero => params.add(format!("{name}.weight"), vec![cout, cin, kernel, kernel], || 0.0),
        };
        let b_off = bias.then(|| params.add(format!("{name}.bias"), vec![cout], || 0.0));
        Self { cin, cout, kernel, stride, pad: kernel / 2, w_off, b_off }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        let rows = self.cin * k * k;
        let cols = oh * ow;
        let mut col = vec![0.0; rows * cols];
        for c in 0..self.cin {
            let plane = x.plane(c);
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    let dst = &mut col[r * cols..(r + 1) * cols];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.width..(iy as usize + 1) * x.width];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.width as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], in_h: usize, in_w: usize, oh: usize, ow: usize) -> Tensor {
        let k = self.kernel;
        let cols = oh * ow;
        let mut dx = Tensor::zeros(self.cin, in_h, in_w);
        for c in 0..self.cin {
            let plane = dx.plane_mut(c);
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    let src = &col[r * cols..(r + 1) * cols];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= in_h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * in_w..(iy as usize + 1) * in_w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < in_w as isize {
                                drow[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> (Tensor, ConvCache) {
        assert_eq!(x.channels, self.cin, "conv input channel mismatch");
        let (oh, ow) = self.out_size(x.height, x.width);
        let kk = self.cin * self.kernel * self.kernel;
        let n = oh * ow;
        let col = if self.is_pointwise() { x.data.clone() } else { self.im2col(x, oh, ow) };
        let mut out = Tensor::zeros(self.cout, oh, ow);
        if let Some(b) = self.b_off {
            for o in 0..self.cout {
                out.plane_mut(o).fill(params[b + o]);
            }
        }
        let w = &params[self.w_off..self.w_off + self.cout * kk];
        gemm(self.cout, kk, n, w, false, &col, false, &mut out.data, 1.0);
        (out, ConvCache { col, in_h: x.height, in_w: x.width })
    }

    /// Accumulate parameter gradients into `grads` (when given) and return the
    /// input gradient (skipped when `need_input` is false).
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ConvCache,
        dy: &Tensor,
        grads: Option<&mut [f64]>,
        need_input: bool,
    ) -> Option<Tensor> {
        let kk = self.cin * self.kernel * self.kernel;
        let n = dy.height * dy.width;
        if let Some(grads) = grads {
            if let Some(b) = self.b_off {
                for o in 0..self.cout {
                    grads[b + o] += dy.plane(o).iter().sum::<f64>();
                }
            }
            let gw = &mut grads[self.w_off..self.w_off + self.cout * kk];
            // dW (cout x kk) += dy (cout x n) * col^T (n x kk)
            gemm(self.cout, n, kk, &dy.data, false, &cache.col, true, gw, 1.0);
        }
        if !need_input {
            return None;
        }
        let w = &params[self.w_off..self.w_off + self.cout * kk];
        let mut dcol = vec![0.0; kk * n];
        // dcol (kk x n) = W^T (kk x cout) * dy (cout x n)
        gemm(kk, self.cout, n, w, true, &dy.data, false, &mut dcol, 0.0);
        if self.is_pointwise() {
            Some(Tensor { channels: self.cin, height: cache.in_h, width: cache.in_w, data: dcol })
        } else {
            Some(self.col2im(&dcol, cache.in_h, cache.in_w, dy.height, dy.width))
        }
    }
}

/// `c = a * b + beta * c` for row-major `a` (m x k, or its transpose when
/// `ta`) and `b` (k x n, or its transpose when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths are checked above against the declared shapes
    // and strides, so every access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Fully connected layer over a flattened input.
#[derive(Clone, Debug)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub w_off: usize,
    pub b_off: usize,
}

impl Linear {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, inputs: usize, outputs: usize, init: Init, rng: &mut R) -> Self {
        let w_off = match init {
            // Plain fan-in scaling; the output feeds a softmax or regression target.
            Init::He => {
                let std = (1.0 / inputs.max(1) as f64).sqrt();
                params.add(format!("{name}.weight"), vec![outputs, inputs], || std * rng.sample::<f64, _>(StandardNormal))
            }
            Init::Zero => params.add(format!("{name}.weight"), vec![outputs, inputs], || 0.0),
        };
        let b_off = params.add(format!("{name}.bias"), vec![outputs], || 0.0);
        Self { inputs, outputs, w_off, b_off }
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.inputs, "linear input size mismatch");
        let mut y = params[self.b_off..self.b_off + self.outputs].to_vec();
        let w = &params[self.w_off..self.w_off + self.inputs * self.outputs];
        gemm(self.outputs, self.inputs, 1, w, false, x, false, &mut y, 1.0);
        y
    }

    /// Forward restricted to a contiguous block of output rows.
    pub fn forward_rows(&self, params: &[f64], x: &[f64], rows: std::ops::Range<usize>) -> Vec<f64> {
        let mut y = params[self.b_off + rows.start..self.b_off + rows.end].to_vec();
        let w = &params[self.w_off + rows.start * self.inputs..self.w_off + rows.end * self.inputs];
        gemm(rows.len(), self.inputs, 1, w, false, x, false, &mut y, 1.0);
        y
    }

    /// Backward for a block of output rows (`dy.len() == rows.len()`).
    pub fn backward_rows(
        &self,
        params: &[f64],
        x: &[f64],
        dy: &[f64],
        rows: std::ops::Range<usize>,
        grads: &mut [f64],
    ) -> Vec<f64> {
        let n = self.inputs;
        for (r, g) in rows.clone().zip(dy) {
            grads[self.b_off + r] += g;
            let gw = &mut grads[self.w_off + r * n..self.w_off + (r + 1) * n];
            for (a, b) in gw.iter_mut().zip(x) {
                *a += g * b;
            }
        }
        let mut dx = vec![0.0; n];
        for (r, g) in rows.zip(dy) {
            let w = &params[self.w_off + r * n..self.w_off + (r + 1) * n];
            for (d, wv) in dx.iter_mut().zip(w) {
                *d += g * wv;
            }
        }
        dx
    }

    pub fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        self.backward_rows(params, x, dy, 0..self.outputs, grads)
    }
}

pub fn leaky_relu(x: &mut Tensor) {
    for v in x.data.iter_mut() {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
}

/// Backward through [`leaky_relu`] using the activation output.
pub fn leaky_relu_backward(out: &Tensor, dy: &mut Tensor) {
    for (g, o) in dy.data.iter_mut().zip(&out.data) {
        if *o < 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

pub fn relu(x: &mut Tensor) {
    for v in x.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub fn relu_backward(out: &Tensor, dy: &mut Tensor) {
    for (g, o) in dy.data.iter_mut().zip(&out.data) {
        if *o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Decoupled-weight-decay Adam over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(len: usize, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps: 1e-8, weight_decay, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// Numerically stable softmax cross-entropy; returns `(loss, dlogits)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = -(exps[label] / z).ln();
    let mut d: Vec<f64> = exps.iter().map(|e| e / z).collect();
    d[label] -= 1.0;
    (loss, d)
}
