//! Planar (channel, row, column) arrays of `f64`, used for images and
//! feature maps alike.

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return invalid(format!(
                "tensor data length {} does not match shape {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            ));
        }
        Ok(Self { channels, height, width, data })
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    /// Mirror every row (column reversal).
    pub fn flip_horizontal(&self) -> Tensor {
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                let row = (c * self.height + y) * self.width;
                for x in 0..self.width {
                    out.data[row + x] = self.data[row + self.width - 1 - x];
                }
            }
        }
        out
    }

    /// 2x2 average pooling. Odd trailing rows/columns are dropped.
    pub fn avg_pool2(&self) -> Tensor {
        let (h, w) = (self.height / 2, self.width / 2);
        let mut out = Tensor::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let s = self.at(c, 2 * y, 2 * x)
                        + self.at(c, 2 * y, 2 * x + 1)
                        + self.at(c, 2 * y + 1, 2 * x)
                        + self.at(c, 2 * y + 1, 2 * x + 1);
                    let i = out.idx(c, y, x);
                    out.data[i] = 0.25 * s;
                }
            }
        }
        out
    }

    /// Adjoint of [`Tensor::avg_pool2`] for an input of the given size.
    pub fn avg_pool2_backward(grad: &Tensor, in_height: usize, in_width: usize) -> Tensor {
        let mut out = Tensor::zeros(grad.channels, in_height, in_width);
        for c in 0..grad.channels {
            for y in 0..grad.height {
                for x in 0..grad.width {
                    let g = 0.25 * grad.at(c, y, x);
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = out.idx(c, 2 * y + dy, 2 * x + dx);
                        out.data[i] += g;
                    }
                }
            }
        }
        out
    }

    /// Repeated 2x2 pooling by a power-of-two factor.
    pub fn avg_pool(&self, factor: usize) -> Tensor {
        let mut t = self.clone();
        let mut f = factor;
        while f > 1 {
            t = t.avg_pool2();
            f /= 2;
        }
        t
    }

    pub fn avg_pool_backward(grad: &Tensor, factor: usize, in_height: usize, in_width: usize) -> Tensor {
        let mut sizes = vec![(in_height, in_width)];
        let mut f = factor;
        while f > 2 {
            let (h, w) = *sizes.last().unwrap();
            sizes.push((h / 2, w / 2));
            f /= 2;
        }
        if factor <= 1 {
            return grad.clone();
        }
        let mut g = grad.clone();
        for &(h, w) in sizes.iter().rev() {
            g = Tensor::avg_pool2_backward(&g, h, w);
        }
        g
    }

    pub fn mean_abs_diff(&self, other: &Tensor) -> f64 {
        let n = self.data.len().max(1) as f64;
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_backward_is_adjoint() {
        let x = Tensor::from_vec(1, 8, 8, (0..64).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let g = Tensor::from_vec(1, 2, 2, vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let y = x.avg_pool(4);
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let gx = Tensor::avg_pool_backward(&g, 4, 8, 8);
        let rhs: f64 = x.data.iter().zip(&gx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn double_flip_restores() {
        let x = Tensor::from_vec(2, 3, 5, (0..30).map(|v| v as f64).collect()).unwrap();
        assert_eq!(x.flip_horizontal().flip_horizontal(), x);
        assert_eq!(x.flip_horizontal().at(1, 2, 0), x.at(1, 2, 4));
    }
}
